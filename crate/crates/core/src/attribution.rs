//! Per-neuron change in toxicity projection between a pre and a post model,
//! the four-group taxonomy, and the aggregates built on top of them.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{fmt_sig, write_bytes};
use crate::model::{MeanActivationProfile, ModelBundle};
use crate::numerics::{cosine, dot, normalized, pearson, pearson_p_value};
use crate::probe::{logit_lens, Lexicon, LensEntry};

/// Sign pattern of (alignment with the probe, mean activation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NeuronGroup {
    /// Toxic-aligned, positive activation.
    TP,
    /// Toxic-aligned, negative activation.
    TN,
    /// Anti-aligned, positive activation.
    AP,
    /// Anti-aligned, negative activation.
    AN,
    /// Alignment or activation is exactly zero.
    Degenerate,
}

impl NeuronGroup {
    pub const FOUR: [NeuronGroup; 4] = [NeuronGroup::TP, NeuronGroup::TN, NeuronGroup::AP, NeuronGroup::AN];

    pub fn from_signs(cos_align: f64, m_pre: f64) -> Self {
        match (cos_align > 0.0, cos_align < 0.0, m_pre > 0.0, m_pre < 0.0) {
            (true, _, true, _) => NeuronGroup::TP,
            (true, _, _, true) => NeuronGroup::TN,
            (_, true, true, _) => NeuronGroup::AP,
            (_, true, _, true) => NeuronGroup::AN,
            _ => NeuronGroup::Degenerate,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NeuronGroup::TP => "TP",
            NeuronGroup::TN => "TN",
            NeuronGroup::AP => "AP",
            NeuronGroup::AN => "AN",
            NeuronGroup::Degenerate => "Degenerate",
        }
    }

    fn slot(self) -> Option<usize> {
        NeuronGroup::FOUR.iter().position(|&g| g == self)
    }
}

impl std::str::FromStr for NeuronGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TP" => Ok(NeuronGroup::TP),
            "TN" => Ok(NeuronGroup::TN),
            "AP" => Ok(NeuronGroup::AP),
            "AN" => Ok(NeuronGroup::AN),
            "Degenerate" => Ok(NeuronGroup::Degenerate),
            other => Err(Error::InvalidArgument(format!("unknown neuron group {other:?}"))),
        }
    }
}

impl fmt::Display for NeuronGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether a neuron's change lowers (`Reduce`) or raises the toxicity projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Reduce,
    Increase,
    Zero,
}

impl Direction {
    pub fn from_delta(delta: f64) -> Self {
        if delta > 0.0 {
            Direction::Reduce
        } else if delta < 0.0 {
            Direction::Increase
        } else {
            Direction::Zero
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Reduce => "Reduce",
            Direction::Increase => "Increase",
            Direction::Zero => "Zero",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronAttribution {
    pub layer: usize,
    pub index: usize,
    pub cos_align: f64,
    pub m_pre: f64,
    pub m_post: f64,
    pub delta: f64,
    pub group: NeuronGroup,
    pub direction: Direction,
}

pub fn classify_group(cos_align: f64, m_pre: f64, delta: f64) -> (NeuronGroup, Direction) {
    (NeuronGroup::from_signs(cos_align, m_pre), Direction::from_delta(delta))
}

fn unit_probe(probe_dir: &[f64]) -> Result<Vec<f64>> {
    normalized(probe_dir).map_err(|_| Error::ZeroProbe)
}

/// `(m_pre·v_pre − m_post·v_post) · Ŵ`.
pub fn delta_toxic(v_pre: &[f32], v_post: &[f32], m_pre: f64, m_post: f64, probe_dir: &[f64]) -> Result<f64> {
    if v_pre.len() != probe_dir.len() || v_post.len() != probe_dir.len() {
        return Err(Error::ShapeMismatch(format!(
            "value vectors of length {}/{} vs probe of length {}",
            v_pre.len(),
            v_post.len(),
            probe_dir.len()
        )));
    }
    let unit = unit_probe(probe_dir)?;
    Ok(delta_unit(v_pre, v_post, m_pre, m_post, &unit))
}

fn delta_unit(v_pre: &[f32], v_post: &[f32], m_pre: f64, m_post: f64, unit: &[f64]) -> f64 {
    v_pre
        .iter()
        .zip(v_post)
        .zip(unit)
        .map(|((&a, &b), &w)| (m_pre * a as f64 - m_post * b as f64) * w)
        .sum()
}

/// Cosine of a value vector with the probe; a zero vector counts as 0.
fn alignment(v: &[f32], unit: &[f64]) -> f64 {
    cosine(v, unit).unwrap_or(0.0)
}

/// One record per `(layer, neuron)` in layer-then-index order.
///
/// Alignment uses the pre model's value vectors.
pub fn attribute_all(
    pre: &ModelBundle,
    post: &ModelBundle,
    profile_pre: &MeanActivationProfile,
    profile_post: &MeanActivationProfile,
    probe_dir: &[f64],
) -> Result<Vec<NeuronAttribution>> {
    pre.check_same_config(post)?;
    let cfg = &pre.config;
    profile_pre.check_shape(cfg.n_layers, cfg.d_mlp)?;
    profile_post.check_shape(cfg.n_layers, cfg.d_mlp)?;
    if probe_dir.len() != cfg.d_model {
        return Err(Error::ShapeMismatch(format!(
            "probe of length {} vs d_model {}",
            probe_dir.len(),
            cfg.d_model
        )));
    }
    let unit = unit_probe(probe_dir)?;
    let mut out = Vec::with_capacity(cfg.n_neurons());
    for layer in 0..cfg.n_layers {
        for index in 0..cfg.d_mlp {
            let v_pre = pre.value_vector(layer, index);
            let v_post = post.value_vector(layer, index);
            let m_pre = profile_pre.get(layer, index);
            let m_post = profile_post.get(layer, index);
            let cos_align = alignment(v_pre, &unit);
            let delta = delta_unit(v_pre, v_post, m_pre, m_post, &unit);
            let (group, direction) = classify_group(cos_align, m_pre, delta);
            out.push(NeuronAttribution {
                layer,
                index,
                cos_align,
                m_pre,
                m_post,
                delta,
                group,
                direction,
            });
        }
    }
    Ok(out)
}

/// `(layer, index, cos_align, m_pre)` rows without any post model.
pub fn alignment_table(
    bundle: &ModelBundle,
    profile: &MeanActivationProfile,
    probe_dir: &[f64],
) -> Result<Vec<NeuronAttribution>> {
    attribute_all(bundle, bundle, profile, profile, probe_dir)
}

const CSV_HEADER: &str = "layer,index,cos_align,m_pre,m_post,delta,group,direction";

pub fn write_attribution_csv(path: &Path, attrs: &[NeuronAttribution]) -> Result<()> {
    let mut s = format!("{CSV_HEADER}\n");
    for a in attrs {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.layer,
            a.index,
            fmt_sig(a.cos_align, 9),
            fmt_sig(a.m_pre, 9),
            fmt_sig(a.m_post, 9),
            fmt_sig(a.delta, 9),
            a.group,
            a.direction.as_str()
        ));
    }
    write_bytes(path, s.as_bytes())
}

/// Reads a table written by [`write_attribution_csv`]. Group and direction
/// are taken from their columns, not recomputed from the rounded numbers.
pub fn read_attribution_csv(path: &Path) -> Result<Vec<NeuronAttribution>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(path, "empty file"))?;
    if header != CSV_HEADER {
        return Err(Error::parse(path, format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |what: &str| Error::parse(path, format!("line {}: bad {what}", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad("field count"));
        }
        let num = |i: usize, what: &str| f[i].parse::<f64>().map_err(|_| bad(what));
        let direction = match f[7] {
            "Reduce" => Direction::Reduce,
            "Increase" => Direction::Increase,
            "Zero" => Direction::Zero,
            _ => return Err(bad("direction")),
        };
        out.push(NeuronAttribution {
            layer: f[0].parse().map_err(|_| bad("layer"))?,
            index: f[1].parse().map_err(|_| bad("index"))?,
            cos_align: num(2, "cos_align")?,
            m_pre: num(3, "m_pre")?,
            m_post: num(4, "m_post")?,
            delta: num(5, "delta")?,
            group: f[6].parse().map_err(|_| bad("group"))?,
            direction,
        });
    }
    Ok(out)
}

/// Per-layer reduction (Σ Δ>0), increase magnitude (Σ |Δ<0|), and net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLedger {
    pub layer: Vec<usize>,
    pub reduction: Vec<f64>,
    pub increase: Vec<f64>,
    pub net: Vec<f64>,
    pub total_reduction: f64,
    pub total_increase: f64,
    pub total_net: f64,
}

pub fn layer_ledger(attrs: &[NeuronAttribution]) -> LayerLedger {
    let n_layers = attrs.iter().map(|a| a.layer + 1).max().unwrap_or(0);
    let mut reduction = vec![0.0; n_layers];
    let mut increase = vec![0.0; n_layers];
    for a in attrs {
        if a.delta > 0.0 {
            reduction[a.layer] += a.delta;
        } else if a.delta < 0.0 {
            increase[a.layer] += -a.delta;
        }
    }
    let net: Vec<f64> = reduction.iter().zip(&increase).map(|(r, i)| r - i).collect();
    LayerLedger {
        layer: (0..n_layers).collect(),
        total_reduction: reduction.iter().sum(),
        total_increase: increase.iter().sum(),
        total_net: net.iter().sum(),
        reduction,
        increase,
        net,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: NeuronGroup,
    /// Neurons in the group regardless of direction.
    pub count: usize,
    /// Neurons in the group with Δ > 0.
    pub reducing: usize,
    /// Share of the four-group Δ>0 neurons.
    pub proportion: f64,
    /// Σ Δ over the group's Δ>0 neurons.
    pub reduction: f64,
    /// Σ Δ over the whole group.
    pub net: f64,
    /// Σ Δ>0 per layer.
    pub per_layer_reduction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeCurve {
    /// Number of top-ranked Δ>0 neurons included.
    pub x: Vec<usize>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n_neurons: usize,
    pub n_reducing: usize,
    pub n_increasing: usize,
    pub n_degenerate: usize,
    pub reducing_fraction: f64,
    /// Share of four-group Δ>0 neurons whose mean activation is negative.
    pub negative_activation_share: f64,
    pub groups: Vec<GroupStats>,
    /// All Δ>0 neurons ranked by descending Δ.
    pub cumulative: CumulativeCurve,
    /// The same ranking restricted to each of TP, TN, AP, AN.
    pub cumulative_by_group: Vec<(NeuronGroup, CumulativeCurve)>,
}

fn ranked_reducers<'a>(attrs: impl Iterator<Item = &'a NeuronAttribution>) -> Vec<&'a NeuronAttribution> {
    let mut v: Vec<&NeuronAttribution> = attrs.filter(|a| a.delta > 0.0).collect();
    v.sort_by(|a, b| {
        b.delta
            .total_cmp(&a.delta)
            .then(a.layer.cmp(&b.layer))
            .then(a.index.cmp(&b.index))
    });
    v
}

fn cumulative(ranked: &[&NeuronAttribution]) -> CumulativeCurve {
    let mut acc = 0.0;
    let mut y = Vec::with_capacity(ranked.len());
    for a in ranked {
        acc += a.delta;
        y.push(acc);
    }
    CumulativeCurve {
        x: (1..=ranked.len()).collect(),
        y,
    }
}

pub fn group_summary(attrs: &[NeuronAttribution]) -> GroupSummary {
    let n_layers = attrs.iter().map(|a| a.layer + 1).max().unwrap_or(0);
    let mut groups: Vec<GroupStats> = NeuronGroup::FOUR
        .iter()
        .map(|&group| GroupStats {
            group,
            count: 0,
            reducing: 0,
            proportion: 0.0,
            reduction: 0.0,
            net: 0.0,
            per_layer_reduction: vec![0.0; n_layers],
        })
        .collect();
    let mut n_degenerate = 0;
    for a in attrs {
        let Some(slot) = a.group.slot() else {
            n_degenerate += 1;
            continue;
        };
        let g = &mut groups[slot];
        g.count += 1;
        g.net += a.delta;
        if a.delta > 0.0 {
            g.reducing += 1;
            g.reduction += a.delta;
            g.per_layer_reduction[a.layer] += a.delta;
        }
    }
    let four_reducing: usize = groups.iter().map(|g| g.reducing).sum();
    for g in &mut groups {
        g.proportion = if four_reducing > 0 {
            g.reducing as f64 / four_reducing as f64
        } else {
            0.0
        };
    }
    let negative = groups
        .iter()
        .filter(|g| matches!(g.group, NeuronGroup::TN | NeuronGroup::AN))
        .map(|g| g.reducing)
        .sum::<usize>();
    let n_reducing = attrs.iter().filter(|a| a.delta > 0.0).count();
    let n_increasing = attrs.iter().filter(|a| a.delta < 0.0).count();
    let ranked = ranked_reducers(attrs.iter());
    let cumulative_by_group = NeuronGroup::FOUR
        .iter()
        .map(|&g| (g, cumulative(&ranked_reducers(attrs.iter().filter(|a| a.group == g)))))
        .collect();
    GroupSummary {
        n_neurons: attrs.len(),
        n_reducing,
        n_increasing,
        n_degenerate,
        reducing_fraction: if attrs.is_empty() {
            0.0
        } else {
            n_reducing as f64 / attrs.len() as f64
        },
        negative_activation_share: if four_reducing > 0 {
            negative as f64 / four_reducing as f64
        } else {
            0.0
        },
        groups,
        cumulative: cumulative(&ranked),
        cumulative_by_group,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
}

/// Pearson correlation of the activation shift `m_pre − m_post` with
/// alignment and with `m_pre`; `None` where a sequence is constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftCorrelation {
    pub n: usize,
    pub align: Option<Correlation>,
    pub activation: Option<Correlation>,
}

pub fn shift_correlation(attrs: &[NeuronAttribution]) -> Result<ShiftCorrelation> {
    let shifts: Vec<f64> = attrs.iter().map(|a| a.m_pre - a.m_post).collect();
    let aligns: Vec<f64> = attrs.iter().map(|a| a.cos_align).collect();
    let acts: Vec<f64> = attrs.iter().map(|a| a.m_pre).collect();
    let corr = |other: &[f64]| -> Result<Option<Correlation>> {
        match pearson(&shifts, other) {
            Ok(r) => Ok(Some(Correlation {
                r,
                p: pearson_p_value(r, shifts.len()),
            })),
            Err(Error::ConstantSequence) => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok(ShiftCorrelation {
        n: attrs.len(),
        align: corr(&aligns)?,
        activation: corr(&acts)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedNeuron {
    pub layer: usize,
    pub index: usize,
    pub cos_align: f64,
    pub lens: Vec<LensEntry>,
    /// Number of lexicon-toxic tokens among `lens`.
    pub toxic_hits: usize,
}

fn ranked_by_alignment(bundle: &ModelBundle, unit: &[f64], sign: f64) -> Vec<(usize, usize, f64)> {
    let cfg = &bundle.config;
    let mut all: Vec<(usize, usize, f64)> = (0..cfg.n_layers)
        .flat_map(|l| (0..cfg.d_mlp).map(move |i| (l, i)))
        .map(|(l, i)| (l, i, alignment(bundle.value_vector(l, i), unit)))
        .collect();
    all.sort_by(|a, b| (sign * b.2).total_cmp(&(sign * a.2)).then((a.0, a.1).cmp(&(b.0, b.1))));
    all
}

fn lens_record(
    bundle: &ModelBundle,
    lexicon: &Lexicon,
    (layer, index, cos_align): (usize, usize, f64),
    flip: bool,
    lens_k: usize,
) -> Result<RankedNeuron> {
    let v: Vec<f64> = bundle
        .value_vector(layer, index)
        .iter()
        .map(|&x| if flip { -(x as f64) } else { x as f64 })
        .collect();
    let lens = logit_lens(bundle, &v, lens_k)?;
    let toxic_hits = lens.iter().filter(|e| lexicon.is_toxic_id(bundle, e.id)).count();
    Ok(RankedNeuron {
        layer,
        index,
        cos_align,
        lens,
        toxic_hits,
    })
}

/// Value vectors most aligned with the probe whose logit-lens top tokens
/// include at least one lexicon-toxic token, up to `max`.
pub fn identify_toxic_neurons(
    bundle: &ModelBundle,
    probe_dir: &[f64],
    lexicon: &Lexicon,
    candidates: usize,
    lens_k: usize,
    max: usize,
) -> Result<Vec<RankedNeuron>> {
    let unit = unit_probe(probe_dir)?;
    let mut out = Vec::new();
    for cand in ranked_by_alignment(bundle, &unit, 1.0).into_iter().take(candidates) {
        let rec = lens_record(bundle, lexicon, cand, false, lens_k)?;
        if rec.toxic_hits > 0 {
            out.push(rec);
            if out.len() == max {
                break;
            }
        }
    }
    Ok(out)
}

/// Anti-aligned value vectors (`cos(v, −W) ≥ tau`), read through the
/// logit lens after flipping their sign.
pub fn antipodes(
    bundle: &ModelBundle,
    probe_dir: &[f64],
    lexicon: &Lexicon,
    tau: f64,
    lens_k: usize,
) -> Result<Vec<RankedNeuron>> {
    let unit = unit_probe(probe_dir)?;
    ranked_by_alignment(bundle, &unit, -1.0)
        .into_iter()
        .take_while(|(_, _, c)| -c >= tau)
        .map(|cand| lens_record(bundle, lexicon, cand, true, lens_k))
        .collect()
}

/// Projection of `Σ m̄_i v_i` for one layer onto the unit probe.
pub fn layer_write_projection(
    bundle: &ModelBundle,
    profile: &MeanActivationProfile,
    layer: usize,
    probe_dir: &[f64],
) -> Result<f64> {
    let unit = unit_probe(probe_dir)?;
    let mut write = vec![0.0f64; bundle.config.d_model];
    for (i, &m) in profile.layer(layer).iter().enumerate() {
        for (w, &v) in write.iter_mut().zip(bundle.value_vector(layer, i)) {
            *w += m * v as f64;
        }
    }
    Ok(dot(&write, &unit))
}
