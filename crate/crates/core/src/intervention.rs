//! Activation patching, activation editing and steering, expressed as
//! forward hooks built from declarative plans.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attribution::{NeuronAttribution, NeuronGroup};
use crate::error::{Error, Result};
use crate::model::{
    forward_hooked, generate_greedy_hooked, ForwardHook, ForwardTrace, MeanActivationProfile, ModelBundle,
    ModelConfig,
};
use crate::probe::steer;

pub type NeuronId = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ranking {
    /// Largest `|cos_align|` first within each group.
    DescendingCosine,
    /// Largest signed `cos_align` first, so anti-aligned groups start from
    /// their weakest members.
    DescendingSignedCosine,
    /// Smallest `|m_pre|` first.
    AscendingAbsActivation,
}

/// Where an edit's alignment table comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DirectionSource {
    Probe { probe: PathBuf },
    Contrastive { lexicon: PathBuf },
}

/// Serialized form of an intervention (`plan.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterventionPlan {
    PatchToProfile {
        targets: Vec<NeuronId>,
        profile: PathBuf,
    },
    Edit {
        alpha: f64,
        beta: f64,
        ranking: Ranking,
        direction: DirectionSource,
        /// Profile used to sign the activations when forming groups.
        profile: PathBuf,
        #[serde(default)]
        selection: Option<EditSelection>,
    },
    Steer {
        probe: PathBuf,
        alpha: f64,
    },
}

impl InterventionPlan {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match self {
            InterventionPlan::PatchToProfile { targets, .. } => check_targets(targets, config),
            InterventionPlan::Edit { alpha, beta, selection, .. } => {
                check_alpha(*alpha)?;
                check_beta(*beta)?;
                if let Some(sel) = selection {
                    for group in sel.lists() {
                        check_targets(group, config)?;
                    }
                }
                Ok(())
            }
            InterventionPlan::Steer { alpha, .. } => {
                if !alpha.is_finite() {
                    return Err(Error::InvalidArgument("steer alpha must be finite".into()));
                }
                Ok(())
            }
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("edit alpha {alpha} not in (0, 1)")));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!("edit fraction {beta} not in (0, 1]")));
    }
    Ok(())
}

fn check_targets(targets: &[NeuronId], config: &ModelConfig) -> Result<()> {
    let mut seen = BTreeSet::new();
    for &(l, i) in targets {
        if l >= config.n_layers || i >= config.d_mlp {
            return Err(Error::IndexOutOfRange(format!(
                "neuron ({l}, {i}) outside {}x{}",
                config.n_layers, config.d_mlp
            )));
        }
        if !seen.insert((l, i)) {
            return Err(Error::InvalidArgument(format!("neuron ({l}, {i}) listed twice")));
        }
    }
    Ok(())
}

/// Runs several hooks in order.
pub struct HookChain<'a>(pub Vec<&'a dyn ForwardHook>);

impl ForwardHook for HookChain<'_> {
    fn edit_scores(&self, layer: usize, position: usize, scores: &mut [f32]) {
        for h in &self.0 {
            h.edit_scores(layer, position, scores);
        }
    }

    fn edit_final_residual(&self, position: usize, residual: &mut [f32]) {
        for h in &self.0 {
            h.edit_final_residual(position, residual);
        }
    }
}

/// Replaces targeted scores by a reference mean at every position.
#[derive(Debug, Clone)]
pub struct PatchHook {
    per_layer: Vec<Vec<(usize, f32)>>,
}

impl PatchHook {
    pub fn new(config: &ModelConfig, targets: &[NeuronId], reference: &MeanActivationProfile) -> Result<Self> {
        reference.check_shape(config.n_layers, config.d_mlp)?;
        check_targets(targets, config)?;
        let mut per_layer = vec![Vec::new(); config.n_layers];
        for &(l, i) in targets {
            per_layer[l].push((i, reference.get(l, i) as f32));
        }
        Ok(Self { per_layer })
    }
}

impl ForwardHook for PatchHook {
    fn edit_scores(&self, layer: usize, _position: usize, scores: &mut [f32]) {
        for &(i, m) in &self.per_layer[layer] {
            scores[i] = m;
        }
    }
}

/// Neurons chosen for editing, per group.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSelection {
    pub tp: Vec<NeuronId>,
    pub tn: Vec<NeuronId>,
    pub ap: Vec<NeuronId>,
    pub an: Vec<NeuronId>,
}

impl EditSelection {
    pub fn lists(&self) -> [&Vec<NeuronId>; 4] {
        [&self.tp, &self.tn, &self.ap, &self.an]
    }

    pub fn group(&self, group: NeuronGroup) -> &[NeuronId] {
        match group {
            NeuronGroup::TP => &self.tp,
            NeuronGroup::TN => &self.tn,
            NeuronGroup::AP => &self.ap,
            NeuronGroup::AN => &self.an,
            NeuronGroup::Degenerate => &[],
        }
    }

    pub fn len(&self) -> usize {
        self.lists().iter().map(|l| l.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> Vec<NeuronId> {
        self.lists().into_iter().flatten().copied().collect()
    }
}

/// `⌈β·n⌉`, guarding against `β·n` landing a hair above an integer.
pub fn selection_count(beta: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    ((beta * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Groups neurons by `sign(cos_align) × sign(m_pre)` and keeps the top
/// `⌈β·|group|⌉` of each under `ranking`; ties go to the lower (layer, index).
pub fn select_edit_targets(table: &[NeuronAttribution], beta: f64, ranking: Ranking) -> Result<EditSelection> {
    check_beta(beta)?;
    let pick = |group: NeuronGroup| -> Vec<NeuronId> {
        let mut members: Vec<&NeuronAttribution> = table
            .iter()
            .filter(|a| NeuronGroup::from_signs(a.cos_align, a.m_pre) == group)
            .collect();
        let key = |a: &NeuronAttribution| match ranking {
            Ranking::DescendingCosine => -a.cos_align.abs(),
            Ranking::DescendingSignedCosine => -a.cos_align,
            Ranking::AscendingAbsActivation => a.m_pre.abs(),
        };
        members.sort_by(|a, b| key(a).total_cmp(&key(b)).then((a.layer, a.index).cmp(&(b.layer, b.index))));
        let n = selection_count(beta, members.len());
        members[..n].iter().map(|a| (a.layer, a.index)).collect()
    };
    Ok(EditSelection {
        tp: pick(NeuronGroup::TP),
        tn: pick(NeuronGroup::TN),
        ap: pick(NeuronGroup::AP),
        an: pick(NeuronGroup::AN),
    })
}

/// Multiplicative factor applied to a group's scores.
pub fn edit_factor(group: NeuronGroup, alpha: f64) -> f64 {
    match group {
        NeuronGroup::TP | NeuronGroup::AN => 1.0 - alpha,
        NeuronGroup::TN | NeuronGroup::AP => 1.0 + alpha,
        NeuronGroup::Degenerate => 1.0,
    }
}

/// Rescales the dynamically computed scores of selected neurons.
#[derive(Debug, Clone)]
pub struct EditHook {
    per_layer: Vec<Vec<(usize, f64)>>,
}

impl EditHook {
    pub fn new(config: &ModelConfig, selection: &EditSelection, alpha: f64) -> Result<Self> {
        Self::combined(config, &[(selection, alpha)])
    }

    /// Several selections with their own `α`, applied in one pass. A neuron
    /// present in more than one selection gets the product of its factors.
    pub fn combined(config: &ModelConfig, edits: &[(&EditSelection, f64)]) -> Result<Self> {
        let mut per_layer: Vec<Vec<(usize, f64)>> = vec![Vec::new(); config.n_layers];
        for (selection, alpha) in edits {
            check_alpha(*alpha)?;
            for group in NeuronGroup::FOUR {
                let ids = selection.group(group);
                check_targets(ids, config)?;
                let f = edit_factor(group, *alpha);
                for &(l, i) in ids {
                    match per_layer[l].iter_mut().find(|(j, _)| *j == i) {
                        Some(slot) => slot.1 *= f,
                        None => per_layer[l].push((i, f)),
                    }
                }
            }
        }
        Ok(Self { per_layer })
    }
}

impl ForwardHook for EditHook {
    fn edit_scores(&self, layer: usize, _position: usize, scores: &mut [f32]) {
        for &(i, f) in &self.per_layer[layer] {
            scores[i] = (scores[i] as f64 * f) as f32;
        }
    }
}

/// Subtracts `α·W` from the final residual at every position.
#[derive(Debug, Clone)]
pub struct SteerHook {
    direction: Vec<f64>,
    alpha: f64,
}

impl SteerHook {
    pub fn new(config: &ModelConfig, direction: &[f64], alpha: f64) -> Result<Self> {
        if direction.len() != config.d_model {
            return Err(Error::ShapeMismatch(format!(
                "steering direction of length {} vs d_model {}",
                direction.len(),
                config.d_model
            )));
        }
        Ok(Self {
            direction: direction.to_vec(),
            alpha,
        })
    }
}

impl ForwardHook for SteerHook {
    fn edit_final_residual(&self, _position: usize, residual: &mut [f32]) {
        let steered = steer(residual, &self.direction, self.alpha).expect("length checked on construction");
        residual.copy_from_slice(&steered);
    }
}

pub fn patch_forward(
    bundle: &ModelBundle,
    targets: &[NeuronId],
    reference: &MeanActivationProfile,
    ids: &[u32],
) -> Result<ForwardTrace> {
    let hook = PatchHook::new(&bundle.config, targets, reference)?;
    forward_hooked(bundle, ids, &hook)
}

pub fn edit_forward(bundle: &ModelBundle, selection: &EditSelection, alpha: f64, ids: &[u32]) -> Result<ForwardTrace> {
    let hook = EditHook::new(&bundle.config, selection, alpha)?;
    forward_hooked(bundle, ids, &hook)
}

pub fn steer_forward(bundle: &ModelBundle, direction: &[f64], alpha: f64, ids: &[u32]) -> Result<ForwardTrace> {
    let hook = SteerHook::new(&bundle.config, direction, alpha)?;
    forward_hooked(bundle, ids, &hook)
}

/// Greedy generation under any hook, returning only the new tokens' trace.
pub fn generate_with(
    bundle: &ModelBundle,
    prompt: &[u32],
    n_new: usize,
    hook: &dyn ForwardHook,
) -> Result<(Vec<u32>, ForwardTrace)> {
    generate_greedy_hooked(bundle, prompt, n_new, hook)
}
