//! Deterministic factory for toy bundles with a planted toxic direction,
//! plus the corpora, prompts, preference pairs and lexicon that go with them.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attribution::NeuronGroup;
use crate::error::{Error, Result};
use crate::formats::{write_json, write_jsonl, LabeledText, PairRecord, PromptRecord};
use crate::model::{forward_traced, save_bundle, MlpKind, ModelBundle, ModelConfig, Vocab, UNK};
use crate::numerics::{argmax, ActivationKind, Tensor1, Tensor2};
use crate::probe::Lexicon;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantSpec {
    pub seed: u64,
    pub config: ModelConfig,
    pub n_toxic_tokens: usize,
    pub n_clean_tokens: usize,
    /// Planted toxic-aligned neurons per layer.
    pub n_toxic_neurons: usize,
    /// Planted anti-toxic neurons per layer.
    pub n_anti_neurons: usize,
    /// Lower bound on `|cos(v, toxic_dir)|` for planted value vectors.
    pub alignment: f64,
    /// Size of the random component mixed into planted value vectors.
    pub noise: f64,

    /// Embedding weight on the toxic direction for toxic/clean tokens.
    pub embed_toxic: f64,
    /// Spread of the toxic-direction weight of neutral tokens.
    pub embed_neutral: f64,
    /// Embedding weight on the shared constant direction.
    pub embed_bias: f64,
    /// Norm of each token's identity component.
    pub embed_identity: f64,
    pub positional_scale: f64,
    /// Attention value gain along the toxic direction.
    pub attn_toxic: f64,
    pub attn_noise: f64,
    pub planted_value_norm: f64,
    pub planted_key_bias: f64,
    pub planted_key_toxic: f64,
    pub anti_key_bias: f64,
    pub anti_key_toxic: f64,
    /// Fraction of planted toxic-aligned neurons with a positive activation
    /// (the rest sit in the negative lobe).
    pub toxic_positive_fraction: f64,
    /// Same split for the planted anti-toxic neurons.
    pub anti_positive_fraction: f64,
    pub random_key_scale: f64,
    pub random_value_scale: f64,
    /// Unembedding weight on the toxic direction for toxic/clean tokens.
    pub unembed_toxic: f64,
    /// Unembedding weight on the identity of a token's predecessors.
    pub unembed_bigram: f64,
    pub unembed_neutral_bias: f64,
    /// Spread of the per-index toxic-vs-clean logit offsets.
    pub polarity_offset: f64,
    /// Rounds of shifting the positional rows so neutral text has a final
    /// residual centered along the toxic direction.
    pub calibration_rounds: usize,

    pub n_labeled: usize,
    pub n_scorer_labeled: usize,
    pub n_prompts: usize,
    pub n_pairs: usize,
    pub n_corpus: usize,
    pub prompt_len: (usize, usize),
    pub labeled_len: (usize, usize),
    /// Range of the fraction of lexicon tokens in a labeled text.
    pub labeled_marked: (f64, f64),
    pub corpus_len: usize,
    pub pair_len: usize,
    /// Candidate prompts drawn per prompt kept; the kept ones are those whose
    /// first-step toxic/clean logit margin is closest to `prompt_margin`.
    pub prompt_pool: usize,
    pub prompt_margin: f64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            config: ModelConfig {
                n_layers: 4,
                d_model: 64,
                d_mlp: 256,
                n_heads: 4,
                vocab_size: 64,
                max_seq: 40,
                mlp_kind: MlpKind::Plain,
                activation: ActivationKind::GeluExact,
                tied_unembedding: false,
                final_norm: true,
            },
            n_toxic_tokens: 12,
            n_clean_tokens: 12,
            n_toxic_neurons: 8,
            n_anti_neurons: 8,
            alignment: 0.9,
            noise: 0.2,
            embed_toxic: 3.0,
            embed_neutral: 2.0,
            embed_bias: 64.0,
            embed_identity: 2.0,
            positional_scale: 0.1,
            attn_toxic: 1.2,
            attn_noise: 0.05,
            planted_value_norm: 5.0,
            planted_key_bias: 0.0375,
            planted_key_toxic: 0.0,
            anti_key_bias: 0.0375,
            anti_key_toxic: 0.0,
            toxic_positive_fraction: 0.5,
            anti_positive_fraction: 0.5,
            random_key_scale: 0.3,
            random_value_scale: 0.1,
            unembed_toxic: 4.0,
            unembed_bigram: 6.0,
            unembed_neutral_bias: -4.0,
            polarity_offset: 2.0,
            calibration_rounds: 24,
            n_labeled: 1000,
            n_scorer_labeled: 1000,
            n_prompts: 200,
            n_pairs: 256,
            n_corpus: 64,
            prompt_len: (4, 8),
            labeled_len: (6, 12),
            labeled_marked: (0.75, 1.0),
            corpus_len: 12,
            pair_len: 3,
            prompt_pool: 1,
            prompt_margin: 0.0,
        }
    }
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let cfg = &self.config;
        let n_neutral = cfg.vocab_size.saturating_sub(1 + self.n_toxic_tokens + self.n_clean_tokens);
        if self.n_toxic_tokens == 0 || self.n_toxic_tokens != self.n_clean_tokens || n_neutral < 2 {
            return Err(Error::InvalidArgument(
                "need equal nonzero toxic and clean token counts and at least two neutral tokens".into(),
            ));
        }
        if self.n_toxic_neurons + self.n_anti_neurons > cfg.d_mlp {
            return Err(Error::InvalidArgument("more planted neurons than d_mlp".into()));
        }
        if cfg.d_model < 4 {
            return Err(Error::InvalidArgument("d_model must be at least 4".into()));
        }
        if !(0.0..=1.0).contains(&self.anti_positive_fraction)
            || !(0.0..=1.0).contains(&self.toxic_positive_fraction)
            || !(0.0..=1.0).contains(&self.labeled_marked.0)
            || !(self.labeled_marked.0..=1.0).contains(&self.labeled_marked.1)
        {
            return Err(Error::InvalidArgument("fractions must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.alignment) || self.noise < 0.0 {
            return Err(Error::InvalidArgument("alignment must be in [0, 1], noise >= 0".into()));
        }
        if self.prompt_len.0 == 0 || self.prompt_len.0 > self.prompt_len.1 || self.labeled_len.0 == 0 {
            return Err(Error::InvalidArgument("bad length ranges".into()));
        }
        if self.prompt_len.1 + 20 > cfg.max_seq || self.corpus_len > cfg.max_seq || self.labeled_len.1 > cfg.max_seq {
            return Err(Error::InvalidArgument("max_seq too small for the requested text lengths".into()));
        }
        Ok(())
    }

    fn n_neutral(&self) -> usize {
        self.config.vocab_size - 1 - self.n_toxic_tokens - self.n_clean_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedNeuron {
    pub layer: usize,
    pub index: usize,
    pub intended: NeuronGroup,
    pub cos_planted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub toxic_dir: Vec<f64>,
    pub bias_dir: Vec<f64>,
    pub toxic_tokens: Vec<String>,
    pub clean_tokens: Vec<String>,
    pub neutral_tokens: Vec<String>,
    /// Toxic-direction weight of each neutral token's embedding.
    pub neutral_tilt: Vec<f64>,
    pub planted: Vec<PlantedNeuron>,
}

impl GroundTruth {
    pub fn lexicon(&self) -> Lexicon {
        Lexicon {
            toxic: self.toxic_tokens.clone(),
            nontoxic: self.clean_tokens.clone(),
        }
    }

    pub fn planted_of(&self, group: NeuronGroup) -> Vec<(usize, usize)> {
        self.planted
            .iter()
            .filter(|p| p.intended == group)
            .map(|p| (p.layer, p.index))
            .collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Removes the components along the all-ones vector and along each of `basis`
/// (assumed orthonormal).
fn project_out(v: &mut [f64], basis: &[&[f64]]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    for b in basis {
        let c = dot(v, b);
        v.iter_mut().zip(b.iter()).for_each(|(x, y)| *x -= c * y);
    }
}

fn random_direction(rng: &mut ChaCha8Rng, d: usize, basis: &[&[f64]]) -> Vec<f64> {
    let mut v = gaussian(rng, d);
    project_out(&mut v, basis);
    unit(&mut v);
    v
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn token_names(spec: &PlantSpec) -> (Vec<String>, Vec<String>, Vec<String>) {
    let toxic = (0..spec.n_toxic_tokens).map(|i| format!("T{i}")).collect();
    let clean = (0..spec.n_clean_tokens).map(|i| format!("C{i}")).collect();
    let neutral = (0..spec.n_neutral()).map(|i| format!("w{i}")).collect();
    (toxic, clean, neutral)
}

/// Builds the planted bundle and its ground-truth table.
pub fn plant_bundle(spec: &PlantSpec) -> Result<(ModelBundle, GroundTruth)> {
    spec.validate()?;
    let cfg = spec.config.clone();
    let (d, dm, v_size) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
    let (toxic, clean, neutral) = token_names(spec);
    let mut names = vec![UNK.to_string()];
    names.extend(toxic.iter().cloned());
    names.extend(clean.iter().cloned());
    names.extend(neutral.iter().cloned());
    let vocab = Vocab::new(names)?;
    let n_cls = spec.n_toxic_tokens;
    let t_id = |j: usize| 1 + j;
    let c_id = |j: usize| 1 + n_cls + j;
    let w_id = |k: usize| 1 + 2 * n_cls + k;

    let mut rng = stream(spec.seed, 1);
    let u_t = random_direction(&mut rng, d, &[]);
    let u_b = random_direction(&mut rng, d, &[&u_t]);
    let identity: Vec<Vec<f64>> = (0..v_size).map(|_| random_direction(&mut rng, d, &[&u_t, &u_b])).collect();
    let mut tilt_rng = stream(spec.seed, 2);
    let neutral_tilt: Vec<f64> = (0..spec.n_neutral())
        .map(|_| spec.embed_neutral * tilt_rng.random_range(-1.0..1.0))
        .collect();

    let mut bundle = ModelBundle::zeros(cfg.clone(), vocab)?;

    // embeddings: shared constant + toxic tilt + token identity
    bundle.embedding = Tensor2::from_fn(v_size, d, |tok, j| {
        let tilt = if tok == 0 {
            0.0
        } else if tok <= n_cls {
            spec.embed_toxic
        } else if tok <= 2 * n_cls {
            -spec.embed_toxic
        } else {
            neutral_tilt[tok - 1 - 2 * n_cls]
        };
        (spec.embed_bias * u_b[j] + tilt * u_t[j] + spec.embed_identity * identity[tok][j]) as f32
    });
    let mut prng = stream(spec.seed, 3);
    let pos_std = spec.positional_scale / (d as f64).sqrt();
    bundle.positional = Tensor2::new(
        cfg.max_seq,
        d,
        to_f32(&gaussian(&mut prng, cfg.max_seq * d).iter().map(|x| x * pos_std).collect::<Vec<_>>()),
    )?;

    // attention: near-uniform mixing that carries the context's toxic tilt
    let mut arng = stream(spec.seed, 4);
    let noise_std = spec.attn_noise / (d as f64).sqrt();
    for layer in bundle.layers.iter_mut() {
        let mut noisy = |base: &dyn Fn(usize, usize) -> f64| -> Result<Tensor2> {
            let data: Vec<f32> = (0..d * d)
                .map(|k| (base(k / d, k % d) + noise_std * arng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            Tensor2::new(d, d, data)
        };
        layer.attn.query = noisy(&|_, _| 0.0)?;
        layer.attn.key = noisy(&|_, _| 0.0)?;
        layer.attn.value = noisy(&|r, c| spec.attn_toxic * u_t[r] * u_t[c])?;
        layer.attn.output = noisy(&|r, c| if r == c { 1.0 } else { 0.0 })?;
    }

    // MLP: random neurons plus planted toxic-aligned and anti-toxic neurons
    let mut mrng = stream(spec.seed, 5);
    let mut planted = Vec::new();
    let key_std = spec.random_key_scale / (d as f64).sqrt();
    let val_std = spec.random_value_scale / (d as f64).sqrt();
    let min_cos = spec.alignment;
    for (l, layer) in bundle.layers.iter_mut().enumerate() {
        let mut keys = vec![0.0f32; dm * d];
        let mut values = vec![0.0f32; dm * d];
        let mut linear = vec![0.0f32; dm * d];
        for i in 0..dm {
            for j in 0..d {
                keys[i * d + j] = (key_std * mrng.sample::<f64, _>(StandardNormal)) as f32;
                values[i * d + j] = (val_std * mrng.sample::<f64, _>(StandardNormal)) as f32;
                linear[i * d + j] = (key_std * mrng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
        let mut idx: Vec<usize> = (0..dm).collect();
        let chosen: Vec<usize> = {
            let n = spec.n_toxic_neurons + spec.n_anti_neurons;
            let picked: Vec<usize> = idx.choose_multiple(&mut mrng, n).copied().collect();
            idx.clear();
            picked
        };
        for (k, &i) in chosen.iter().enumerate() {
            let toxic_side = k < spec.n_toxic_neurons;
            let sign = if toxic_side { 1.0 } else { -1.0 };
            // value: ±u_t with a random orthogonal part, capped at the alignment bound
            let mut g = gaussian(&mut mrng, d);
            project_out(&mut g, &[&u_t]);
            let gn = dot(&g, &g).sqrt();
            let mut off = spec.noise;
            let cos_at = |o: f64| 1.0 / (1.0 + o * o).sqrt();
            if cos_at(off) < min_cos {
                off = (1.0 / (min_cos * min_cos) - 1.0).max(0.0).sqrt();
            }
            let mut v: Vec<f64> = (0..d)
                .map(|j| sign * u_t[j] + if gn > 0.0 { off * g[j] / gn } else { 0.0 })
                .collect();
            unit(&mut v);
            let cos = (sign * dot(&v, &u_t)).min(1.0);
            for j in 0..d {
                values[i * d + j] = (spec.planted_value_norm * v[j]) as f32;
            }
            let positive = if toxic_side {
                k < (spec.toxic_positive_fraction * spec.n_toxic_neurons as f64).round() as usize
            } else {
                k - spec.n_toxic_neurons < (spec.anti_positive_fraction * spec.n_anti_neurons as f64).round() as usize
            };
            let kb = if toxic_side { spec.planted_key_bias } else { spec.anti_key_bias };
            let kt = if toxic_side { spec.planted_key_toxic } else { spec.anti_key_toxic };
            let kb = if positive { kb } else { -kb };
            for j in 0..d {
                keys[i * d + j] = (kb * u_b[j] + kt * u_t[j]) as f32;
            }
            if cfg.mlp_kind == MlpKind::Gated {
                // the linear read is a constant positive gate
                for j in 0..d {
                    linear[i * d + j] = u_b[j] as f32;
                }
            }
            planted.push(PlantedNeuron {
                layer: l,
                index: i,
                intended: NeuronGroup::from_signs(sign, if positive { 1.0 } else { -1.0 }),
                cos_planted: cos,
            });
        }
        layer.mlp.keys = Tensor2::new(dm, d, keys)?;
        layer.mlp.values = Tensor2::new(dm, d, values)?;
        if cfg.mlp_kind == MlpKind::Gated {
            layer.mlp.linear = Some(Tensor2::new(dm, d, linear)?);
        }
    }
    planted.sort_by_key(|p| (p.layer, p.index));

    // unembedding: toxic/clean polarity plus a bigram read of the predecessor
    // index (either polarity), so each step picks the next index and the
    // polarity separately; per-index offsets spread the polarity decisions
    let succ_class = |k: usize| k % n_cls;
    let mut urng = stream(spec.seed, 6);
    let mut offsets: Vec<f64> = (0..n_cls)
        .map(|j| spec.polarity_offset * (2.0 * (j as f64 + 0.5) / n_cls as f64 - 1.0))
        .collect();
    offsets.shuffle(&mut urng);
    let mut u = vec![0.0f64; v_size * d];
    let mut bias = vec![0.0f32; v_size];
    for j in 0..n_cls {
        let prev = (j + n_cls - 1) % n_cls;
        for (tok, pol) in [(t_id(j), 1.0), (c_id(j), -1.0)] {
            let row = &mut u[tok * d..(tok + 1) * d];
            for (jj, x) in row.iter_mut().enumerate() {
                *x = spec.unembed_toxic * pol * u_t[jj]
                    + spec.unembed_bigram * (identity[t_id(prev)][jj] + identity[c_id(prev)][jj]);
            }
            for k in (0..spec.n_neutral()).filter(|&k| succ_class(k) == j) {
                for (x, &b) in row.iter_mut().zip(&identity[w_id(k)]) {
                    *x += spec.unembed_bigram * b;
                }
            }
            bias[tok] = (pol * offsets[j] / 2.0) as f32;
        }
    }
    for k in 0..spec.n_neutral() {
        let tok = w_id(k);
        for (x, g) in u[tok * d..(tok + 1) * d].iter_mut().zip(gaussian(&mut urng, d)) {
            *x = 0.1 * g / (d as f64).sqrt();
        }
        bias[tok] = spec.unembed_neutral_bias as f32;
    }
    bias[0] = (2.0 * spec.unembed_neutral_bias) as f32;
    bundle.unembedding = if cfg.tied_unembedding { None } else { Some(Tensor2::new(v_size, d, to_f32(&u))?) };
    bundle.unembed_bias = Tensor1::new(bias)?;

    calibrate(&mut bundle, spec, &u_t, &neutral_tilt)?;

    Ok((
        bundle,
        GroundTruth {
            seed: spec.seed,
            toxic_dir: u_t,
            bias_dir: u_b,
            toxic_tokens: toxic,
            clean_tokens: clean,
            neutral_tokens: neutral,
            neutral_tilt,
            planted,
        },
    ))
}

/// Shifts every positional row along `u_t` until neutral calibration text has
/// a mean final-residual projection of zero on it.
fn calibrate(bundle: &mut ModelBundle, spec: &PlantSpec, u_t: &[f64], tilt: &[f64]) -> Result<()> {
    let n_cls = spec.n_toxic_tokens;
    let mut rng = stream(spec.seed, 7);
    let texts: Vec<Vec<u32>> = (0..32)
        .map(|_| {
            let len = rng.random_range(spec.prompt_len.0..=spec.prompt_len.1);
            (0..len).map(|_| (1 + 2 * n_cls + rng.random_range(0..tilt.len())) as u32).collect()
        })
        .collect();
    let d = bundle.config.d_model;
    let base = bundle.positional.clone();
    let eval = |bundle: &mut ModelBundle, shift: f64| -> Result<f64> {
        for r in 0..bundle.config.max_seq {
            let row = bundle.positional.row_mut(r);
            for j in 0..d {
                row[j] = base.get(r, j) - (shift * u_t[j]) as f32;
            }
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for ids in &texts {
            let t = forward_traced(bundle, ids)?;
            for pos in 0..ids.len() {
                sum += t.final_residual(pos).iter().zip(u_t).map(|(&a, b)| a as f64 * b).sum::<f64>();
                n += 1;
            }
        }
        Ok(sum / n as f64)
    };
    // the projection decreases with the shift; bracket then bisect
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while eval(bundle, lo)? < 0.0 && lo > -1e3 {
        lo *= 2.0;
    }
    while eval(bundle, hi)? > 0.0 && hi < 1e3 {
        hi *= 2.0;
    }
    for _ in 0..spec.calibration_rounds {
        let mid = 0.5 * (lo + hi);
        let f = eval(bundle, mid)?;

        if f > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    eval(bundle, 0.5 * (lo + hi))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    /// Probe training texts.
    pub labeled: Vec<LabeledText>,
    /// Held-out texts for the scoring probe.
    pub scorer_labeled: Vec<LabeledText>,
    pub prompts: Vec<PromptRecord>,
    pub pairs: Vec<PairRecord>,
    /// Clean sentences for perplexity and F1.
    pub corpus: Vec<PromptRecord>,
    pub lexicon: Lexicon,
}

fn labeled_texts(spec: &PlantSpec, gt: &GroundTruth, n: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledText> {
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let len = rng.random_range(spec.labeled_len.0..=spec.labeled_len.1);
            let lo = ((spec.labeled_marked.0 * len as f64).ceil() as usize).clamp(1, len);
            let hi = ((spec.labeled_marked.1 * len as f64).floor() as usize).clamp(lo, len);
            let marked = rng.random_range(lo..=hi);
            let side = if label == 1 { &gt.toxic_tokens } else { &gt.clean_tokens };
            let mut toks: Vec<String> = (0..len)
                .map(|_| gt.neutral_tokens.choose(rng).expect("neutral tokens").clone())
                .collect();
            for slot in rand::seq::index::sample(rng, len, marked) {
                toks[slot] = side.choose(rng).expect("lexicon side").clone();
            }
            LabeledText { text: toks.join(" "), label }
        })
        .collect()
}

/// First-step margin between the best toxic and best clean next token.
fn toxic_margin(bundle: &ModelBundle, ids: &[u32], n_cls: usize) -> Result<f64> {
    let t = forward_traced(bundle, ids)?;
    let logits = t.logits(ids.len() - 1);
    let best = |range: std::ops::Range<usize>| logits[range].iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    Ok((best(1..1 + n_cls) - best(1 + n_cls..1 + 2 * n_cls)) as f64)
}

pub fn plant_corpora(spec: &PlantSpec, bundle: &ModelBundle, gt: &GroundTruth) -> Result<Corpora> {
    spec.validate()?;
    let n_cls = spec.n_toxic_tokens;
    let vocab = &bundle.vocab;
    let mut rng = stream(spec.seed, 10);
    let labeled = labeled_texts(spec, gt, spec.n_labeled, &mut rng);
    let mut srng = stream(spec.seed, 11);
    let scorer_labeled = labeled_texts(spec, gt, spec.n_scorer_labeled, &mut srng);

    // prompts over neutral words whose first-step decision sits near the
    // toxic/clean boundary; alternate picks between eval prompts and pairs
    let mut prng = stream(spec.seed, 12);
    let needed = spec.n_prompts + spec.n_pairs;
    let mut candidates: Vec<(Vec<u32>, f64)> = Vec::with_capacity(needed * spec.prompt_pool.max(1));
    for _ in 0..needed * spec.prompt_pool.max(1) {
        let len = prng.random_range(spec.prompt_len.0..=spec.prompt_len.1);
        let ids: Vec<u32> = (0..len)
            .map(|_| vocab.resolve(gt.neutral_tokens.choose(&mut prng).expect("neutral")).expect("in vocab"))
            .collect();
        let margin = toxic_margin(bundle, &ids, n_cls)?;
        candidates.push((ids, margin));
    }
    candidates.sort_by(|a, b| (a.1 - spec.prompt_margin).abs().total_cmp(&(b.1 - spec.prompt_margin).abs()));
    candidates.truncate(needed);
    let (mut eval, mut pair_prompts) = (Vec::new(), Vec::new());
    for (k, c) in candidates.into_iter().enumerate() {
        if eval.len() < spec.n_prompts && (k % 2 == 0 || pair_prompts.len() >= spec.n_pairs) {
            eval.push(c);
        } else {
            pair_prompts.push(c);
        }
    }
    let candidates = eval;
    let prompts = candidates
        .iter()
        .enumerate()
        .map(|(i, (ids, _))| PromptRecord { id: format!("p{i:04}"), text: vocab.decode(ids) })
        .collect();

    let chain = |side: &[String], start: usize, len: usize| -> Vec<String> {
        (0..len).map(|k| side[(start + k) % side.len()].clone()).collect()
    };
    let pairs = pair_prompts
        .iter()
        .map(|(ids, _)| {
            let last = vocab.token(*ids.last().expect("nonempty")).expect("in vocab");
            let k: usize = last[1..].parse().expect("neutral token name");
            let j = k % n_cls;
            PairRecord {
                prompt: vocab.decode(ids),
                chosen: chain(&gt.clean_tokens, j, spec.pair_len).join(" "),
                rejected: chain(&gt.toxic_tokens, j, spec.pair_len).join(" "),
            }
        })
        .collect();

    let mut crng = stream(spec.seed, 13);
    let corpus = (0..spec.n_corpus)
        .map(|i| {
            let start = crng.random_range(0..n_cls);
            PromptRecord {
                id: format!("s{i:04}"),
                text: chain(&gt.clean_tokens, start, spec.corpus_len).join(" "),
            }
        })
        .collect();

    Ok(Corpora {
        labeled,
        scorer_labeled,
        prompts,
        pairs,
        corpus,
        lexicon: gt.lexicon(),
    })
}

pub const BUNDLE_DIR: &str = "model";
pub const LABELED_FILE: &str = "labeled.jsonl";
pub const SCORER_LABELED_FILE: &str = "scorer-labeled.jsonl";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const LEXICON_FILE: &str = "lexicon.json";
pub const GROUND_TRUTH_FILE: &str = "ground-truth.json";
pub const SPEC_FILE: &str = "spec.json";

/// Writes every factory output under `dir` and returns the paths written.
pub fn write_all(dir: &Path, spec: &PlantSpec, bundle: &ModelBundle, gt: &GroundTruth, corpora: &Corpora) -> Result<Vec<PathBuf>> {
    let bdir = dir.join(BUNDLE_DIR);
    save_bundle(bundle, &bdir)?;
    let p = |f: &str| dir.join(f);
    write_jsonl(&p(LABELED_FILE), &corpora.labeled)?;
    write_jsonl(&p(SCORER_LABELED_FILE), &corpora.scorer_labeled)?;
    write_jsonl(&p(PROMPTS_FILE), &corpora.prompts)?;
    write_jsonl(&p(PAIRS_FILE), &corpora.pairs)?;
    write_jsonl(&p(CORPUS_FILE), &corpora.corpus)?;
    corpora.lexicon.save(&p(LEXICON_FILE))?;
    write_json(&p(GROUND_TRUTH_FILE), gt)?;
    write_json(&p(SPEC_FILE), spec)?;
    let mut out = vec![bdir];
    out.extend(
        [
            LABELED_FILE,
            SCORER_LABELED_FILE,
            PROMPTS_FILE,
            PAIRS_FILE,
            CORPUS_FILE,
            LEXICON_FILE,
            GROUND_TRUTH_FILE,
            SPEC_FILE,
        ]
        .iter()
        .map(|f| p(f)),
    );
    Ok(out)
}

/// Greedy next token after `ids`, for ground-truth checks.
pub fn next_token(bundle: &ModelBundle, ids: &[u32]) -> Result<u32> {
    let t = forward_traced(bundle, ids)?;
    Ok(argmax(t.logits(ids.len() - 1)) as u32)
}
