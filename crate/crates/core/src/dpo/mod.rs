//! Direct preference optimization on the toy model: pairwise data, the
//! DPO objective with an extra logit-matching penalty, and a seeded SGD loop.

mod net;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::PairRecord;
use crate::model::{forward_traced, ModelBundle, Vocab};
use crate::numerics::{log_softmax, neg_log_sigmoid, sigmoid};

use net::{continuation_logprob, unflatten, Net};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

impl PreferenceTriplet {
    pub fn from_record(vocab: &Vocab, rec: &PairRecord) -> Result<Self> {
        let t = Self {
            prompt: vocab.encode(&rec.prompt)?,
            chosen: vocab.encode(&rec.chosen)?,
            rejected: vocab.encode(&rec.rejected)?,
        };
        if t.prompt.is_empty() || t.chosen.is_empty() || t.rejected.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(t)
    }

    fn check(&self, bundle: &ModelBundle) -> Result<()> {
        if self.prompt.is_empty() || self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::EmptyText);
        }
        bundle.check_tokens(&concat(&self.prompt, &self.chosen))?;
        bundle.check_tokens(&concat(&self.prompt, &self.rejected))
    }
}

fn concat(a: &[u32], b: &[u32]) -> Vec<u32> {
    a.iter().chain(b).copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    /// DPO temperature `β`.
    pub beta: f64,
    /// Weight `λ` of the mean squared policy/reference logit gap on chosen
    /// continuations.
    pub kl_weight: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    /// Linear learning-rate warmup over this many steps.
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            kl_weight: 0.05,
            lr: 7e-6,
            epochs: 1,
            batch_size: 8,
            grad_clip_norm: 10.0,
            warmup_steps: 0,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0
            && self.beta.is_finite()
            && self.kl_weight >= 0.0
            && self.kl_weight.is_finite()
            && self.lr > 0.0
            && self.lr.is_finite()
            && self.batch_size >= 1
            && self.grad_clip_norm > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid DPO config {self:?}")));
        }
        Ok(())
    }
}

/// `log π(y | x)` under the inference forward pass.
pub fn sequence_logprob(bundle: &ModelBundle, prompt: &[u32], continuation: &[u32]) -> Result<f64> {
    if prompt.is_empty() || continuation.is_empty() {
        return Err(Error::EmptyText);
    }
    let ids = concat(prompt, continuation);
    let trace = forward_traced(bundle, &ids)?;
    Ok((prompt.len()..ids.len())
        .map(|pos| {
            let logits: Vec<f64> = trace.logits(pos - 1).iter().map(|&v| v as f64).collect();
            log_softmax(&logits)[ids[pos] as usize]
        })
        .sum())
}

/// `−log σ(β·(r₊ − r₋))` with `r = log π_θ − log π_ref`.
pub fn dpo_loss(policy: &ModelBundle, reference: &ModelBundle, triplet: &PreferenceTriplet, beta: f64) -> Result<f64> {
    policy.check_same_config(reference)?;
    triplet.check(policy)?;
    let r_plus = sequence_logprob(policy, &triplet.prompt, &triplet.chosen)?
        - sequence_logprob(reference, &triplet.prompt, &triplet.chosen)?;
    let r_minus = sequence_logprob(policy, &triplet.prompt, &triplet.rejected)?
        - sequence_logprob(reference, &triplet.prompt, &triplet.rejected)?;
    Ok(dpo_loss_from_margin(beta * (r_plus - r_minus)))
}

/// `−log σ(z)`.
pub fn dpo_loss_from_margin(z: f64) -> f64 {
    neg_log_sigmoid(z)
}

/// Reference-side quantities, computed once.
struct RefStats {
    lp_chosen: f64,
    lp_rejected: f64,
    chosen_logits: Vec<Vec<f64>>,
}

fn reference_stats(reference: &Net, t: &PreferenceTriplet) -> RefStats {
    let pl = t.prompt.len();
    let c = reference.forward(&concat(&t.prompt, &t.chosen));
    let r = reference.forward(&concat(&t.prompt, &t.rejected));
    RefStats {
        lp_chosen: continuation_logprob(&c, pl, None),
        lp_rejected: continuation_logprob(&r, pl, None),
        chosen_logits: c.logits[pl - 1..c.logits.len() - 1].to_vec(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub dpo: f64,
    pub kl: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.dpo + self.kl
    }
}

/// Loss of one triplet; when `grad` is given, adds `weight · ∂loss/∂θ`.
fn triplet_loss(
    policy: &Net,
    t: &PreferenceTriplet,
    rs: &RefStats,
    cfg: &DpoConfig,
    grad: Option<(&mut [f64], f64)>,
) -> LossParts {
    let pl = t.prompt.len();
    let c = policy.forward(&concat(&t.prompt, &t.chosen));
    let r = policy.forward(&concat(&t.prompt, &t.rejected));
    let lp_c = continuation_logprob(&c, pl, None);
    let lp_r = continuation_logprob(&r, pl, None);
    let z = cfg.beta * ((lp_c - rs.lp_chosen) - (lp_r - rs.lp_rejected));
    let dpo = dpo_loss_from_margin(z);

    let n_pos = t.chosen.len();
    let v = policy.config.vocab_size;
    let scale = 1.0 / (n_pos * v) as f64;
    let mut kl = 0.0;
    for (j, ref_row) in rs.chosen_logits.iter().enumerate() {
        for (a, b) in c.logits[pl - 1 + j].iter().zip(ref_row) {
            kl += (a - b) * (a - b);
        }
    }
    kl *= cfg.kl_weight * scale;

    if let Some((g, weight)) = grad {
        // d(−log σ(z))/dz = −σ(−z)
        let dz = -sigmoid(-z) * weight;
        let mut dc = vec![vec![0.0; v]; c.logits.len()];
        let mut dr = vec![vec![0.0; v]; r.logits.len()];
        continuation_logprob(&c, pl, Some((&mut dc, dz * cfg.beta)));
        continuation_logprob(&r, pl, Some((&mut dr, -dz * cfg.beta)));
        if cfg.kl_weight > 0.0 {
            let k = 2.0 * cfg.kl_weight * scale * weight;
            for (j, ref_row) in rs.chosen_logits.iter().enumerate() {
                for ((d, a), b) in dc[pl - 1 + j].iter_mut().zip(&c.logits[pl - 1 + j]).zip(ref_row) {
                    *d += k * (a - b);
                }
            }
        }
        policy.backward(&c, &dc, g);
        policy.backward(&r, &dr, g);
    }
    LossParts { dpo, kl }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub mean_dpo_loss: f64,
    pub mean_kl_penalty: f64,
    pub mean_total: f64,
    /// Fraction of triplets whose implicit reward prefers the chosen side.
    pub preference_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct DpoRun {
    pub post: ModelBundle,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
}

fn evaluate(policy: &Net, triplets: &[PreferenceTriplet], refs: &[RefStats], cfg: &DpoConfig, epoch: usize) -> EpochRecord {
    let mut dpo = 0.0;
    let mut kl = 0.0;
    let mut correct = 0usize;
    for (t, rs) in triplets.iter().zip(refs) {
        let parts = triplet_loss(policy, t, rs, cfg, None);
        dpo += parts.dpo;
        kl += parts.kl;
        if parts.dpo < std::f64::consts::LN_2 {
            correct += 1;
        }
    }
    let n = triplets.len() as f64;
    EpochRecord {
        epoch,
        mean_dpo_loss: dpo / n,
        mean_kl_penalty: kl / n,
        mean_total: (dpo + kl) / n,
        preference_accuracy: correct as f64 / n,
    }
}

/// Trains a copy of `pre` against a frozen reference copy of `pre`.
pub fn train_dpo(pre: &ModelBundle, triplets: &[PreferenceTriplet], cfg: &DpoConfig) -> Result<DpoRun> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("no preference triplets".into()));
    }
    for t in triplets {
        t.check(pre)?;
    }
    let reference = Net::from_bundle(pre);
    let refs: Vec<RefStats> = triplets.iter().map(|t| reference_stats(&reference, t)).collect();
    let mut policy = reference.clone();
    let mut history = vec![evaluate(&policy, triplets, &refs, cfg, 0)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; policy.layout.len];
            let w = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in batch {
                loss += w * triplet_loss(&policy, &triplets[i], &refs[i], cfg, Some((&mut grad, w))).total();
            }
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !loss.is_finite() || !gnorm.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "epoch {epoch}, step {step}: loss {loss}, gradient norm {gnorm}"
                )));
            }
            let clip = if gnorm > cfg.grad_clip_norm { cfg.grad_clip_norm / gnorm } else { 1.0 };
            let warm = if cfg.warmup_steps > 0 {
                ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            let lr = cfg.lr * warm * clip;
            for (p, g) in policy.theta.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            step += 1;
        }
        let rec = evaluate(&policy, triplets, &refs, cfg, epoch);
        if !rec.mean_total.is_finite() {
            return Err(Error::NonFiniteLoss(format!("epoch {epoch}: mean loss {}", rec.mean_total)));
        }
        history.push(rec);
    }
    let mut post = pre.clone();
    unflatten(&policy.theta, &mut post)?;
    Ok(DpoRun { post, history, steps: step })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compares the analytic gradient of the per-triplet objective against
/// central differences, in binary64, on every MLP weight of layer 0 sampled
/// at a fixed pattern plus every `stride`-th parameter overall. Parameters
/// whose analytic and numeric gradients both vanish are skipped.
pub fn gradient_check(
    policy: &ModelBundle,
    reference: &ModelBundle,
    triplet: &PreferenceTriplet,
    cfg: &DpoConfig,
    stride: usize,
) -> Result<GradCheck> {
    cfg.validate()?;
    policy.check_same_config(reference)?;
    triplet.check(policy)?;
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let reference = Net::from_bundle(reference);
    let policy = Net::from_bundle(policy);
    let rs = reference_stats(&reference, triplet);
    let mut grad = vec![0.0; policy.layout.len];
    triplet_loss(&policy, triplet, &rs, cfg, Some((&mut grad, 1.0)));

    let d = policy.config.d_model;
    let dm = policy.config.d_mlp;
    let (keys, linear, values) = policy.layout.mlp_offsets(0);
    let mut idx: Vec<usize> = (0..dm)
        .flat_map(|i| [keys + i * d + i % d, values + i * d + (i + 1) % d])
        .collect();
    if let Some(l) = linear {
        idx.extend((0..dm).map(|i| l + i * d + (i + 2) % d));
    }
    idx.extend((0..policy.layout.len).step_by(stride));
    idx.sort_unstable();
    idx.dedup();

    let h = 1e-5;
    let objective = |net: &Net| triplet_loss(net, triplet, &rs, cfg, None).total();
    let mut probe = policy.clone();
    let mut report = GradCheck { checked: 0, max_rel_error: 0.0 };
    for i in idx {
        let orig = probe.theta[i];
        probe.theta[i] = orig + h;
        let up = objective(&probe);
        probe.theta[i] = orig - h;
        let down = objective(&probe);
        probe.theta[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let g = grad[i];
        if fd.abs() < 1e-7 && g.abs() < 1e-7 {
            continue;
        }
        let rel = (fd - g).abs() / (fd.abs().max(g.abs()) + 1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

/// `run-manifest.json` contents for a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoManifest {
    pub config: DpoConfig,
    pub seed: u64,
    pub n_triplets: usize,
    pub steps: usize,
    pub history: Vec<EpochRecord>,
    pub output_bundle: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::*;
    use crate::model::{MlpKind, ModelConfig};
    use crate::numerics::{cosine, ActivationKind, Tensor2};
    use rand::Rng;

    fn tiny(kind: MlpKind, act: ActivationKind, tied: bool, seed: u64) -> ModelBundle {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            d_mlp: 6,
            n_heads: 2,
            vocab_size: 8,
            max_seq: 8,
            mlp_kind: kind,
            activation: act,
            tied_unembedding: tied,
            final_norm: true,
        };
        let mut b = random_bundle(cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for v in b.unembed_bias.as_mut_slice() {
            *v = rng.random_range(-0.2..0.2);
        }
        b
    }

    fn triplet() -> PreferenceTriplet {
        PreferenceTriplet { prompt: vec![1, 2], chosen: vec![3, 4], rejected: vec![5, 6, 7] }
    }

    #[test]
    fn logprob_uniform_examples() {
        let mut cfg = config(MlpKind::Plain, ActivationKind::Silu);
        cfg.vocab_size = 2;
        let b = ModelBundle::zeros(cfg.clone(), vocab(2)).unwrap();
        assert!((sequence_logprob(&b, &[0], &[1]).unwrap() - 0.5f64.ln()).abs() < 1e-12);
        cfg.vocab_size = 4;
        let b = ModelBundle::zeros(cfg, vocab(4)).unwrap();
        assert!((sequence_logprob(&b, &[0], &[1, 3]).unwrap() - 2.0 * 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logprob_matches_chain_rule_enumeration() {
        let b = tiny(MlpKind::Gated, ActivationKind::GeluTanh, false, 4);
        let prompt = [2u32, 5];
        // the probabilities of all length-3 continuations sum to one
        let mut total = 0.0;
        for a in 0..8u32 {
            for c in 0..8u32 {
                for e in 0..8u32 {
                    total += sequence_logprob(&b, &prompt, &[a, c, e]).unwrap().exp();
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-5, "{total}");
        // and each equals the product of next-token softmax probabilities
        let y = [3u32, 0, 6];
        let mut lp = 0.0;
        for j in 0..3 {
            let ctx: Vec<u32> = prompt.iter().chain(&y[..j]).copied().collect();
            let t = forward_traced(&b, &ctx).unwrap();
            let logits: Vec<f64> = t.logits(ctx.len() - 1).iter().map(|&v| v as f64).collect();
            lp += crate::numerics::softmax(&logits)[y[j] as usize].ln();
        }
        assert!((lp - sequence_logprob(&b, &prompt, &y).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn loss_examples() {
        let b = tiny(MlpKind::Plain, ActivationKind::Silu, false, 2);
        assert_eq!(dpo_loss(&b, &b, &triplet(), 0.1).unwrap(), std::f64::consts::LN_2);
        assert!((dpo_loss_from_margin(0.1 * 10.0) - 0.313262).abs() < 1e-6);
        let mut prev = f64::INFINITY;
        for z in [0.0, 1.0, 5.0, 20.0, 100.0] {
            let l = dpo_loss_from_margin(z);
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-40);
        let mut other = b.clone();
        other.config.max_seq = 9;
        other.positional = Tensor2::zeros(9, 8);
        assert!(matches!(dpo_loss(&other, &b, &triplet(), 0.1), Err(Error::ConfigMismatch)));
    }

    #[test]
    fn net_matches_inference_forward() {
        for (i, (kind, act, tied)) in [
            (MlpKind::Plain, ActivationKind::GeluExact, false),
            (MlpKind::Gated, ActivationKind::Silu, true),
            (MlpKind::Plain, ActivationKind::Sigmoid, true),
        ]
        .into_iter()
        .enumerate()
        {
            let b = random_bundle(
                ModelConfig { tied_unembedding: tied, ..config(kind, act) },
                60 + i as u64,
            );
            let ids = [1u32, 4, 4, 9, 2];
            let t = forward_traced(&b, &ids).unwrap();
            let c = Net::from_bundle(&b).forward(&ids);
            for p in 0..ids.len() {
                for (a, e) in t.logits(p).iter().zip(&c.logits[p]) {
                    assert!((*a as f64 - e).abs() < 1e-4, "{a} vs {e}");
                }
            }
        }
    }

    fn grad_check(kind: MlpKind, act: ActivationKind, tied: bool, final_norm: bool) {
        let mut pre = tiny(kind, act, tied, 7);
        pre.config.final_norm = final_norm;
        let mut policy = pre.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (_, _, data) in policy.named_tensors_mut() {
            for p in data.iter_mut() {
                *p += rng.random_range(-0.05f32..0.05);
            }
        }
        let cfg = DpoConfig { beta: 0.7, kl_weight: 0.3, ..DpoConfig::default() };
        let report = gradient_check(&policy, &pre, &triplet(), &cfg, 7).unwrap();
        assert!(report.checked > 20, "{report:?}");
        assert!(report.max_rel_error <= 1e-3, "{report:?}");
    }

    #[test]
    fn gradient_check_plain() {
        grad_check(MlpKind::Plain, ActivationKind::GeluExact, false, true);
    }

    #[test]
    fn gradient_check_gated_tied() {
        grad_check(MlpKind::Gated, ActivationKind::Silu, true, true);
    }

    #[test]
    fn gradient_check_no_final_norm() {
        grad_check(MlpKind::Plain, ActivationKind::GeluTanh, false, false);
    }

    fn planted_triplets() -> Vec<PreferenceTriplet> {
        (0..12)
            .map(|i| PreferenceTriplet {
                prompt: vec![1 + (i % 3) as u32, 2],
                chosen: vec![3, 4],
                rejected: vec![6, 7],
            })
            .collect()
    }

    #[test]
    fn zero_epochs_is_identity_and_init_is_ln2() {
        let pre = tiny(MlpKind::Plain, ActivationKind::Silu, false, 3);
        let cfg = DpoConfig { epochs: 0, ..DpoConfig::default() };
        let run = train_dpo(&pre, &planted_triplets(), &cfg).unwrap();
        assert_eq!(run.post, pre);
        assert_eq!(run.history[0].mean_dpo_loss, std::f64::consts::LN_2);
        let reference = Net::from_bundle(&pre);
        for t in planted_triplets() {
            let rs = reference_stats(&reference, &t);
            assert_eq!(triplet_loss(&reference, &t, &rs, &cfg, None).dpo, std::f64::consts::LN_2);
        }
    }

    #[test]
    fn training_reduces_loss_and_keeps_reference() {
        let pre = tiny(MlpKind::Gated, ActivationKind::GeluExact, false, 5);
        let snapshot = pre.clone();
        let before = forward_traced(&pre, &[1, 2, 3]).unwrap();
        let cfg = DpoConfig { epochs: 6, lr: 0.1, beta: 0.5, ..DpoConfig::default() };
        let run = train_dpo(&pre, &planted_triplets(), &cfg).unwrap();
        assert_eq!(pre, snapshot);
        assert_eq!(forward_traced(&pre, &[1, 2, 3]).unwrap(), before);
        let last = run.history.last().unwrap();
        assert!(last.mean_dpo_loss < std::f64::consts::LN_2);
        for i in 0..6 {
            let c = cosine(pre.value_vector(0, i), run.post.value_vector(0, i)).unwrap();
            assert!(c >= 0.95, "neuron {i}: {c}");
        }
        // deterministic given the seed
        let again = train_dpo(&pre, &planted_triplets(), &cfg).unwrap();
        assert_eq!(again.post, run.post);
    }

    #[test]
    fn larger_kl_weight_keeps_logits_closer() {
        let pre = tiny(MlpKind::Plain, ActivationKind::GeluTanh, false, 8);
        let drift = |lambda: f64| {
            let cfg = DpoConfig { epochs: 4, lr: 0.1, beta: 0.5, kl_weight: lambda, ..DpoConfig::default() };
            let run = train_dpo(&pre, &planted_triplets(), &cfg).unwrap();
            run.history.last().unwrap().mean_kl_penalty / lambda
        };
        assert!(drift(20.0) < drift(0.01));
    }

    #[test]
    fn unembed_bias_shift_leaves_loss_unchanged() {
        let pre = tiny(MlpKind::Plain, ActivationKind::Silu, false, 11);
        let mut policy = pre.clone();
        for v in policy.layers[0].mlp.values.data_mut() {
            *v *= 1.1;
        }
        let t = triplet();
        let base = dpo_loss(&policy, &pre, &t, 0.3).unwrap();
        let shift = |b: &ModelBundle| {
            let mut b = b.clone();
            for v in b.unembed_bias.as_mut_slice() {
                *v += 0.75;
            }
            b
        };
        let shifted = dpo_loss(&shift(&policy), &shift(&pre), &t, 0.3).unwrap();
        assert!((base - shifted).abs() < 1e-6, "{base} vs {shifted}");
    }
}
