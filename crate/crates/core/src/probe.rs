//! Linear toxicity probes on the final-layer residual stream, contrastive
//! embedding directions, steering, and the logit lens.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{read_json, write_json, LabeledText};
use crate::model::{forward_hooked, ForwardHook, ModelBundle, NoHook};
use crate::numerics::{dot, neg_log_sigmoid, norm, sigmoid, top_k_indices};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetadata {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// `None` when the split left no held-out rows.
    pub test_accuracy: Option<f64>,
    #[serde(default)]
    pub provenance: String,
}

/// `P(toxic | x̄) = σ(direction · x̄ + bias)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub direction: Vec<f64>,
    pub bias: f64,
    pub metadata: ProbeMetadata,
}

impl Probe {
    pub fn logit<A: Copy + Into<f64>>(&self, x: &[A]) -> f64 {
        dot(x, &self.direction) + self.bias
    }

    pub fn probability<A: Copy + Into<f64>>(&self, x: &[A]) -> f64 {
        sigmoid(self.logit(x))
    }

    pub fn validate(&self) -> Result<()> {
        if self.direction.iter().any(|v| !v.is_finite()) || !self.bias.is_finite() {
            return Err(Error::NonFinite("probe".into()));
        }
        if norm(&self.direction) == 0.0 {
            return Err(Error::ZeroProbe);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Probe = read_json(path)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledActivationSet {
    pub rows: Vec<(Vec<f64>, u8)>,
    pub provenance: String,
}

impl LabeledActivationSet {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |(x, _)| x.len())
    }
}

/// Toxic and non-toxic token lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub toxic: Vec<String>,
    pub nontoxic: Vec<String>,
}

impl Lexicon {
    pub fn validate(&self) -> Result<()> {
        let toxic: HashSet<&String> = self.toxic.iter().collect();
        if let Some(t) = self.nontoxic.iter().find(|t| toxic.contains(t)) {
            return Err(Error::InvalidArgument(format!(
                "lexicon token {t:?} is listed as both toxic and nontoxic"
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lex: Lexicon = read_json(path)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn toxic_ids(&self, bundle: &ModelBundle) -> Result<HashSet<u32>> {
        self.toxic.iter().map(|t| bundle.vocab.resolve(t)).collect()
    }

    pub fn is_toxic_id(&self, bundle: &ModelBundle, id: u32) -> bool {
        bundle
            .vocab
            .token(id)
            .is_some_and(|tok| self.toxic.iter().any(|t| t == tok))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.1,
            l2: 1e-4,
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeFit {
    pub probe: Probe,
    /// Regularized training loss before each epoch, plus the final value.
    pub loss_history: Vec<f64>,
}

/// Mean over positions of the final-layer residual stream.
pub fn mean_final_residual(bundle: &ModelBundle, ids: &[u32], hook: &dyn ForwardHook) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(Error::EmptyText);
    }
    let trace = forward_hooked(bundle, ids, hook)?;
    let d = bundle.config.d_model;
    let mut acc = vec![0.0f64; d];
    for p in 0..trace.positions() {
        for (a, &x) in acc.iter_mut().zip(trace.final_residual(p)) {
            *a += x as f64;
        }
    }
    let n = trace.positions() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

pub fn collect_activations(bundle: &ModelBundle, texts: &[LabeledText]) -> Result<LabeledActivationSet> {
    let rows = texts
        .iter()
        .map(|t| {
            let ids = bundle.vocab.encode(&t.text)?;
            if ids.is_empty() {
                return Err(Error::EmptyText);
            }
            if t.label > 1 {
                return Err(Error::InvalidArgument(format!("label {} is not 0/1", t.label)));
            }
            Ok((mean_final_residual(bundle, &ids, &NoHook)?, t.label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledActivationSet {
        rows,
        provenance: format!("{} texts", texts.len()),
    })
}

/// Mean logistic loss plus `l2/2·‖w‖²`, and its gradient.
pub(crate) fn logistic_loss_and_grad(
    w: &[f64],
    b: f64,
    rows: &[&(Vec<f64>, u8)],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (x, y) in rows {
        let z = dot(x, w) + b;
        let y = *y as f64;
        // -[y log σ(z) + (1-y) log σ(-z)]
        loss += y * neg_log_sigmoid(z) + (1.0 - y) * neg_log_sigmoid(-z);
        let r = sigmoid(z) - y;
        for (g, &xi) in gw.iter_mut().zip(x) {
            *g += r * xi;
        }
        gb += r;
    }
    loss /= n;
    gb /= n;
    for (g, &wi) in gw.iter_mut().zip(w) {
        *g = *g / n + l2 * wi;
    }
    loss += 0.5 * l2 * dot(w, w);
    (loss, gw, gb)
}

fn accuracy(w: &[f64], b: f64, rows: &[&(Vec<f64>, u8)]) -> f64 {
    let correct = rows
        .iter()
        .filter(|(x, y)| ((dot(x, w) + b) > 0.0) == (*y == 1))
        .count();
    correct as f64 / rows.len() as f64
}

/// Stratified, seeded split; returns (train, test) row indices.
fn split(set: &LabeledActivationSet, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..set.rows.len()).filter(|&i| set.rows[i].1 == class).collect();
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64) * (1.0 - train_fraction)).round() as usize;
        let n_test = n_test.min(idx.len().saturating_sub(1));
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Logistic regression by full-batch gradient descent.
///
/// A step that would raise the loss is retried at half the step size, so
/// the loss history is non-increasing.
pub fn train_probe(set: &LabeledActivationSet, cfg: &ProbeTrainConfig) -> Result<ProbeFit> {
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0) || !(cfg.lr > 0.0) || cfg.l2 < 0.0 {
        return Err(Error::InvalidArgument("probe training hyperparameters out of range".into()));
    }
    let has = |c: u8| set.rows.iter().any(|(_, y)| *y == c);
    if !has(0) || !has(1) {
        return Err(Error::SingleClass);
    }
    let d = set.dim();
    if d == 0 || set.rows.iter().any(|(x, _)| x.len() != d) {
        return Err(Error::ShapeMismatch("labeled rows have inconsistent widths".into()));
    }
    let (train_idx, test_idx) = split(set, cfg.train_fraction, cfg.seed);
    let train: Vec<&(Vec<f64>, u8)> = train_idx.iter().map(|&i| &set.rows[i]).collect();
    let test: Vec<&(Vec<f64>, u8)> = test_idx.iter().map(|&i| &set.rows[i]).collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut step = cfg.lr;
    let (mut loss, mut gw, mut gb) = logistic_loss_and_grad(&w, b, &train, cfg.l2);
    let mut history = vec![loss];
    for _ in 0..cfg.epochs {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!("probe loss {loss}")));
        }
        let mut accepted = false;
        for _ in 0..60 {
            let w_new: Vec<f64> = w.iter().zip(&gw).map(|(wi, g)| wi - step * g).collect();
            let b_new = b - step * gb;
            let (l_new, gw_new, gb_new) = logistic_loss_and_grad(&w_new, b_new, &train, cfg.l2);
            if l_new.is_finite() && l_new <= loss {
                (w, b, loss, gw, gb) = (w_new, b_new, l_new, gw_new, gb_new);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        history.push(loss);
        if !accepted {
            break;
        }
    }
    if !loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss(format!("probe loss {loss}")));
    }
    if norm(&w) == 0.0 {
        return Err(Error::ZeroProbe);
    }
    let metadata = ProbeMetadata {
        epochs: cfg.epochs,
        lr: cfg.lr,
        l2: cfg.l2,
        seed: cfg.seed,
        train_fraction: cfg.train_fraction,
        n_train: train.len(),
        n_test: test.len(),
        final_loss: loss,
        train_accuracy: accuracy(&w, b, &train),
        test_accuracy: (!test.is_empty()).then(|| accuracy(&w, b, &test)),
        provenance: set.provenance.clone(),
    };
    Ok(ProbeFit {
        probe: Probe {
            direction: w,
            bias: b,
            metadata,
        },
        loss_history: history,
    })
}

/// `x − α·W`.
pub fn steer(residual: &[f32], direction: &[f64], alpha: f64) -> Result<Vec<f32>> {
    if residual.len() != direction.len() {
        return Err(Error::ShapeMismatch(format!(
            "residual of length {} vs direction of length {}",
            residual.len(),
            direction.len()
        )));
    }
    Ok(residual
        .iter()
        .zip(direction)
        .map(|(&x, &w)| (x as f64 - alpha * w) as f32)
        .collect())
}

/// Mean toxic-token embedding minus mean non-toxic-token embedding.
pub fn contrastive_direction(bundle: &ModelBundle, lexicon: &Lexicon) -> Result<Vec<f64>> {
    if lexicon.toxic.is_empty() {
        return Err(Error::EmptyLexiconSide("toxic"));
    }
    if lexicon.nontoxic.is_empty() {
        return Err(Error::EmptyLexiconSide("nontoxic"));
    }
    let mean = |tokens: &[String]| -> Result<Vec<f64>> {
        let mut acc = vec![0.0f64; bundle.config.d_model];
        for t in tokens {
            let id = bundle.vocab.resolve(t)?;
            for (a, &e) in acc.iter_mut().zip(bundle.embedding.row(id as usize)) {
                *a += e as f64;
            }
        }
        Ok(acc.into_iter().map(|a| a / tokens.len() as f64).collect())
    };
    let toxic = mean(&lexicon.toxic)?;
    let nontoxic = mean(&lexicon.nontoxic)?;
    Ok(toxic.iter().zip(&nontoxic).map(|(a, b)| a - b).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensEntry {
    pub id: u32,
    pub token: String,
    pub score: f64,
}

/// Top-`k` tokens of `unembedding · direction`, ties by lowest id.
pub fn logit_lens(bundle: &ModelBundle, direction: &[f64], k: usize) -> Result<Vec<LensEntry>> {
    let u = bundle.unembedding_matrix();
    if direction.len() != u.cols() {
        return Err(Error::ShapeMismatch(format!(
            "direction of length {} vs d_model {}",
            direction.len(),
            u.cols()
        )));
    }
    if k > u.rows() {
        return Err(Error::InvalidArgument(format!("k={k} exceeds vocab size {}", u.rows())));
    }
    let scores: Vec<f64> = (0..u.rows()).map(|t| dot(u.row(t), direction)).collect();
    Ok(top_k_indices(&scores, k)
        .into_iter()
        .map(|i| LensEntry {
            id: i as u32,
            token: bundle.vocab.token(i as u32).unwrap_or("").to_string(),
            score: scores[i],
        })
        .collect())
}
