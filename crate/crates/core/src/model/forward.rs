use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, layer_norm, softmax, ActivationKind};

use super::{MlpKind, MlpWeights, ModelBundle};

/// Intervention points exposed by the forward pass.
///
/// Implementations must be pure functions of their arguments so that
/// forwards stay deterministic.
pub trait ForwardHook {
    /// Called with the activation scores `m_i` of one layer at one position,
    /// before they scale the value vectors.
    fn edit_scores(&self, _layer: usize, _position: usize, _scores: &mut [f32]) {}

    /// Called with the final-layer residual before the final norm.
    fn edit_final_residual(&self, _position: usize, _residual: &mut [f32]) {}
}

pub struct NoHook;

impl ForwardHook for NoHook {}

/// Everything recorded during one forward pass.
///
/// Residuals are kept at layer boundaries (`n_layers + 1` states), before
/// each MLP, and after the final-residual hook.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub tokens: Vec<u32>,
    /// Number of leading positions that came from the prompt.
    pub prompt_len: usize,
    n_layers: usize,
    d_model: usize,
    d_mlp: usize,
    vocab_size: usize,
    boundaries: Vec<f32>,
    pre_mlp: Vec<f32>,
    scores: Vec<f32>,
    final_resid: Vec<f32>,
    logits: Vec<f32>,
}

impl ForwardTrace {
    pub fn positions(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_mlp(&self) -> usize {
        self.d_mlp
    }

    /// Activation scores `m^ℓ` at `position`, as used for the MLP write.
    pub fn scores(&self, position: usize, layer: usize) -> &[f32] {
        let start = (position * self.n_layers + layer) * self.d_mlp;
        &self.scores[start..start + self.d_mlp]
    }

    /// Residual stream entering `layer`; `layer == n_layers` is the output
    /// of the last layer before any final-residual hook.
    pub fn boundary(&self, position: usize, layer: usize) -> &[f32] {
        let start = (position * (self.n_layers + 1) + layer) * self.d_model;
        &self.boundaries[start..start + self.d_model]
    }

    /// Residual stream after attention, before the MLP of `layer`.
    pub fn pre_mlp(&self, position: usize, layer: usize) -> &[f32] {
        let start = (position * self.n_layers + layer) * self.d_model;
        &self.pre_mlp[start..start + self.d_model]
    }

    /// Final-layer residual `x^{L-1}` fed to the final norm.
    pub fn final_residual(&self, position: usize) -> &[f32] {
        &self.final_resid[position * self.d_model..(position + 1) * self.d_model]
    }

    pub fn logits(&self, position: usize) -> &[f32] {
        &self.logits[position * self.vocab_size..(position + 1) * self.vocab_size]
    }

    /// Token ids after the prompt.
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

/// Scores `m_i` for one MLP input (already normalized).
pub(crate) fn mlp_scores(mlp: &MlpWeights, kind: MlpKind, act: ActivationKind, x: &[f32]) -> Vec<f32> {
    let keys = &mlp.keys;
    (0..keys.rows())
        .map(|i| {
            let gate = act.apply(dot(keys.row(i), x));
            match (kind, &mlp.linear) {
                (MlpKind::Gated, Some(lin)) => (gate * dot(lin.row(i), x)) as f32,
                _ => gate as f32,
            }
        })
        .collect()
}

/// `Σ_i m_i v_i` with binary64 accumulation in neuron order.
pub(crate) fn mlp_write(mlp: &MlpWeights, scores: &[f32]) -> Vec<f32> {
    let d = mlp.values.cols();
    let mut acc = vec![0.0f64; d];
    for (i, &m) in scores.iter().enumerate() {
        let m = m as f64;
        for (a, &v) in acc.iter_mut().zip(mlp.values.row(i)) {
            *a += m * v as f64;
        }
    }
    acc.into_iter().map(|a| a as f32).collect()
}

/// The MLP as a sum of activation-weighted value vectors.
///
/// Returns `(output, scores)` with `output = Σ_i scores[i] · v_i`.
pub fn mlp_forward_decomposed(
    mlp: &MlpWeights,
    x: &[f32],
    kind: MlpKind,
    act: ActivationKind,
) -> Result<(Vec<f32>, Vec<f32>)> {
    check_mlp_shapes(mlp, x, kind)?;
    let scores = mlp_scores(mlp, kind, act, x);
    let out = mlp_write(mlp, &scores);
    Ok((out, scores))
}

/// The MLP as two matrix products, `W_Vᵀ σ(W_K x)` (or the gated form).
pub fn mlp_forward_unfactored(
    mlp: &MlpWeights,
    x: &[f32],
    kind: MlpKind,
    act: ActivationKind,
) -> Result<Vec<f32>> {
    check_mlp_shapes(mlp, x, kind)?;
    let pre = mlp.keys.matvec(x)?;
    let hidden: Vec<f32> = match (kind, &mlp.linear) {
        (MlpKind::Gated, Some(lin)) => {
            let up = lin.matvec(x)?;
            pre.iter()
                .zip(&up)
                .map(|(&p, &u)| (act.apply(p as f64) * u as f64) as f32)
                .collect()
        }
        _ => pre.iter().map(|&p| act.apply(p as f64) as f32).collect(),
    };
    mlp.values.transpose().matvec(&hidden)
}

fn check_mlp_shapes(mlp: &MlpWeights, x: &[f32], kind: MlpKind) -> Result<()> {
    let d = mlp.keys.cols();
    if x.len() != d || mlp.values.cols() != d || mlp.values.rows() != mlp.keys.rows() {
        return Err(Error::ShapeMismatch(format!(
            "mlp input of length {} against keys {:?} / values {:?}",
            x.len(),
            mlp.keys.shape(),
            mlp.values.shape()
        )));
    }
    match (kind, &mlp.linear) {
        (MlpKind::Gated, Some(lin)) if lin.shape() == mlp.keys.shape() => Ok(()),
        (MlpKind::Plain, None) => Ok(()),
        _ => Err(Error::ShapeMismatch(
            "gated MLP needs a linear matrix shaped like keys; plain MLP must not have one".into(),
        )),
    }
}

/// Incremental forward state: positions are appended one at a time, each
/// computed from cached keys/values of earlier positions only.
struct Decoder<'a> {
    bundle: &'a ModelBundle,
    hook: &'a dyn ForwardHook,
    /// Per layer, per position attention keys and values.
    attn_keys: Vec<Vec<Vec<f32>>>,
    attn_values: Vec<Vec<Vec<f32>>>,
    trace: ForwardTrace,
}

impl<'a> Decoder<'a> {
    fn new(bundle: &'a ModelBundle, hook: &'a dyn ForwardHook, prompt_len: usize) -> Self {
        let cfg = &bundle.config;
        Self {
            bundle,
            hook,
            attn_keys: vec![Vec::new(); cfg.n_layers],
            attn_values: vec![Vec::new(); cfg.n_layers],
            trace: ForwardTrace {
                tokens: Vec::new(),
                prompt_len,
                n_layers: cfg.n_layers,
                d_model: cfg.d_model,
                d_mlp: cfg.d_mlp,
                vocab_size: cfg.vocab_size,
                boundaries: Vec::new(),
                pre_mlp: Vec::new(),
                scores: Vec::new(),
                final_resid: Vec::new(),
                logits: Vec::new(),
            },
        }
    }

    fn push(&mut self, token: u32) {
        let b = self.bundle;
        let cfg = &b.config;
        let pos = self.trace.tokens.len();
        let (d, n_heads, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x: Vec<f32> = b
            .embedding
            .row(token as usize)
            .iter()
            .zip(b.positional.row(pos))
            .map(|(&e, &p)| e + p)
            .collect();

        for (l, layer) in b.layers.iter().enumerate() {
            self.trace.boundaries.extend_from_slice(&x);
            let h = layer_norm(&x, &layer.attn_norm.gain, &layer.attn_norm.bias);
            let q: Vec<f32> = (0..d).map(|r| dot(layer.attn.query.row(r), &h) as f32).collect();
            let k: Vec<f32> = (0..d).map(|r| dot(layer.attn.key.row(r), &h) as f32).collect();
            let v: Vec<f32> = (0..d).map(|r| dot(layer.attn.value.row(r), &h) as f32).collect();
            self.attn_keys[l].push(k);
            self.attn_values[l].push(v);
            let keys = &self.attn_keys[l];
            let values = &self.attn_values[l];

            let mut mixed = vec![0.0f32; d];
            for head in 0..n_heads {
                let span = head * hd..(head + 1) * hd;
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|kk| dot(&q[span.clone()], &kk[span.clone()]) * scale)
                    .collect();
                let weights = softmax(&logits);
                let mut acc = vec![0.0f64; hd];
                for (w, vv) in weights.iter().zip(values) {
                    for (a, &val) in acc.iter_mut().zip(&vv[span.clone()]) {
                        *a += w * val as f64;
                    }
                }
                for (slot, a) in mixed[span].iter_mut().zip(acc) {
                    *slot = a as f32;
                }
            }
            for (r, xr) in x.iter_mut().enumerate() {
                *xr += dot(layer.attn.output.row(r), &mixed) as f32;
            }
            self.trace.pre_mlp.extend_from_slice(&x);

            let h2 = layer_norm(&x, &layer.mlp_norm.gain, &layer.mlp_norm.bias);
            let mut scores = mlp_scores(&layer.mlp, cfg.mlp_kind, cfg.activation, &h2);
            self.hook.edit_scores(l, pos, &mut scores);
            let write = mlp_write(&layer.mlp, &scores);
            for (xr, w) in x.iter_mut().zip(&write) {
                *xr += w;
            }
            self.trace.scores.extend_from_slice(&scores);
        }
        self.trace.boundaries.extend_from_slice(&x);
        self.hook.edit_final_residual(pos, &mut x);
        self.trace.final_resid.extend_from_slice(&x);

        let hf = if cfg.final_norm {
            layer_norm(&x, &b.final_norm.gain, &b.final_norm.bias)
        } else {
            x
        };
        let unembed = b.unembedding_matrix();
        let bias = &b.unembed_bias;
        self.trace
            .logits
            .extend((0..cfg.vocab_size).map(|t| (dot(unembed.row(t), &hf) + bias[t] as f64) as f32));
        self.trace.tokens.push(token);
    }

    fn last_logits(&self) -> &[f32] {
        self.trace.logits(self.trace.tokens.len() - 1)
    }
}

pub fn forward_traced(bundle: &ModelBundle, ids: &[u32]) -> Result<ForwardTrace> {
    forward_hooked(bundle, ids, &NoHook)
}

pub fn forward_hooked(bundle: &ModelBundle, ids: &[u32], hook: &dyn ForwardHook) -> Result<ForwardTrace> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    bundle.check_tokens(ids)?;
    let mut dec = Decoder::new(bundle, hook, ids.len());
    for &id in ids {
        dec.push(id);
    }
    Ok(dec.trace)
}

/// Greedy continuation; ties go to the lowest token id.
///
/// The returned trace covers prompt and generated positions, identical to
/// a fresh forward over the full sequence.
pub fn generate_greedy(bundle: &ModelBundle, prompt: &[u32], n_new: usize) -> Result<(Vec<u32>, ForwardTrace)> {
    generate_greedy_hooked(bundle, prompt, n_new, &NoHook)
}

pub fn generate_greedy_hooked(
    bundle: &ModelBundle,
    prompt: &[u32],
    n_new: usize,
    hook: &dyn ForwardHook,
) -> Result<(Vec<u32>, ForwardTrace)> {
    if n_new == 0 {
        return Err(Error::InvalidArgument("n_new must be >= 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must be nonempty".into()));
    }
    bundle.check_tokens(prompt)?;
    let total = prompt.len() + n_new;
    if total > bundle.config.max_seq {
        return Err(Error::SequenceTooLong {
            len: total,
            max: bundle.config.max_seq,
        });
    }
    let mut dec = Decoder::new(bundle, hook, prompt.len());
    for &id in prompt {
        dec.push(id);
    }
    let mut new = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let next = argmax(dec.last_logits()) as u32;
        new.push(next);
        dec.push(next);
    }
    Ok((new, dec.trace))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::numerics::{Tensor2, Tensor1};

    fn tiny_mlp(kind: MlpKind, k: &[f32], w: Option<&[f32]>, v: &[f32]) -> MlpWeights {
        let d = k.len();
        MlpWeights {
            keys: Tensor2::new(1, d, k.to_vec()).unwrap(),
            linear: match kind {
                MlpKind::Plain => None,
                MlpKind::Gated => Some(Tensor2::new(1, d, w.unwrap().to_vec()).unwrap()),
            },
            values: Tensor2::new(1, d, v.to_vec()).unwrap(),
        }
    }

    #[test]
    fn decomposed_plain_example() {
        let mlp = tiny_mlp(MlpKind::Plain, &[1.0, 0.0], None, &[0.0, 3.0]);
        let (out, scores) =
            mlp_forward_decomposed(&mlp, &[1.0, 0.0], MlpKind::Plain, ActivationKind::Silu).unwrap();
        assert!((scores[0] - 0.731059).abs() < 1e-6);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 2.193176).abs() < 1e-5);
    }

    #[test]
    fn decomposed_gated_example() {
        let mlp = tiny_mlp(MlpKind::Gated, &[1.0, 0.0], Some(&[0.0, 2.0]), &[1.0, 0.0]);
        let (out, scores) =
            mlp_forward_decomposed(&mlp, &[0.0, 1.0], MlpKind::Gated, ActivationKind::Sigmoid).unwrap();
        assert_eq!(scores, vec![1.0]);
        assert_eq!(out, vec![1.0, 0.0]);
    }

    #[test]
    fn zero_input_gives_zero_write() {
        let b = random_bundle(config(MlpKind::Plain, ActivationKind::GeluExact), 3);
        let mlp = &b.layers[0].mlp;
        for act in [ActivationKind::Silu, ActivationKind::GeluExact, ActivationKind::GeluTanh] {
            let (out, scores) = mlp_forward_decomposed(mlp, &[0.0; 8], MlpKind::Plain, act).unwrap();
            assert!(scores.iter().all(|&s| s == 0.0));
            assert!(out.iter().all(|&o| o == 0.0));
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mlp = tiny_mlp(MlpKind::Plain, &[1.0, 0.0], None, &[0.0, 3.0]);
        assert!(matches!(
            mlp_forward_decomposed(&mlp, &[1.0, 0.0, 0.0], MlpKind::Plain, ActivationKind::Silu),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(mlp_forward_decomposed(&mlp, &[1.0, 0.0], MlpKind::Gated, ActivationKind::Silu).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_validates() {
        let b = random_bundle(config(MlpKind::Gated, ActivationKind::Silu), 5);
        let ids = [1, 4, 2, 9, 3];
        let t1 = forward_traced(&b, &ids).unwrap();
        let t2 = forward_traced(&b, &ids).unwrap();
        assert_eq!(t1, t2);
        assert!(matches!(forward_traced(&b, &[10]), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(forward_traced(&b, &[1; 17]), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn trace_completeness() {
        let b = random_bundle(config(MlpKind::Plain, ActivationKind::GeluTanh), 8);
        let t = forward_traced(&b, &[2, 3, 5, 7]).unwrap();
        for p in 0..4 {
            for l in 0..2 {
                let write = mlp_write(&b.layers[l].mlp, t.scores(p, l));
                let rebuilt: Vec<f32> = t.pre_mlp(p, l).iter().zip(&write).map(|(a, w)| a + w).collect();
                assert_eq!(rebuilt.as_slice(), t.boundary(p, l + 1));
            }
            assert_eq!(t.boundary(p, 2), t.final_residual(p));
        }
    }

    #[test]
    fn zero_attention_output_leaves_embedding_plus_mlp() {
        let mut cfg = config(MlpKind::Plain, ActivationKind::Silu);
        cfg.n_layers = 1;
        let mut b = random_bundle(cfg, 11);
        b.layers[0].attn.output = Tensor2::zeros(8, 8);
        let ids = [3, 1, 4];
        let t = forward_traced(&b, &ids).unwrap();
        for (p, &id) in ids.iter().enumerate() {
            let x0: Vec<f32> = b.embedding.row(id as usize).iter().zip(b.positional.row(p)).map(|(e, q)| e + q).collect();
            assert_eq!(t.pre_mlp(p, 0), x0.as_slice());
            let h = layer_norm(&x0, &b.layers[0].mlp_norm.gain, &b.layers[0].mlp_norm.bias);
            let (w, _) = mlp_forward_decomposed(&b.layers[0].mlp, &h, MlpKind::Plain, ActivationKind::Silu).unwrap();
            let expect: Vec<f32> = x0.iter().zip(&w).map(|(a, b)| a + b).collect();
            assert_eq!(t.final_residual(p), expect.as_slice());
        }
    }

    #[test]
    fn generation_matches_full_forward() {
        let b = random_bundle(config(MlpKind::Plain, ActivationKind::GeluExact), 21);
        let (new, trace) = generate_greedy(&b, &[1, 2], 6).unwrap();
        assert_eq!(new.len(), 6);
        let mut full = vec![1u32, 2];
        full.extend(&new);
        let fresh = forward_traced(&b, &full).unwrap();
        assert_eq!(trace.tokens, fresh.tokens);
        for p in 0..full.len() {
            assert_eq!(trace.logits(p), fresh.logits(p));
        }
        for (i, &tok) in new.iter().enumerate() {
            let p = 1 + i;
            assert_eq!(tok as usize, argmax(fresh.logits(p)));
        }
        let (again, _) = generate_greedy(&b, &[1, 2], 6).unwrap();
        assert_eq!(new, again);
        assert!(matches!(generate_greedy(&b, &[1], 0), Err(Error::InvalidArgument(_))));
        assert!(generate_greedy(&b, &[], 3).is_err());
    }

    #[test]
    fn greedy_tie_break_lowest_id() {
        let mut b = random_bundle(config(MlpKind::Plain, ActivationKind::Silu), 2);
        b.unembedding = Some(Tensor2::zeros(10, 8));
        b.unembed_bias = Tensor1::zeros(10);
        let (new, _) = generate_greedy(&b, &[5], 3).unwrap();
        assert_eq!(new, vec![0, 0, 0]);
    }
}
