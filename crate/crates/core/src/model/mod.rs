//! Pre-norm decoder-only transformer whose MLP layers are exposed as
//! per-neuron value-vector writes.

mod forward;
mod io;
mod profile;
mod vocab;

pub use forward::{
    forward_hooked, forward_traced, generate_greedy, generate_greedy_hooked,
    mlp_forward_decomposed, mlp_forward_unfactored, ForwardHook, ForwardTrace, NoHook,
};
pub use io::{load_bundle, save_bundle, Manifest, TensorEntry, FORMAT_VERSION};
pub use profile::{mean_profile, mean_profile_hooked, MeanActivationProfile};
pub use vocab::{Vocab, UNK};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ActivationKind, Tensor1, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MlpKind {
    /// `m_i = σ(k_i·x)`
    Plain,
    /// `m_i = σ(k_i·x)·(w_i·x)`
    Gated,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub mlp_kind: MlpKind,
    pub activation: ActivationKind,
    pub tied_unembedding: bool,
    /// Layer norm before the unembedding. Disabling it makes logits linear
    /// in the final residual, which tests rely on.
    #[serde(default = "default_true")]
    pub final_norm: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("model config: {msg}")));
        if self.n_layers < 1 {
            return bad("n_layers must be >= 1");
        }
        if self.d_model < 2 {
            return bad("d_model must be >= 2");
        }
        if self.d_mlp < 1 {
            return bad("d_mlp must be >= 1");
        }
        if self.n_heads < 1 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("n_heads must divide d_model");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        if self.max_seq < 1 {
            return bad("max_seq must be >= 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.d_mlp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormWeights {
    pub gain: Tensor1,
    pub bias: Tensor1,
}

impl NormWeights {
    fn identity(d: usize) -> Self {
        Self {
            gain: Tensor1::ones(d),
            bias: Tensor1::zeros(d),
        }
    }
}

/// Query/key/value/output projections, each `d_model × d_model` (out × in).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub query: Tensor2,
    pub key: Tensor2,
    pub value: Tensor2,
    pub output: Tensor2,
}

/// MLP weights with one row per neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    /// `W_K` (plain) or `W_1` (gated): rows `k_i` read through the nonlinearity.
    pub keys: Tensor2,
    /// `W_2` rows `w_i`, gated only.
    pub linear: Option<Tensor2>,
    /// `W_V` rows `v_i`: the value vectors.
    pub values: Tensor2,
}

impl MlpWeights {
    pub fn value_vector(&self, neuron: usize) -> &[f32] {
        self.values.row(neuron)
    }

    pub fn d_mlp(&self) -> usize {
        self.keys.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: NormWeights,
    pub attn: AttentionWeights,
    pub mlp_norm: NormWeights,
    pub mlp: MlpWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub embedding: Tensor2,
    pub positional: Tensor2,
    pub layers: Vec<LayerWeights>,
    pub final_norm: NormWeights,
    /// `None` when the unembedding is tied to `embedding`.
    pub unembedding: Option<Tensor2>,
    pub unembed_bias: Tensor1,
}

impl ModelBundle {
    /// All-zero weights with identity norms.
    pub fn zeros(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::ShapeMismatch(format!(
                "vocab has {} tokens, config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: NormWeights::identity(d),
                attn: AttentionWeights {
                    query: Tensor2::zeros(d, d),
                    key: Tensor2::zeros(d, d),
                    value: Tensor2::zeros(d, d),
                    output: Tensor2::zeros(d, d),
                },
                mlp_norm: NormWeights::identity(d),
                mlp: MlpWeights {
                    keys: Tensor2::zeros(config.d_mlp, d),
                    linear: match config.mlp_kind {
                        MlpKind::Plain => None,
                        MlpKind::Gated => Some(Tensor2::zeros(config.d_mlp, d)),
                    },
                    values: Tensor2::zeros(config.d_mlp, d),
                },
            })
            .collect();
        Ok(Self {
            embedding: Tensor2::zeros(config.vocab_size, d),
            positional: Tensor2::zeros(config.max_seq, d),
            layers,
            final_norm: NormWeights::identity(d),
            unembedding: (!config.tied_unembedding).then(|| Tensor2::zeros(config.vocab_size, d)),
            unembed_bias: Tensor1::zeros(config.vocab_size),
            config,
            vocab,
        })
    }

    /// Gaussian-initialized weights, scaled by `1/sqrt(fan_in)`.
    pub fn random<R: Rng>(config: ModelConfig, vocab: Vocab, scale: f32, rng: &mut R) -> Result<Self> {
        let mut bundle = Self::zeros(config, vocab)?;
        let d = bundle.config.d_model as f32;
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let std = scale / d.sqrt();
        for (name, _, data) in bundle.named_tensors_mut() {
            if name.ends_with(".gain") || name.ends_with(".bias") || name == "unembed_bias" {
                continue;
            }
            for v in data.iter_mut() {
                *v = normal.sample(rng) * std;
            }
        }
        Ok(bundle)
    }

    pub fn unembedding_matrix(&self) -> &Tensor2 {
        self.unembedding.as_ref().unwrap_or(&self.embedding)
    }

    pub fn value_vector(&self, layer: usize, neuron: usize) -> &[f32] {
        self.layers[layer].mlp.values.row(neuron)
    }

    /// Expected tensor names and shapes in manifest order.
    pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, v, f) = (config.d_model, config.vocab_size, config.d_mlp);
        let mut out = vec![
            ("embedding".to_string(), vec![v, d]),
            ("positional".to_string(), vec![config.max_seq, d]),
        ];
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            out.push((format!("{p}.attn_norm.gain"), vec![d]));
            out.push((format!("{p}.attn_norm.bias"), vec![d]));
            out.push((format!("{p}.attn.query"), vec![d, d]));
            out.push((format!("{p}.attn.key"), vec![d, d]));
            out.push((format!("{p}.attn.value"), vec![d, d]));
            out.push((format!("{p}.attn.output"), vec![d, d]));
            out.push((format!("{p}.mlp_norm.gain"), vec![d]));
            out.push((format!("{p}.mlp_norm.bias"), vec![d]));
            out.push((format!("{p}.mlp.keys"), vec![f, d]));
            if config.mlp_kind == MlpKind::Gated {
                out.push((format!("{p}.mlp.linear"), vec![f, d]));
            }
            out.push((format!("{p}.mlp.values"), vec![f, d]));
        }
        out.push(("final_norm.gain".to_string(), vec![d]));
        out.push(("final_norm.bias".to_string(), vec![d]));
        if !config.tied_unembedding {
            out.push(("unembedding".to_string(), vec![v, d]));
        }
        out.push(("unembed_bias".to_string(), vec![v]));
        out
    }

    /// Tensors in manifest order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        fn t2(name: String, t: &Tensor2) -> (String, Vec<usize>, &[f32]) {
            (name, t.shape().to_vec(), t.data())
        }
        out.push(t2("embedding".into(), &self.embedding));
        out.push(t2("positional".into(), &self.positional));
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            out.push((format!("{p}.attn_norm.gain"), vec![layer.attn_norm.gain.len()], &layer.attn_norm.gain));
            out.push((format!("{p}.attn_norm.bias"), vec![layer.attn_norm.bias.len()], &layer.attn_norm.bias));
            out.push(t2(format!("{p}.attn.query"), &layer.attn.query));
            out.push(t2(format!("{p}.attn.key"), &layer.attn.key));
            out.push(t2(format!("{p}.attn.value"), &layer.attn.value));
            out.push(t2(format!("{p}.attn.output"), &layer.attn.output));
            out.push((format!("{p}.mlp_norm.gain"), vec![layer.mlp_norm.gain.len()], &layer.mlp_norm.gain));
            out.push((format!("{p}.mlp_norm.bias"), vec![layer.mlp_norm.bias.len()], &layer.mlp_norm.bias));
            out.push(t2(format!("{p}.mlp.keys"), &layer.mlp.keys));
            if let Some(lin) = &layer.mlp.linear {
                out.push(t2(format!("{p}.mlp.linear"), lin));
            }
            out.push(t2(format!("{p}.mlp.values"), &layer.mlp.values));
        }
        out.push(("final_norm.gain".into(), vec![self.final_norm.gain.len()], &self.final_norm.gain));
        out.push(("final_norm.bias".into(), vec![self.final_norm.bias.len()], &self.final_norm.bias));
        if let Some(u) = &self.unembedding {
            out.push(t2("unembedding".into(), u));
        }
        out.push(("unembed_bias".into(), vec![self.unembed_bias.len()], &self.unembed_bias));
        out
    }

    /// Mutable tensors in manifest order. Callers must keep values finite.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f32])> {
        let mut out: Vec<(String, Vec<usize>, &mut [f32])> = Vec::new();
        fn t2(name: String, t: &mut Tensor2) -> (String, Vec<usize>, &mut [f32]) {
            let shape = t.shape().to_vec();
            (name, shape, t.data_mut())
        }
        fn t1(name: String, t: &mut Tensor1) -> (String, Vec<usize>, &mut [f32]) {
            let shape = vec![t.len()];
            (name, shape, t.as_mut_slice())
        }
        out.push(t2("embedding".into(), &mut self.embedding));
        out.push(t2("positional".into(), &mut self.positional));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{l}");
            out.push(t1(format!("{p}.attn_norm.gain"), &mut layer.attn_norm.gain));
            out.push(t1(format!("{p}.attn_norm.bias"), &mut layer.attn_norm.bias));
            out.push(t2(format!("{p}.attn.query"), &mut layer.attn.query));
            out.push(t2(format!("{p}.attn.key"), &mut layer.attn.key));
            out.push(t2(format!("{p}.attn.value"), &mut layer.attn.value));
            out.push(t2(format!("{p}.attn.output"), &mut layer.attn.output));
            out.push(t1(format!("{p}.mlp_norm.gain"), &mut layer.mlp_norm.gain));
            out.push(t1(format!("{p}.mlp_norm.bias"), &mut layer.mlp_norm.bias));
            out.push(t2(format!("{p}.mlp.keys"), &mut layer.mlp.keys));
            if let Some(lin) = &mut layer.mlp.linear {
                out.push(t2(format!("{p}.mlp.linear"), lin));
            }
            out.push(t2(format!("{p}.mlp.values"), &mut layer.mlp.values));
        }
        out.push(t1("final_norm.gain".into(), &mut self.final_norm.gain));
        out.push(t1("final_norm.bias".into(), &mut self.final_norm.bias));
        if let Some(u) = &mut self.unembedding {
            out.push(t2("unembedding".into(), u));
        }
        out.push(t1("unembed_bias".into(), &mut self.unembed_bias));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }

    pub fn check_same_config(&self, other: &ModelBundle) -> Result<()> {
        if self.config != other.config {
            return Err(Error::ConfigMismatch);
        }
        Ok(())
    }

    pub fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }
}
