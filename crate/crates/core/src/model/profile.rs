use std::path::Path;

use crate::error::{Error, Result};

use super::{generate_greedy_hooked, ForwardHook, ModelBundle, NoHook};

const MAGIC: &[u8; 8] = b"DTXPROF1";

/// Per-neuron mean activation score over generated-token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanActivationProfile {
    pub n_layers: usize,
    pub d_mlp: usize,
    /// Row-major `(layer, neuron)` means.
    pub means: Vec<f64>,
    /// Number of (prompt, token) samples averaged.
    pub count: u64,
    pub n_new: u32,
    /// Always false for profiles built here: prompt positions are excluded.
    pub includes_prompt_positions: bool,
}

impl MeanActivationProfile {
    pub fn get(&self, layer: usize, neuron: usize) -> f64 {
        self.means[layer * self.d_mlp + neuron]
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.means[layer * self.d_mlp..(layer + 1) * self.d_mlp]
    }

    pub fn check_shape(&self, n_layers: usize, d_mlp: usize) -> Result<()> {
        if self.n_layers != n_layers || self.d_mlp != d_mlp {
            return Err(Error::ShapeMismatch(format!(
                "profile is {}x{}, model is {n_layers}x{d_mlp}",
                self.n_layers, self.d_mlp
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.means.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.n_layers as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_mlp as u32).to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.n_new.to_le_bytes());
        out.push(self.includes_prompt_positions as u8);
        for m in &self.means {
            out.extend_from_slice(&m.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let header = 8 + 4 + 4 + 8 + 4 + 1;
        if bytes.len() < header || &bytes[..8] != MAGIC {
            return Err(Error::parse(path, "not a profile file"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let n_layers = u32_at(8) as usize;
        let d_mlp = u32_at(12) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let n_new = u32_at(24);
        let includes_prompt_positions = bytes[28] != 0;
        let n = n_layers * d_mlp;
        let expected = header + n * 8;
        if bytes.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected || n == 0 || count == 0 {
            return Err(Error::parse(path, "profile header and payload disagree"));
        }
        let means: Vec<f64> = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite(format!("profile {}", path.display())));
        }
        Ok(Self {
            n_layers,
            d_mlp,
            means,
            count,
            n_new,
            includes_prompt_positions,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn mean_profile(bundle: &ModelBundle, prompts: &[Vec<u32>], n_new: usize) -> Result<MeanActivationProfile> {
    mean_profile_hooked(bundle, prompts, n_new, &NoHook)
}

/// Averages `m_i^ℓ` over the generated-token positions of every prompt.
pub fn mean_profile_hooked(
    bundle: &ModelBundle,
    prompts: &[Vec<u32>],
    n_new: usize,
    hook: &dyn ForwardHook,
) -> Result<MeanActivationProfile> {
    if prompts.is_empty() {
        return Err(Error::EmptyPromptSet);
    }
    let cfg = &bundle.config;
    let mut sums = vec![0.0f64; cfg.n_layers * cfg.d_mlp];
    let mut count = 0u64;
    for prompt in prompts {
        let (_, trace) = generate_greedy_hooked(bundle, prompt, n_new, hook)?;
        for pos in trace.prompt_len..trace.positions() {
            for l in 0..cfg.n_layers {
                let row = &mut sums[l * cfg.d_mlp..(l + 1) * cfg.d_mlp];
                for (s, &m) in row.iter_mut().zip(trace.scores(pos, l)) {
                    *s += m as f64;
                }
            }
            count += 1;
        }
    }
    let means = sums.into_iter().map(|s| s / count as f64).collect();
    Ok(MeanActivationProfile {
        n_layers: cfg.n_layers,
        d_mlp: cfg.d_mlp,
        means,
        count,
        n_new: n_new as u32,
        includes_prompt_positions: false,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{generate_greedy, MlpKind};
    use super::*;
    use crate::numerics::ActivationKind;

    #[test]
    fn single_token_profile_equals_scores() {
        let b = random_bundle(config(MlpKind::Plain, ActivationKind::Silu), 4);
        let prof = mean_profile(&b, &[vec![3, 1]], 1).unwrap();
        let (_, trace) = generate_greedy(&b, &[3, 1], 1).unwrap();
        assert_eq!(prof.count, 1);
        for l in 0..2 {
            let s: Vec<f64> = trace.scores(2, l).iter().map(|&v| v as f64).collect();
            assert_eq!(prof.layer(l), s.as_slice());
        }
    }

    #[test]
    fn duplicate_prompts_are_idempotent() {
        let b = random_bundle(config(MlpKind::Gated, ActivationKind::GeluExact), 4);
        let one = mean_profile(&b, &[vec![2, 5]], 4).unwrap();
        let two = mean_profile(&b, &[vec![2, 5], vec![2, 5]], 4).unwrap();
        for (a, b) in one.means.iter().zip(&two.means) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert_eq!(two.count, 8);
    }

    #[test]
    fn brute_force_average_oracle() {
        let b = random_bundle(config(MlpKind::Plain, ActivationKind::GeluTanh), 9);
        let prompts: Vec<Vec<u32>> = (0..8).map(|i| vec![1 + (i % 9) as u32, 1 + ((i * 5) % 9) as u32]).collect();
        let prof = mean_profile(&b, &prompts, 3).unwrap();
        // store every score, then average externally
        let mut all: Vec<Vec<f32>> = Vec::new();
        for p in &prompts {
            let (_, t) = generate_greedy(&b, p, 3).unwrap();
            for pos in 2..5 {
                let mut row = Vec::new();
                for l in 0..2 {
                    row.extend_from_slice(t.scores(pos, l));
                }
                all.push(row);
            }
        }
        for j in 0..24 {
            let mean: f64 = all.iter().map(|r| r[j] as f64).sum::<f64>() / all.len() as f64;
            assert!((mean - prof.means[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_prompts_rejected_and_bytes_round_trip() {
        let b = random_bundle(config(MlpKind::Plain, ActivationKind::Silu), 4);
        assert!(matches!(mean_profile(&b, &[], 2), Err(Error::EmptyPromptSet)));
        let prof = mean_profile(&b, &[vec![1]], 2).unwrap();
        let back = MeanActivationProfile::from_bytes(&prof.to_bytes(), Path::new("p")).unwrap();
        assert_eq!(back, prof);
        let mut bytes = prof.to_bytes();
        bytes.pop();
        assert!(MeanActivationProfile::from_bytes(&bytes, Path::new("p")).is_err());
    }
}
