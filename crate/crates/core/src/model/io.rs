//! Bundle container: `model.manifest` (JSON) + `model.bin` (raw f32le,
//! row-major, manifest order) + `vocab.tsv`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ModelBundle, ModelConfig, Vocab};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.manifest";
pub const PAYLOAD_FILE: &str = "model.bin";
pub const VOCAB_FILE: &str = "vocab.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn for_config(config: &ModelConfig) -> Self {
        let mut offset = 0;
        let tensors = ModelBundle::tensor_layout(config)
            .into_iter()
            .map(|(name, shape)| {
                let entry = TensorEntry {
                    name,
                    offset,
                    shape: shape.clone(),
                };
                offset += shape.iter().product::<usize>() * 4;
                entry
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            dtype: "f32le".into(),
            config: config.clone(),
            tensors,
        }
    }

    pub fn payload_len(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum()
    }

    /// Checks version, dtype, config and the tensor table against the
    /// layout implied by the config.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::ManifestInvalid(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.dtype != "f32le" {
            return Err(Error::ManifestInvalid(format!("unsupported dtype {:?}", self.dtype)));
        }
        self.config
            .validate()
            .map_err(|e| Error::ManifestInvalid(e.to_string()))?;
        let expected = ModelBundle::tensor_layout(&self.config);
        if expected.len() != self.tensors.len() {
            return Err(Error::ManifestInvalid(format!(
                "expected {} tensors, manifest lists {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        let mut offset = 0;
        for ((name, shape), entry) in expected.iter().zip(&self.tensors) {
            if name != &entry.name {
                return Err(Error::ManifestInvalid(format!(
                    "expected tensor {name:?}, found {:?}",
                    entry.name
                )));
            }
            if shape != &entry.shape {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: config implies {shape:?}, manifest says {:?}",
                    entry.shape
                )));
            }
            if entry.offset != offset {
                return Err(Error::ManifestInvalid(format!(
                    "{name}: offset {} is not contiguous (expected {offset})",
                    entry.offset
                )));
            }
            offset += shape.iter().product::<usize>() * 4;
        }
        Ok(())
    }
}

pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest::for_config(&bundle.config);
    let mut payload = Vec::with_capacity(manifest.payload_len());
    for (_, _, data) in bundle.named_tensors() {
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(PAYLOAD_FILE);
    fs::write(&bpath, payload).map_err(|e| Error::io(&bpath, e))?;
    let vpath = dir.join(VOCAB_FILE);
    fs::write(&vpath, bundle.vocab.to_tsv()).map_err(|e| Error::io(&vpath, e))?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::ManifestInvalid(e.to_string()))?;
    manifest.validate()?;

    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != manifest.config.vocab_size {
        return Err(Error::ShapeMismatch(format!(
            "vocab.tsv has {} tokens, config expects {}",
            vocab.len(),
            manifest.config.vocab_size
        )));
    }

    let bpath = dir.join(PAYLOAD_FILE);
    let payload = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let expected = manifest.payload_len();
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::ManifestInvalid(format!(
            "payload has {} trailing bytes",
            payload.len() - expected
        )));
    }

    let mut bundle = ModelBundle::zeros(manifest.config.clone(), vocab)?;
    for ((name, _, data), entry) in bundle.named_tensors_mut().into_iter().zip(&manifest.tensors) {
        let bytes = &payload[entry.offset..entry.offset + data.len() * 4];
        for (slot, chunk) in data.iter_mut().zip(bytes.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
            *slot = v;
        }
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::MlpKind;
    use super::*;
    use crate::numerics::ActivationKind;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (i, kind) in [MlpKind::Plain, MlpKind::Gated].into_iter().enumerate() {
            let b = random_bundle(config(kind, ActivationKind::GeluTanh), 40 + i as u64);
            let path = dir.path().join(format!("b{i}"));
            save_bundle(&b, &path).unwrap();
            let bytes = fs::read(path.join(PAYLOAD_FILE)).unwrap();
            let back = load_bundle(&path).unwrap();
            assert_eq!(back, b);
            save_bundle(&back, &path).unwrap();
            assert_eq!(fs::read(path.join(PAYLOAD_FILE)).unwrap(), bytes);
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let b = random_bundle(config(MlpKind::Plain, ActivationKind::Silu), 1);
        save_bundle(&b, dir.path()).unwrap();
        let p = dir.path().join(PAYLOAD_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn manifest_checked_before_payload() {
        let dir = tempfile::tempdir().unwrap();
        let b = random_bundle(config(MlpKind::Plain, ActivationKind::Silu), 1);
        save_bundle(&b, dir.path()).unwrap();
        // payload gone entirely: a bad manifest must still be reported first
        fs::remove_file(dir.path().join(PAYLOAD_FILE)).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        m.tensors[3].shape = vec![7];
        fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::ShapeMismatch(_))));
        m = Manifest::for_config(&b.config);
        m.dtype = "f16".into();
        fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::ManifestInvalid(_))));
        m = Manifest::for_config(&b.config);
        m.tensors[2].offset += 4;
        fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::ManifestInvalid(_))));
    }
}
