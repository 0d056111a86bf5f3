//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! "TVLM"  u32 version  u32 header_len  header (UTF-8 JSON)  f32 payloads
//! ```
//!
//! The header holds the model configuration, the vocabulary fingerprint and
//! one `(name, dtype, shape)` entry per tensor in manifest order; payloads
//! follow in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layout, Model, ModelConfig, Tensor};
use crate::rng;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TVLM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// FNV-1a of the vocabulary file the embeddings are indexed by.
    pub vocab_fingerprint: u64,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn with_fingerprint(mut self, fingerprint: u64) -> Self {
        self.vocab_fingerprint = fingerprint;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config().clone(),
            vocab_fingerprint: format!("{:016x}", self.vocab_fingerprint),
            tensors: self
                .model
                .layout()
                .entries
                .iter()
                .map(|(name, shape)| TensorEntry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.model.parameter_count() * 4;
        let mut out = Vec::with_capacity(12 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.model.tensors() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 {
            return Err(err("truncated file"));
        }
        if &bytes[..4] != MAGIC {
            return Err(err("bad magic, not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        header.config.validate()?;
        let fingerprint = u64::from_str_radix(&header.vocab_fingerprint, 16)
            .map_err(|_| err("malformed vocabulary fingerprint"))?;

        let layout = Layout::new(&header.config);
        if header.tensors.len() != layout.len() {
            return Err(Error::Checkpoint(format!(
                "header lists {} tensors, configuration requires {}",
                header.tensors.len(),
                layout.len()
            )));
        }
        let mut offset = header_end;
        let mut tensors = Vec::with_capacity(layout.len());
        for (entry, (name, shape)) in header.tensors.iter().zip(&layout.entries) {
            if &entry.name != name || &entry.shape != shape || entry.dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "tensor entry {} f32 {:?} does not match manifest entry {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            let count: usize = shape.iter().product();
            let end = offset + count * 4;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("truncated payload in tensor {name}")));
            }
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(Tensor {
                shape: shape.clone(),
                data,
            });
            offset = end;
        }
        if offset != bytes.len() {
            return Err(err("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint {
            model: Model::from_tensors(header.config, tensors)?,
            vocab_fingerprint: fingerprint,
        })
    }

    /// Loads and checks the file against an expected configuration, e.g. one
    /// derived from the vocabulary in use.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.config() != expected {
            let got = ckpt.config();
            let detail = if got.vocab_size != expected.vocab_size {
                format!(
                    "vocabulary size {} does not match expected {}; extend the embeddings first",
                    got.vocab_size, expected.vocab_size
                )
            } else {
                "model configuration differs from the expected one".to_string()
            };
            return Err(Error::Checkpoint(detail));
        }
        Ok(ckpt)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_fingerprint: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

const INIT_STD: f64 = 0.02;

/// Weights and embeddings from a truncated normal (σ = 0.02), biases zero,
/// layer-norm gains one.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = rng::seeded(rng::derive(seed, rng::stream::INIT, 0));
    let tensors = layout
        .entries
        .iter()
        .map(|(name, shape)| {
            if name.ends_with(".gain") {
                Tensor::filled(shape, 1.0)
            } else if name.ends_with(".bias") || name.ends_with("output_bias") {
                Tensor::zeros(shape)
            } else {
                let count = shape.iter().product();
                Tensor {
                    shape: shape.clone(),
                    data: (0..count)
                        .map(|_| rng::truncated_normal(&mut rng, INIT_STD) as f32)
                        .collect(),
                }
            }
        })
        .collect();
    Ok(Checkpoint {
        model: Model::from_tensors(config.clone(), tensors)?,
        vocab_fingerprint: 0,
    })
}

/// Grows the vocabulary dimension. Existing embedding rows (and therefore the
/// tied output columns) are kept bit for bit; each new row is the mean of the
/// old rows plus truncated normal noise, and new output-bias entries take the
/// mean old bias.
pub fn extend_embeddings(ckpt: &Checkpoint, new_vocab_size: usize, seed: u64) -> Result<Checkpoint> {
    let old = ckpt.config();
    if new_vocab_size < old.vocab_size {
        return Err(Error::Invalid(format!(
            "cannot shrink vocabulary from {} to {new_vocab_size}",
            old.vocab_size
        )));
    }
    if new_vocab_size == old.vocab_size {
        return Ok(ckpt.clone());
    }
    let e = old.embedding_size;
    let old_v = old.vocab_size;
    let mut config = old.clone();
    config.vocab_size = new_vocab_size;
    let new_layout = Layout::new(&config);
    let old_layout = ckpt.model.layout();
    let mut rng = rng::seeded(rng::derive(seed, rng::stream::EXTEND, new_vocab_size as u64));

    let mut tensors = Vec::with_capacity(new_layout.len());
    for (name, shape) in &new_layout.entries {
        let idx = old_layout.index_of(name).expect("layouts share names");
        let old_t = &ckpt.model.tensors()[idx];
        let tensor = if idx == old_layout.word_embeddings {
            let mut mean = vec![0f64; e];
            for row in old_t.data.chunks_exact(e) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += f64::from(v);
                }
            }
            mean.iter_mut().for_each(|m| *m /= old_v as f64);
            let mut data = old_t.data.clone();
            for _ in old_v..new_vocab_size {
                data.extend(mean.iter().map(|&m| (m + rng::truncated_normal(&mut rng, INIT_STD)) as f32));
            }
            Tensor {
                shape: shape.clone(),
                data,
            }
        } else if idx == old_layout.mlm_output_bias {
            let mean = old_t.data.iter().map(|&v| f64::from(v)).sum::<f64>() / old_v as f64;
            let mut data = old_t.data.clone();
            data.resize(new_vocab_size, mean as f32);
            Tensor {
                shape: shape.clone(),
                data,
            }
        } else {
            old_t.clone()
        };
        tensors.push(tensor);
    }
    Ok(Checkpoint {
        model: Model::from_tensors(config, tensors)?,
        vocab_fingerprint: ckpt.vocab_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::desk(30).with_hidden(16);
        c.max_seq_len = 8;
        c
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&small(), 7).unwrap();
        let b = init_model(&small(), 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), init_model(&small(), 8).unwrap().to_bytes());
    }

    #[test]
    fn init_rejects_bad_config() {
        let mut c = ModelConfig::desk(30);
        c.num_heads = 3;
        assert!(init_model(&c, 0).is_err());
    }

    #[test]
    fn init_distribution() {
        let ckpt = init_model(&small(), 1).unwrap();
        let m = &ckpt.model;
        assert!(m.tensor("encoder.final_norm.gain").unwrap().data.iter().all(|&g| g == 1.0));
        assert!(m.tensor("encoder.layer0.attention.query.bias").unwrap().data.iter().all(|&b| b == 0.0));
        let w = &m.tensor("embeddings.word").unwrap().data;
        assert!(w.iter().all(|&v| v.abs() <= 0.04));
        let std = (w.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((0.012..0.022).contains(&std), "{std}");
    }

    #[test]
    fn shared_layers_store_one_block() {
        let mut c = small();
        c.num_layers = 3;
        c.share_layers = true;
        let ckpt = init_model(&c, 0).unwrap();
        let names: Vec<&str> = ckpt.model.layout().entries.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"encoder.shared.attention.query.weight"));
        assert!(!names.iter().any(|n| n.starts_with("encoder.layer")));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tvlm");
        let ckpt = init_model(&small(), 3).unwrap().with_fingerprint(0xdead_beef_0123_4567);
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        for (a, b) in back.model.tensors().iter().zip(ckpt.model.tensors()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = init_model(&small(), 3).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err().to_string().contains("truncated"));
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn shape_mismatch_in_header_is_rejected() {
        let ckpt = init_model(&small(), 3).unwrap();
        let bytes = ckpt.to_bytes();
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + header_len]).unwrap();
        let edited = header.replacen("[30,16]", "[31,16]", 1);
        assert_ne!(edited, header);
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[12 + header_len..]);
        assert!(Checkpoint::from_bytes(&out).is_err());
    }

    #[test]
    fn larger_vocab_load_needs_extension() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tvlm");
        let ckpt = init_model(&small(), 3).unwrap();
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bigger = small();
        bigger.vocab_size += 70;
        let err = Checkpoint::load_expecting(&path, &bigger).unwrap_err();
        assert!(err.to_string().contains("extend"), "{err}");
        let extended = extend_embeddings(&ckpt, bigger.vocab_size, 0).unwrap();
        save_checkpoint(&extended, &path).unwrap();
        Checkpoint::load_expecting(&path, &bigger).unwrap();
    }

    #[test]
    fn extension_preserves_old_rows() {
        let ckpt = init_model(&small(), 4).unwrap();
        assert_eq!(extend_embeddings(&ckpt, 30, 0).unwrap(), ckpt);
        assert!(extend_embeddings(&ckpt, 29, 0).is_err());

        let grown = extend_embeddings(&ckpt, 100, 0).unwrap();
        let old = &ckpt.model.tensor("embeddings.word").unwrap().data;
        let new = &grown.model.tensor("embeddings.word").unwrap().data;
        assert_eq!(new.len(), 100 * 16);
        assert!(old.iter().zip(new).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(grown.model.tensor("mlm.output_bias").unwrap().data.len(), 100);
        // Every other tensor is untouched.
        for (name, _) in &ckpt.model.layout().entries {
            if name != "embeddings.word" && name != "mlm.output_bias" {
                assert_eq!(ckpt.model.tensor(name), grown.model.tensor(name), "{name}");
            }
        }
    }
}
