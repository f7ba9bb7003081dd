//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"RFMRCKPT"             magic
//! u32                     format version (1)
//! u64                     header length in bytes
//! header                  UTF-8 JSON: dtype, step, seed, model config,
//!                         optimizer scalars, opaque `extra`, and the
//!                         ordered array directory [{name, shape}]
//! payload                 every array in directory order, elements as
//!                         little-endian f32 or f64
//! ```
//!
//! Arrays are the model parameters (named as in [`Model::named_tensors`])
//! followed by `adam.m.<name>` and `adam.v.<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"RFMRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub model: Model<S>,
    pub optimizer: Adam<S>,
    /// Number of training steps taken.
    pub step: u64,
    pub seed: u64,
    /// Caller-defined metadata, stored verbatim.
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerState {
    config: AdamConfig,
    t: u64,
    skipped: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: u64,
    seed: u64,
    model: ModelConfig,
    optimizer: OptimizerState,
    extra: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

impl<S: Scalar> Checkpoint<S> {
    fn arrays(&self) -> Vec<(String, &Tensor<S>)> {
        let named = self.model.named_tensors();
        let mut out: Vec<(String, &Tensor<S>)> = named.iter().map(|(n, t)| (n.clone(), *t)).collect();
        for (prefix, moments) in [("adam.m", &self.optimizer.m), ("adam.v", &self.optimizer.v)] {
            out.extend(named.iter().zip(moments).map(|((n, _), t)| (format!("{prefix}.{n}"), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays = self.arrays();
        let header = Header {
            dtype: S::DTYPE.to_string(),
            step: self.step,
            seed: self.seed,
            model: self.model.config.clone(),
            optimizer: OptimizerState {
                config: self.optimizer.config.clone(),
                t: self.optimizer.t,
                skipped: self.optimizer.skipped,
            },
            extra: self.extra.clone(),
            arrays: arrays
                .iter()
                .map(|(n, t)| ArrayEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = arrays.iter().map(|(_, t)| t.len() * S::BYTES).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &arrays {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        if header.dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, {} requested",
                header.dtype,
                S::DTYPE
            )));
        }
        let mut model = Model::<S>::init(header.model.clone(), 0)?;
        let mut optimizer = Adam::new(header.optimizer.config.clone(), model.named_tensors().into_iter().map(|(_, t)| t));
        optimizer.t = header.optimizer.t;
        optimizer.skipped = header.optimizer.skipped;

        let expected: Vec<String> = {
            let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
            let mut all = names.clone();
            for p in ["adam.m", "adam.v"] {
                all.extend(names.iter().map(|n| format!("{p}.{n}")));
            }
            all
        };
        if header.arrays.len() != expected.len() || header.arrays.iter().zip(&expected).any(|(a, e)| &a.name != e) {
            return Err(bad("array directory does not match the model configuration"));
        }
        let mut targets: Vec<&mut Tensor<S>> = model.tensors_mut();
        targets.extend(optimizer.m.iter_mut());
        targets.extend(optimizer.v.iter_mut());
        let mut pos = header_end;
        for (entry, t) in header.arrays.iter().zip(targets) {
            if entry.shape != t.shape() {
                return Err(Error::Checkpoint(format!("array {} has shape {:?}, expected {:?}", entry.name, entry.shape, t.shape())));
            }
            let n = t.len() * S::BYTES;
            let chunk = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated payload"))?;
            for (x, b) in t.data_mut().iter_mut().zip(chunk.chunks_exact(S::BYTES)) {
                *x = S::read_le(b);
            }
            pos += n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint {
            model,
            optimizer,
            step: header.step,
            seed: header.seed,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Reads only the dtype tag of a checkpoint file.
pub fn peek_dtype(bytes: &[u8]) -> Result<String> {
    #[derive(Deserialize)]
    struct Dtype {
        dtype: String,
    }
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let h = bytes.get(20..20 + hlen).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    Ok(serde_json::from_slice::<Dtype>(h)?.dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;

    fn sample<S: Scalar>() -> Checkpoint<S> {
        let cfg = ModelConfig {
            vocab_size: 9,
            d_model: 8,
            d_ff: 6,
            n_heads: 2,
            n_layers: 2,
            max_len: 10,
            attention: AttentionKind::Full,
            ..Default::default()
        };
        let model = Model::<S>::init(cfg, 5).unwrap();
        let mut optimizer = Adam::new(AdamConfig::default(), model.named_tensors().into_iter().map(|(_, t)| t));
        for (i, m) in optimizer.m.iter_mut().enumerate() {
            m.data_mut().iter_mut().enumerate().for_each(|(j, x)| *x = S::lit((i * 31 + j) as f64 * 1e-3));
        }
        optimizer.t = 7;
        Checkpoint {
            model,
            optimizer,
            step: 7,
            seed: 5,
            extra: serde_json::json!({"note": "x"}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample::<f32>();
        let back = Checkpoint::<f32>::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let c = sample::<f64>();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::<f64>::load(&path).unwrap(), c);
    }

    #[test]
    fn header_layout() {
        let bytes = sample::<f32>().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"RFMRCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(peek_dtype(&bytes).unwrap(), "f32");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample::<f32>().to_bytes().unwrap();
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut v = bytes.clone();
        v[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&v).is_err());
        let mut v = bytes;
        v[8] = 2;
        assert!(Checkpoint::<f32>::from_bytes(&v).is_err());
    }
}
