//! Binary checkpoint format.
//!
//! ```text
//! b"MDPRIOR1" | u32 LE format version | u64 LE header length | JSON header | f64 LE payload
//! ```
//!
//! The header holds the model configuration, training metadata, optimizer
//! hyperparameters and an index of named tensors with their shapes and
//! element offsets into the payload.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NormativePrior, PriorConfig, TrainingMeta};
use crate::error::{Error, Result};
use crate::nn::Adam;

const MAGIC: &[u8; 8] = b"MDPRIOR1";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: PriorConfig,
    training: TrainingMeta,
    optimizer: Option<OptimizerHeader>,
    checksum: String,
    tensors: Vec<TensorEntry>,
}

impl NormativePrior {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, values: &[f64]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: payload.len(),
            });
            payload.extend_from_slice(values);
        };
        let named = self.named_params();
        for (name, shape, values) in &named {
            push(name.clone(), shape.clone(), values);
        }
        let optimizer = self.optimizer.as_ref().map(|adam| {
            for (i, (m, v)) in adam.first_moment.iter().zip(&adam.second_moment).enumerate() {
                push(format!("adam.m.{}", named[i].0), named[i].1.clone(), m);
                push(format!("adam.v.{}", named[i].0), named[i].1.clone(), v);
            }
            OptimizerHeader {
                learning_rate: adam.learning_rate,
                beta1: adam.beta1,
                beta2: adam.beta2,
                epsilon: adam.epsilon,
                step: adam.step,
            }
        });
        let header = Header {
            config: self.config.clone(),
            training: self.training.clone(),
            optimizer,
            checksum: self.checksum(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a prior checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {version} (expected {CHECKPOINT_FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let raw = &body[header_len..];
        if raw.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let payload: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let index: HashMap<&str, &TensorEntry> = header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let fetch = |name: &str, shape: &[usize]| -> Result<&[f64]> {
            let entry = index
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if entry.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    entry.shape
                )));
            }
            let len: usize = shape.iter().product();
            payload
                .get(entry.offset..entry.offset + len)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} exceeds payload")))
        };

        let mut model = NormativePrior::new(header.config.clone(), 0)?;
        let layout: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        for ((name, shape), dst) in layout.iter().zip(model.param_slices_mut()) {
            dst.copy_from_slice(fetch(name, shape)?);
        }
        model.training = header.training;
        if let Some(opt) = header.optimizer {
            let mut first_moment = Vec::with_capacity(layout.len());
            let mut second_moment = Vec::with_capacity(layout.len());
            for (name, shape) in &layout {
                first_moment.push(fetch(&format!("adam.m.{name}"), shape)?.to_vec());
                second_moment.push(fetch(&format!("adam.v.{name}"), shape)?.to_vec());
            }
            model.optimizer = Some(Adam {
                learning_rate: opt.learning_rate,
                beta1: opt.beta1,
                beta2: opt.beta2,
                epsilon: opt.epsilon,
                step: opt.step,
                first_moment,
                second_moment,
            });
        }
        if model.checksum() != header.checksum {
            return Err(bad("checksum mismatch"));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &NormativePrior, path: &Path) -> Result<()> {
    let bytes = model.to_checkpoint_bytes()?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NormativePrior> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    NormativePrior::from_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::super::PriorKind;
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut model = NormativePrior::new(tiny_config(PriorKind::Gmvae, 3), 9).unwrap();
        let shapes: Vec<usize> = model.named_params().iter().map(|p| p.2.len()).collect();
        let mut adam = Adam::new(0.01, &shapes);
        adam.step = 7;
        adam.first_moment[2][1] = 0.25;
        model.optimizer = Some(adam);
        model.training.epochs = 7;
        let bytes = model.to_checkpoint_bytes().unwrap();
        let back = NormativePrior::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.checksum(), model.checksum());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let model = NormativePrior::new(tiny_config(PriorKind::Vae, 1), 9).unwrap();
        let mut bytes = model.to_checkpoint_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = NormativePrior::from_checkpoint_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let model = NormativePrior::new(tiny_config(PriorKind::Vae, 1), 9).unwrap();
        let mut bytes = model.to_checkpoint_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(NormativePrior::from_checkpoint_bytes(&bytes).is_err());
        assert!(NormativePrior::from_checkpoint_bytes(b"garbage").is_err());
    }
}
