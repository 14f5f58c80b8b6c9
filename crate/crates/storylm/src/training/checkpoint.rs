//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, a little-endian u64 header length, a JSON header
//! (configs, stage history, embedded tokenizer, tensor manifest), then all
//! tensor buffers as contiguous little-endian f64 — model parameters in
//! visitor order followed by the Adam first and second moments. Serialization
//! is deterministic, so save → load → save reproduces the bytes exactly.

use super::{OptimizerState, Stage, TrainError, TrainingConfig};
use crate::derive_rng;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 8] = b"STORYLM1";
const FORMAT_VERSION: u32 = 1;

/// A complete training state: weights, optimizer, configuration, provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub opt: OptimizerState,
    pub train_config: TrainingConfig,
    pub stage_history: Vec<StageRecord>,
    /// Canonical JSON of the tokenizer this model was trained with.
    pub tokenizer_json: String,
}

impl Checkpoint {
    /// SHA-256 of the embedded tokenizer JSON.
    pub fn tokenizer_hash(&self) -> String {
        sha256_hex(self.tokenizer_json.as_bytes())
    }
}

/// One completed stage and how many epochs it ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model_config: ModelConfig,
    train_config: TrainingConfig,
    stage_history: Vec<StageRecord>,
    tokenizer_sha256: String,
    tokenizer: String,
    opt_step: u64,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn ordered_tensors(ckpt: &Checkpoint) -> (Vec<TensorMeta>, Vec<&Tensor>) {
    let mut metas = Vec::new();
    let mut tensors: Vec<&Tensor> = Vec::new();
    ckpt.model.for_each_tensor(&mut |name, t| {
        metas.push(TensorMeta {
            name,
            shape: t.shape().to_vec(),
        });
        tensors.push(t);
    });
    let names: Vec<String> = metas.iter().map(|m| m.name.clone()).collect();
    for (prefix, moments) in [("adam.m.", &ckpt.opt.m), ("adam.v.", &ckpt.opt.v)] {
        for (name, t) in names.iter().zip(moments.iter()) {
            metas.push(TensorMeta {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
            });
            tensors.push(t);
        }
    }
    (metas, tensors)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let (metas, tensors) = ordered_tensors(ckpt);
    let header = Header {
        version: FORMAT_VERSION,
        model_config: ckpt.model.config.clone(),
        train_config: ckpt.train_config.clone(),
        stage_history: ckpt.stage_history.clone(),
        tokenizer_sha256: ckpt.tokenizer_hash(),
        tokenizer: ckpt.tokenizer_json.clone(),
        opt_step: ckpt.opt.step,
        tensors: metas,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let payload_len: usize = tensors.iter().map(|t| t.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path)?;
    let corrupt = |msg: &str| TrainError::Checkpoint(format!("{}: {msg}", path.display()));

    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + header_len {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| corrupt(&format!("unreadable header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "{}: format version {} but this build reads {}",
            path.display(),
            header.version,
            FORMAT_VERSION
        )));
    }
    if sha256_hex(header.tokenizer.as_bytes()) != header.tokenizer_sha256 {
        return Err(corrupt("embedded tokenizer does not match its hash"));
    }

    let expected: usize = header
        .tensors
        .iter()
        .map(|m| m.shape.iter().product::<usize>() * 8)
        .sum();
    let payload = &bytes[16 + header_len..];
    if payload.len() != expected {
        return Err(corrupt(&format!(
            "payload is {} bytes, manifest expects {expected}",
            payload.len()
        )));
    }

    let mut offset = 0usize;
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let start = offset + i * 8;
            data.push(f64::from_le_bytes(
                payload[start..start + 8].try_into().expect("8 bytes"),
            ));
        }
        offset += n * 8;
        let t = Tensor::new(meta.shape.clone(), data)
            .map_err(|e| corrupt(&format!("tensor {}: {e}", meta.name)))?;
        loaded.push((meta.name.clone(), t));
    }

    // Rebuild the parameter struct by assigning in visitor order.
    let mut model = ModelParams::init(
        header.model_config.clone(),
        &mut derive_rng(0, "checkpoint-load", 0),
    )?;
    let expected_names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let n_params = expected_names.len();
    if loaded.len() != n_params * 3 {
        return Err(corrupt(&format!(
            "manifest holds {} tensors, model needs {}",
            loaded.len(),
            n_params * 3
        )));
    }
    for (i, name) in expected_names.iter().enumerate() {
        if &loaded[i].0 != name
            || loaded[n_params + i].0 != format!("adam.m.{name}")
            || loaded[2 * n_params + i].0 != format!("adam.v.{name}")
        {
            return Err(corrupt(&format!("tensor order mismatch at {name}")));
        }
    }

    let mut idx = 0usize;
    let mut assign_err: Option<TrainError> = None;
    model.for_each_tensor_mut(&mut |t| {
        let (name, value) = &loaded[idx];
        if value.shape() == t.shape() {
            *t = value.clone().with_requires_grad(true);
        } else if assign_err.is_none() {
            assign_err = Some(TrainError::Checkpoint(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                value.shape(),
                t.shape()
            )));
        }
        idx += 1;
    });
    if let Some(e) = assign_err {
        return Err(e);
    }

    let m = loaded[n_params..2 * n_params]
        .iter()
        .map(|(_, t)| t.clone())
        .collect();
    let v = loaded[2 * n_params..]
        .iter()
        .map(|(_, t)| t.clone())
        .collect();

    Ok(Checkpoint {
        model,
        opt: OptimizerState {
            step: header.opt_step,
            m,
            v,
        },
        train_config: header.train_config,
        stage_history: header.stage_history,
        tokenizer_json: header.tokenizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::Tokenizer;

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let config = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 270,
            max_seq_len: 16,
            ..ModelConfig::default()
        };
        let model = ModelParams::init(config, &mut derive_rng(seed, "ckpt-test", 0)).unwrap();
        let opt = OptimizerState::new(&model);
        let tok = Tokenizer::train(&["ab ab ab"], 265).unwrap();
        Checkpoint {
            model,
            opt,
            train_config: TrainingConfig::default(),
            stage_history: vec![StageRecord {
                stage: Stage::Pretrain,
                epochs: 3,
            }],
            tokenizer_json: tok.to_json(),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = sample_checkpoint(1);
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_model_reproduces_forward_pass() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample_checkpoint(2);
        let probe: Vec<u32> = vec![3, 1, 4, 1, 5];
        let before = crate::model::forward_lm(&ckpt.model, &probe).unwrap();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let after = crate::model::forward_lm(&loaded.model, &probe).unwrap();
        assert_eq!(before.logits.data(), after.logits.data());
        assert_eq!(loaded.stage_history, ckpt.stage_history);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let ckpt = sample_checkpoint(3);
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::Checkpoint(_))
        ));
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::Checkpoint(_))
        ));

        let ckpt = sample_checkpoint(4);
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Bump the version field inside the JSON header.
        let header_len =
            u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
        let bumped = header.replacen("\"version\":1", "\"version\":9", 1);
        assert_ne!(header, bumped);
        bytes.splice(16..16 + header_len, bumped.into_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
