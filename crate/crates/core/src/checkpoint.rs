//! Self-describing checkpoint files.
//!
//! Layout: one line of JSON header, then raw little-endian `f64` blocks for
//! every parameter tensor, every first moment and every second moment, each
//! group in [`ParamId::ALL`] order. The header carries a SHA-256 of the
//! payload so truncation and bit rot are detected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Vocab;
use crate::params::{AdamConfig, AdamState, ModelDims, ModelParams, ParamId};
use crate::relational::RelationSchema;
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "relrec-checkpoint";

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub vocab: Vocab,
    pub schema: RelationSchema,
    pub config: TrainConfig,
    /// Relation the prediction head was trained for.
    pub target_relation: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    dims: ModelDims,
    config: TrainConfig,
    relations: Vec<String>,
    target_relation: Option<usize>,
    vocab_sha256: String,
    vocab: Vec<String>,
    adam: AdamConfig,
    adam_steps: Vec<u64>,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let groups = [
            ParamId::ALL.iter().map(|&id| self.params.tensor(id)).collect::<Vec<_>>(),
            self.adam.first.iter().collect(),
            self.adam.second.iter().collect(),
        ];
        for group in &groups {
            for t in group {
                for x in t.data() {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let header = Header {
            format: FORMAT_TAG.into(),
            version: CHECKPOINT_VERSION,
            dims: self.params.dims,
            config: self.config.clone(),
            relations: self.schema.names().to_vec(),
            target_relation: self.target_relation,
            vocab_sha256: self.vocab.fingerprint(),
            vocab: self.vocab.terms().to_vec(),
            adam: self.adam.config,
            adam_steps: self.adam.steps.clone(),
            tensors: ParamId::ALL
                .iter()
                .map(|&id| {
                    let (rows, cols) = self.params.tensor(id).shape();
                    TensorEntry {
                        name: id.name().into(),
                        rows,
                        cols,
                    }
                })
                .collect(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let mut out = serde_json::to_vec(&header).expect("header serialises");
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_owned());
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing header line"))?;
        let (head, payload) = (&bytes[..newline], &bytes[newline + 1..]);
        let raw: serde_json::Value =
            serde_json::from_slice(head).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT_TAG) {
            return Err(corrupt("not a relrec checkpoint"));
        }
        let found = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("missing version"))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::CheckpointVersion {
                expected: CHECKPOINT_VERSION,
                found: u32::try_from(found).unwrap_or(u32::MAX),
            });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let vocab = Vocab::from(header.vocab);
        if vocab.fingerprint() != header.vocab_sha256 {
            return Err(corrupt("vocabulary hash mismatch"));
        }
        let schema = RelationSchema::new(header.relations)?;
        header.dims.validate()?;
        if schema.n_rel() != header.dims.n_rel {
            return Err(corrupt("relation count disagrees with dimensions"));
        }

        let mut params = ModelParams::zeros(header.dims, vocab.len());
        if header.tensors.len() != ParamId::ALL.len() || header.adam_steps.len() != ParamId::ALL.len() {
            return Err(corrupt("tensor table has the wrong length"));
        }
        for (entry, id) in header.tensors.iter().zip(ParamId::ALL) {
            if entry.name != id.name() || (entry.rows, entry.cols) != params.tensor(id).shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor table entry `{}` {}×{} does not match `{}` {:?}",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    id.name(),
                    params.tensor(id).shape()
                )));
            }
        }
        let per_group: usize = ParamId::ALL.iter().map(|&id| params.tensor(id).len()).sum();
        if payload.len() != 3 * per_group * 8 {
            return Err(Error::CorruptCheckpoint(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                3 * per_group * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let mut read = |shape: (usize, usize)| Tensor::from_vec(shape.0, shape.1, values.by_ref().take(shape.0 * shape.1).collect());
        for id in ParamId::ALL {
            let t = read(params.tensor(id).shape());
            *params.tensor_mut(id) = t;
        }
        let first: Vec<Tensor> = ParamId::ALL.iter().map(|&id| read(params.tensor(id).shape())).collect();
        let second: Vec<Tensor> = ParamId::ALL.iter().map(|&id| read(params.tensor(id).shape())).collect();
        if !params.is_finite() {
            return Err(corrupt("non-finite parameter values"));
        }
        Ok(Checkpoint {
            params,
            adam: AdamState {
                config: header.adam,
                first,
                second,
                steps: header.adam_steps,
            },
            vocab,
            schema,
            config: header.config,
            target_relation: header.target_relation,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let vocab = Vocab::from(vec!["a".to_owned(), "b".into(), "c".into()]);
        let schema = RelationSchema::new(vec!["treats".into()]).unwrap();
        let params = ModelParams::init(ModelDims::new(4, 1), 3, 5).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        adam.steps[0] = 7;
        adam.first[0].data_mut()[1] = 0.125;
        Checkpoint {
            params,
            adam,
            vocab,
            schema,
            config: TrainConfig::default(),
            target_relation: Some(0),
        }
    }

    #[test]
    fn round_trip_is_exact_and_idempotent() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn wrong_version_is_reported() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":99", 1);
        let err = Checkpoint::from_bytes(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { expected: 1, found: 99 }), "{err}");
    }

    #[test]
    fn flipped_payload_bit_is_detected() {
        let mut bytes = sample().to_bytes();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn truncation_and_garbage_are_detected() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"hello"), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"{\"format\":\"x\"}\n"), Err(Error::CorruptCheckpoint(_))));
    }
}
