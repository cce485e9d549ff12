//! Versioned binary checkpoints.
//!
//! Layout: magic `IFCK`, little-endian `u16` version, little-endian `u32`
//! header length, UTF-8 JSON header, then the parameters as little-endian
//! `f32` in [`super::Layout`] order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dims, ModelBundle};
use crate::error::{Error, Result};
use crate::rationale::Objective;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    objective: Objective,
    vocab_size: usize,
    embed: usize,
    hidden: usize,
    classes: usize,
    vocab_hash: String,
    stretch_lower: f64,
    stretch_upper: f64,
    param_count: usize,
}

pub fn encode_checkpoint(model: &ModelBundle) -> Result<Vec<u8>> {
    let header = Header {
        objective: model.objective,
        vocab_size: model.dims.vocab_size,
        embed: model.dims.embed,
        hidden: model.dims.hidden,
        classes: model.dims.classes,
        vocab_hash: model.vocab_hash.clone(),
        stretch_lower: model.stretch_lower,
        stretch_upper: model.stretch_upper,
        param_count: model.params().len(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(10 + header.len() + 4 * model.params().len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &p in model.params() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let header_end = 10usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or(Error::CheckpointTruncated {
            expected: header_len,
            found: bytes.len().saturating_sub(10),
        })?;
    let header: Header = serde_json::from_slice(&bytes[10..header_end])
        .map_err(|e| Error::CheckpointFormat(format!("bad header: {e}")))?;
    let dims = Dims {
        vocab_size: header.vocab_size,
        embed: header.embed,
        hidden: header.hidden,
        classes: header.classes,
    };
    if dims.param_count() != header.param_count {
        return Err(Error::CheckpointShape(format!(
            "header declares {} parameters, dimensions imply {}",
            header.param_count,
            dims.param_count()
        )));
    }
    let payload = &bytes[header_end..];
    let expected = 4 * header.param_count;
    if payload.len() != expected {
        return Err(if payload.len() < expected {
            Error::CheckpointTruncated {
                expected,
                found: payload.len(),
            }
        } else {
            Error::CheckpointFormat(format!("{} trailing bytes", payload.len() - expected))
        });
    }
    let params: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::CheckpointFormat("non-finite parameter".into()));
    }
    ModelBundle::from_parts(
        header.objective,
        dims,
        (header.stretch_lower, header.stretch_upper),
        header.vocab_hash,
        params,
    )
}

pub fn save_checkpoint(model: &ModelBundle, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Example, Vocabulary};

    fn model() -> ModelBundle {
        let dims = Dims { vocab_size: 9, embed: 3, hidden: 4, classes: 2 };
        ModelBundle::init(Objective::Task, dims, "abc", 21).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert!(back.params().iter().zip(m.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut bytes = encode_checkpoint(&model()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_checkpoint(&model()).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
    }

    #[test]
    fn truncation() {
        let bytes = encode_checkpoint(&model()).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::CheckpointTruncated { .. })
        ));
    }

    #[test]
    fn vocabulary_size_mismatch_is_a_shape_error() {
        let text = "a b c";
        let vocab = Vocabulary::build(
            &[Example {
                text: text.into(),
                tokens: tokenize(text).unwrap(),
                task_label: 0,
                bias_label: 0,
                gendered_token_indices: None,
            }],
            1,
        );
        let m = decode_checkpoint(&encode_checkpoint(&model()).unwrap()).unwrap();
        assert!(matches!(m.ensure_vocab(&vocab), Err(Error::CheckpointShape(_))));
    }
}
