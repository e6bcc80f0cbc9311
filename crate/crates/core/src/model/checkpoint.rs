//! Checkpoint file: one JSON header line, then the flat parameter buffer as
//! little-endian `f64`.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{ModelConfig, ModelParams};
use super::vocab::Vocabulary;
use crate::{jsonl, Error, Result};

pub const FORMAT: &str = "qrw-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub n_params: usize,
    pub vocab_hash: String,
}

pub fn to_bytes(params: &ModelParams, vocab: &Vocabulary) -> Vec<u8> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        config: *params.config(),
        n_params: params.len(),
        vocab_hash: vocab.hash(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(params.len() * 8);
    for x in params.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn save(path: &Path, params: &ModelParams, vocab: &Vocabulary) -> Result<()> {
    jsonl::write_atomic(path, &to_bytes(params, vocab))
}

/// Loads a checkpoint and checks it was trained against `vocab`.
pub fn load(path: &Path, vocab: &Vocabulary) -> Result<ModelParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    if header.vocab_hash != vocab.hash() {
        return Err(Error::Checkpoint(format!(
            "{}: vocabulary hash mismatch",
            path.display()
        )));
    }
    if header.config.vocab_size != vocab.len() || header.config.n_params() != header.n_params {
        return Err(Error::Checkpoint(format!(
            "{}: inconsistent dimensions",
            path.display()
        )));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != header.n_params * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} parameter bytes, found {}",
            path.display(),
            header.n_params * 8,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ModelParams::from_vec(header.config, data)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::vocab::build_vocab;

    #[test]
    fn round_trip_and_vocab_check() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = build_vocab(["red dress", "blue coat"], 1).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 3,
            hidden_dim: 4,
        };
        let p = ModelParams::init(cfg, 9);
        let path = dir.path().join("model.ckpt");
        save(&path, &p, &vocab).unwrap();
        assert_eq!(load(&path, &vocab).unwrap(), p);

        let other = build_vocab(["green hat", "blue coat"], 1).unwrap();
        assert!(matches!(load(&path, &other), Err(Error::Checkpoint(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path, &vocab), Err(Error::Checkpoint(_))));
    }
}
