use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::tokenize;
use crate::{jsonl, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: Vec<String>,
}

/// Tokens with frequency ≥ `min_count`, ordered by (frequency desc, token asc)
/// after the four reserved ids.
pub fn build_vocab<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    min_count: usize,
) -> Result<Vocabulary> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut n_texts = 0;
    for text in corpus {
        n_texts += 1;
        for t in tokenize(text).into_vec() {
            *counts.entry(t).or_default() += 1;
        }
    }
    if n_texts == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocabulary::from_tokens(
        RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect(),
    ))
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins non-reserved tokens with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !Self::is_reserved(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(&VocabFile {
            tokens: self.tokens.clone(),
        })
        .expect("vocab serializes");
        jsonl::write_atomic(path, format!("{body}\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?;
        if file.tokens.len() < RESERVED.len()
            || file.tokens[..RESERVED.len()]
                .iter()
                .zip(RESERVED)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "missing reserved tokens".into(),
            });
        }
        Ok(Self::from_tokens(file.tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_count_and_ordering() {
        let v = build_vocab(["a a b"], 1).unwrap();
        assert_eq!(&v.tokens()[4..], ["a", "b"]);
        assert_eq!(v.len(), 6);
        let v2 = build_vocab(["a a b"], 2).unwrap();
        assert_eq!(&v2.tokens()[4..], ["a"]);
        assert_eq!(v2.id("b"), UNK);
        assert_eq!(build_vocab(["a a b"], 1).unwrap(), v);
        assert!(matches!(
            build_vocab(Vec::<&str>::new(), 1),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn ties_break_alphabetically() {
        let v = build_vocab(["zeta alpha", "mid"], 1).unwrap();
        assert_eq!(&v.tokens()[4..], ["alpha", "mid", "zeta"]);
        assert_eq!(v.decode(&[BOS, v.id("mid"), EOS]), "mid");
    }

    #[test]
    fn save_load() {
        let dir = tempfile::tempdir().unwrap();
        let v = build_vocab(["red dress", "blue dress"], 1).unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        let back = Vocabulary::load(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }
}
