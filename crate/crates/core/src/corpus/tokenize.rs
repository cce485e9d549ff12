use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A tokenized input: lowercased tokens, their original surfaces and
/// vocabulary ids, all index-aligned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub surfaces: Vec<String>,
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Builds a sequence directly from ids, mostly useful in tests.
    pub fn from_ids(ids: Vec<usize>) -> Self {
        let tokens: Vec<String> = ids.iter().map(|i| format!("t{i}")).collect();
        Self {
            surfaces: tokens.clone(),
            tokens,
            ids,
        }
    }
}

/// Splits on whitespace and punctuation boundaries. Every punctuation
/// character becomes its own token; word tokens are lowercased while the
/// original surface is kept. Ids are initialised to UNK until a vocabulary
/// assigns them.
pub fn tokenize(text: &str) -> Result<TokenSequence> {
    let mut surfaces = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.push(ch);
            continue;
        }
        if !current.is_empty() {
            surfaces.push(std::mem::take(&mut current));
        }
        if !ch.is_whitespace() {
            surfaces.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        surfaces.push(current);
    }
    if surfaces.is_empty() {
        return Err(Error::EmptyInput);
    }
    let tokens: Vec<String> = surfaces.iter().map(|s| s.to_lowercase()).collect();
    let ids = vec![super::vocab::UNK; tokens.len()];
    Ok(TokenSequence {
        tokens,
        surfaces,
        ids,
    })
}

/// Joins surfaces back into readable text, attaching punctuation to the
/// preceding word. `tokenize(detokenize(s))` reproduces `s`.
pub fn detokenize(surfaces: &[impl AsRef<str>]) -> String {
    let mut out = String::new();
    for (i, s) in surfaces.iter().enumerate() {
        let s = s.as_ref();
        let is_punct = s.chars().all(|c| !c.is_alphanumeric());
        if i > 0 && !is_punct {
            out.push(' ');
        }
        out.push_str(s);
    }
    out
}
