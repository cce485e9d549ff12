//! Dataset ingestion, tokenization, vocabulary and the synthetic
//! biography generator.

mod synth;
mod tokenize;
mod vocab;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{generate_synthetic, Profession, SynthConfig, PROFESSIONS};
pub use tokenize::{detokenize, tokenize, TokenSequence};
pub use vocab::{Vocabulary, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub text: String,
    pub tokens: TokenSequence,
    pub task_label: usize,
    pub bias_label: usize,
    /// Ground-truth positions of gendered tokens, present for synthetic data.
    pub gendered_token_indices: Option<Vec<usize>>,
}

/// Class-name tables. Ids are positions in these lists; they come from a
/// config file so that every split agrees on them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMaps {
    pub gender: Vec<String>,
    pub profession: Vec<String>,
}

impl LabelMaps {
    pub fn num_task_classes(&self) -> usize {
        self.profession.len()
    }

    pub fn num_bias_classes(&self) -> usize {
        self.gender.len()
    }

    pub fn gender_id(&self, label: &str) -> Result<usize> {
        position(&self.gender, label).ok_or_else(|| Error::UnknownLabel {
            kind: "gender",
            label: label.into(),
        })
    }

    pub fn profession_id(&self, label: &str) -> Result<usize> {
        position(&self.profession, label).ok_or_else(|| Error::UnknownLabel {
            kind: "profession",
            label: label.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn position(list: &[String], label: &str) -> Option<usize> {
    list.iter().position(|l| l == label)
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub gender: String,
    pub profession: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gendered_token_indices: Option<Vec<usize>>,
}

/// Reads a JSONL corpus. Malformed records fail the whole load with the
/// offending line number.
pub fn load_corpus(path: &Path, labels: &LabelMaps) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path)?;
    let mut corpus = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| Error::Record {
            path: path.to_owned(),
            line: lineno,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| record_err(format!("invalid JSON: {e}")))?;
        for field in ["text", "gender", "profession"] {
            if !value.get(field).is_some_and(serde_json::Value::is_string) {
                return Err(record_err(format!("missing string field \"{field}\"")));
            }
        }
        let record: Record =
            serde_json::from_value(value).map_err(|e| record_err(e.to_string()))?;
        let tokens = tokenize(&record.text).map_err(|e| record_err(e.to_string()))?;
        let example = Example {
            task_label: labels.profession_id(&record.profession)?,
            bias_label: labels.gender_id(&record.gender)?,
            tokens,
            text: record.text,
            gendered_token_indices: record.gendered_token_indices,
        };
        corpus.push(example);
    }
    if corpus.is_empty() {
        log::warn!("corpus {} is empty", path.display());
    }
    Ok(corpus)
}

pub fn write_corpus(path: &Path, corpus: &[Example], labels: &LabelMaps) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in corpus {
        let record = Record {
            text: ex.text.clone(),
            gender: labels.gender[ex.bias_label].clone(),
            profession: labels.profession[ex.task_label].clone(),
            gendered_token_indices: ex.gendered_token_indices.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Seeded shuffle followed by a contiguous partition.
pub fn split_corpus(corpus: &[Example], ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (r_train, r_valid, r_test) = ratios;
    if [r_train, r_valid, r_test].iter().any(|&r| !(r > 0.0)) {
        return Err(Error::Config(format!("split ratios must be positive: {ratios:?}")));
    }
    if (r_train + r_valid + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1: {ratios:?}")));
    }
    let n = corpus.len();
    if n < 3 {
        return Err(Error::Data(format!("cannot split a corpus of {n} examples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_train = ((r_train * n as f64).round() as usize).clamp(1, n - 2);
    let n_valid = ((r_valid * n as f64).round() as usize).clamp(1, n - n_train - 1);
    let pick = |ids: &[usize]| ids.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        train: pick(&order[..n_train]),
        valid: pick(&order[n_train..n_train + n_valid]),
        test: pick(&order[n_train + n_valid..]),
    })
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn labels() -> LabelMaps {
        LabelMaps {
            gender: vec!["female".into(), "male".into()],
            profession: vec!["nurse".into(), "model".into()],
        }
    }

    fn write(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_a_record() {
        let f = write(&[r#"{"text":"She is a nurse.","gender":"female","profession":"nurse"}"#]);
        let corpus = load_corpus(f.path(), &labels()).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus[0].tokens.tokens, ["she", "is", "a", "nurse", "."]);
        assert_eq!(corpus[0].bias_label, 0);
        assert_eq!(corpus[0].task_label, 0);
    }

    #[test]
    fn empty_file_is_an_empty_corpus() {
        let f = write(&[]);
        assert!(load_corpus(f.path(), &labels()).unwrap().is_empty());
    }

    #[test]
    fn missing_field_names_line_and_field() {
        let f = write(&[r#"{"text":"She is a nurse.","gender":"female"}"#]);
        let err = load_corpus(f.path(), &labels()).unwrap_err();
        match &err {
            Error::Record { line, message, .. } => {
                assert_eq!(*line, 1);
                assert!(message.contains("profession"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_label_is_a_label_error() {
        let f = write(&[r#"{"text":"He cooks.","gender":"male","profession":"chef"}"#]);
        assert!(matches!(
            load_corpus(f.path(), &labels()),
            Err(Error::UnknownLabel { kind: "profession", .. })
        ));
    }

    fn numbered(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                text: format!("w{i}"),
                tokens: tokenize(&format!("w{i}")).unwrap(),
                task_label: 0,
                bias_label: 0,
                gendered_token_indices: None,
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let corpus = numbered(10);
        let s = split_corpus(&corpus, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<String> = s
            .train
            .iter()
            .chain(&s.valid)
            .chain(&s.test)
            .map(|e| e.text.clone())
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn split_is_deterministic() {
        let corpus = numbered(50);
        assert_eq!(
            split_corpus(&corpus, (0.8, 0.1, 0.1), 9).unwrap(),
            split_corpus(&corpus, (0.8, 0.1, 0.1), 9).unwrap()
        );
    }

    #[test]
    fn split_rejects_bad_input() {
        let corpus = numbered(10);
        assert!(split_corpus(&corpus, (0.5, 0.5, 0.5), 0).is_err());
        assert!(split_corpus(&corpus, (1.0, 0.0, 0.0), 0).is_err());
        assert!(split_corpus(&numbered(2), (0.8, 0.1, 0.1), 0).is_err());
    }
}
