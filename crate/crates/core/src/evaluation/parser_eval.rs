use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};
use crate::feedback::{FeedbackParser, Label};

const BUNDLED_GOLDEN: &str = include_str!("../../data/parser_golden.jsonl");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Iid,
    Compositional,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Iid => "IID",
            Split::Compositional => "compositional",
        })
    }
}

/// Number of maximal runs of non-NA labels.
pub fn contiguous_spans(labels: &[Label]) -> usize {
    let mut spans = 0;
    let mut inside = false;
    for &l in labels {
        let on = l != Label::Na;
        if on && !inside {
            spans += 1;
        }
        inside = on;
    }
    spans
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserEvalItem {
    pub input: String,
    pub bias: String,
    pub feedback: String,
    pub gold: Vec<Label>,
}

impl ParserEvalItem {
    /// One or two gold spans make an IID item; three or more, compositional.
    pub fn split(&self) -> Split {
        if contiguous_spans(&self.gold) <= 2 {
            Split::Iid
        } else {
            Split::Compositional
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParserEvalSet {
    pub items: Vec<ParserEvalItem>,
}

impl ParserEvalSet {
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let items = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Record {
                    path: "<parser eval set>".into(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    /// The authored golden suite shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_jsonl(BUNDLED_GOLDEN).expect("bundled golden parser set is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl SplitAccuracy {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserAccuracy {
    pub parser: String,
    pub iid: SplitAccuracy,
    pub compositional: SplitAccuracy,
    pub overall: SplitAccuracy,
    /// `(item index, reason)` for every mismatch.
    pub failures: Vec<(usize, String)>,
}

impl fmt::Display for ParserAccuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |s: &SplitAccuracy| s.accuracy().map_or("n/a".to_owned(), |a| format!("{:.1}", 100.0 * a));
        writeln!(f, "{:<12} {:>8} {:>8} {:>8}", "parser", "IID", "Comp", "Overall")?;
        write!(
            f,
            "{:<12} {:>8} {:>8} {:>8}",
            self.parser,
            pct(&self.iid),
            pct(&self.compositional),
            pct(&self.overall)
        )
    }
}

/// Exact-match accuracy per split. A parser error on an item counts as a miss.
pub fn parser_accuracy(parser: &dyn FeedbackParser, set: &ParserEvalSet) -> Result<ParserAccuracy> {
    if set.items.is_empty() {
        return Err(Error::Data("parser evaluation set is empty".into()));
    }
    let mut report = ParserAccuracy {
        parser: parser.name().to_owned(),
        iid: SplitAccuracy::default(),
        compositional: SplitAccuracy::default(),
        overall: SplitAccuracy::default(),
        failures: Vec::new(),
    };
    for (k, item) in set.items.iter().enumerate() {
        let input = tokenize(&item.input)?;
        if input.len() != item.gold.len() {
            return Err(Error::Data(format!(
                "item {k}: gold parse has {} labels for {} tokens",
                item.gold.len(),
                input.len()
            )));
        }
        let hit = match parser.parse(&item.feedback, &input, &item.bias) {
            Ok(parse) if parse.labels == item.gold => true,
            Ok(parse) => {
                report.failures.push((k, format!("got [{}]", crate::feedback::format_labels(&parse.labels))));
                false
            }
            Err(e) => {
                report.failures.push((k, e.to_string()));
                false
            }
        };
        let split = match item.split() {
            Split::Iid => &mut report.iid,
            Split::Compositional => &mut report.compositional,
        };
        for s in [split, &mut report.overall] {
            s.total += 1;
            s.correct += usize::from(hit);
        }
    }
    Ok(report)
}
