//! Natural-language feedback: parsing into per-token High/Low/NA labels,
//! conversion to user bias probabilities, smoothing, and the overlay onto
//! task energies.

mod external;
mod grammar;
mod overlay;
mod prompt;

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

pub use external::{parse_completion, CompletionClient, ExternalParser, HttpCompletionClient, ENDPOINT_ENV, TOKEN_ENV};
pub use grammar::GrammarParser;
pub use overlay::{
    labels_to_user_probs, overlay_and_repredict, smooth_bias_probs, user_prob_mode, user_prob_modes, Coarse,
    Fine, OverlayResult, UserProbMode,
};
pub use prompt::{build_prompt, Demonstration, PromptConfig, DEFAULT_INSTRUCTION, DEFAULT_TEMPLATE};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    High,
    Low,
    #[serde(rename = "NA")]
    Na,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::High => "High",
            Label::Low => "Low",
            Label::Na => "NA",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    /// Case-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(Label::High),
            "low" => Ok(Label::Low),
            "na" | "n/a" => Ok(Label::Na),
            other => Err(Error::Data(format!("unknown parse label {other:?}"))),
        }
    }
}

pub fn format_labels(labels: &[Label]) -> String {
    labels.iter().map(Label::to_string).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseSource {
    Grammar,
    External,
}

/// Per-token parse. `confidence[i]` is `P(label = High)` for High/Low
/// tokens and `None` for NA tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackParse {
    pub labels: Vec<Label>,
    pub confidence: Vec<Option<f64>>,
    pub source: ParseSource,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FeedbackParse {
    pub fn all_na(n: usize, source: ParseSource) -> Self {
        Self {
            labels: vec![Label::Na; n],
            confidence: vec![None; n],
            source,
            warnings: Vec::new(),
        }
    }

    /// Checks the label/confidence invariants.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.labels.len() != n || self.confidence.len() != n {
            return Err(Error::Data(format!(
                "parse has {} labels and {} confidences for {n} tokens",
                self.labels.len(),
                self.confidence.len()
            )));
        }
        for (i, (label, conf)) in self.labels.iter().zip(&self.confidence).enumerate() {
            let ok = match (label, conf) {
                (Label::Na, None) => true,
                (Label::High, Some(c)) => (0.5..=1.0).contains(c),
                (Label::Low, Some(c)) => (0.0..0.5).contains(c),
                _ => false,
            };
            if !ok {
                return Err(Error::Data(format!("token {i}: label {label} with confidence {conf:?}")));
            }
        }
        Ok(())
    }
}

pub trait FeedbackParser: Send + Sync {
    fn name(&self) -> &'static str;

    fn parse(&self, feedback: &str, input: &TokenSequence, bias_variable: &str) -> Result<FeedbackParse>;
}

/// Parser strategies by name: `grammar`, and `external` (configured from
/// the environment).
pub fn parsers() -> &'static Registry<dyn FeedbackParser> {
    static REGISTRY: OnceLock<Registry<dyn FeedbackParser>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut reg: Registry<dyn FeedbackParser> = Registry::new("feedback parser");
        reg.register("grammar", |_| Ok(Box::new(GrammarParser::default())));
        reg.register("external", |_| Ok(Box::new(ExternalParser::from_env()?)));
        reg
    })
}

pub fn parser(spec: &str) -> Result<Box<dyn FeedbackParser>> {
    parsers().create(spec)
}

/// Runs `primary`; on failure falls back to the grammar parser and returns
/// a notice describing the fallback.
pub fn parse_with_fallback(
    primary: &dyn FeedbackParser,
    feedback: &str,
    input: &TokenSequence,
    bias_variable: &str,
) -> Result<(FeedbackParse, Option<String>)> {
    match primary.parse(feedback, input, bias_variable) {
        Ok(parse) => Ok((parse, None)),
        Err(err @ Error::ExternalParser(_)) => {
            let notice = format!("{err}; used the grammar parser instead");
            log::warn!("{notice}");
            let parse = GrammarParser::default().parse(feedback, input, bias_variable)?;
            Ok((parse, Some(notice)))
        }
        Err(other) => Err(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_parse_case_insensitively() {
        assert_eq!("HIGH".parse::<Label>().unwrap(), Label::High);
        assert_eq!(" low ".parse::<Label>().unwrap(), Label::Low);
        assert_eq!("na".parse::<Label>().unwrap(), Label::Na);
        assert!("maybe".parse::<Label>().is_err());
        assert_eq!(format_labels(&[Label::High, Label::Na]), "High, NA");
    }

    #[test]
    fn validate_checks_confidence_ranges() {
        let mut p = FeedbackParse::all_na(2, ParseSource::Grammar);
        assert!(p.validate(2).is_ok());
        assert!(p.validate(3).is_err());
        p.labels[0] = Label::High;
        assert!(p.validate(2).is_err());
        p.confidence[0] = Some(0.4);
        assert!(p.validate(2).is_err());
        p.confidence[0] = Some(0.9);
        assert!(p.validate(2).is_ok());
        p.labels[1] = Label::Low;
        p.confidence[1] = Some(0.5);
        assert!(p.validate(2).is_err());
    }

    #[test]
    fn registry_has_both_parsers() {
        let names: Vec<_> = parsers().names().collect();
        assert_eq!(names, ["external", "grammar"]);
        assert_eq!(parser("grammar").unwrap().name(), "grammar");
    }
}
