//! Few-shot prompt construction for completion-service parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{format_labels, Label};
use crate::corpus::{tokenize, TokenSequence};
use crate::error::{Error, Result};

pub const DEFAULT_INSTRUCTION: &str = "Assign High/Low/NA for each input token given bias and feedback.";

pub const DEFAULT_TEMPLATE: &str = include_str!("../../data/prompt_template.txt");

const DEFAULT_DEMOS: &str = include_str!("../../data/prompt_demos.jsonl");

pub const ALLOWED_SHOTS: [usize; 3] = [5, 10, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub input: String,
    pub bias: String,
    pub feedback: String,
    pub parse: Vec<Label>,
}

impl Demonstration {
    fn validate(&self) -> Result<()> {
        let n = tokenize(&self.input)?.len();
        if n != self.parse.len() {
            return Err(Error::Config(format!(
                "demonstration {:?} has {n} tokens but {} labels",
                self.input,
                self.parse.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptConfig {
    pub instruction: String,
    pub template: String,
    pub demonstrations: Vec<Demonstration>,
    pub bias_variable: String,
}

impl PromptConfig {
    pub fn new(demonstrations: Vec<Demonstration>, bias_variable: impl Into<String>) -> Result<Self> {
        let config = Self {
            instruction: DEFAULT_INSTRUCTION.to_owned(),
            template: DEFAULT_TEMPLATE.to_owned(),
            demonstrations,
            bias_variable: bias_variable.into(),
        };
        config.validate()?;
        Ok(config)
    }

    /// The first `k` bundled demonstrations.
    pub fn bundled(k: usize) -> Result<Self> {
        let demos = parse_demonstrations(DEFAULT_DEMOS)?;
        if k > demos.len() {
            return Err(Error::Config(format!("only {} bundled demonstrations", demos.len())));
        }
        Self::new(demos.into_iter().take(k).collect(), "gender")
    }

    pub fn load_demonstrations(path: &Path, k: usize) -> Result<Self> {
        let demos = parse_demonstrations(&std::fs::read_to_string(path)?)?;
        if k > demos.len() {
            return Err(Error::Config(format!("{} holds only {} demonstrations", path.display(), demos.len())));
        }
        Self::new(demos.into_iter().take(k).collect(), "gender")
    }

    pub fn with_template_file(mut self, path: &Path) -> Result<Self> {
        self.template = std::fs::read_to_string(path)?;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_SHOTS.contains(&self.demonstrations.len()) {
            return Err(Error::Config(format!(
                "prompt needs 5, 10 or 20 demonstrations, got {}",
                self.demonstrations.len()
            )));
        }
        for slot in ["{instruction}", "{demonstrations}", "{input}", "{bias}", "{feedback}"] {
            if !self.template.contains(slot) {
                return Err(Error::Config(format!("prompt template lacks {slot}")));
            }
        }
        self.demonstrations.iter().try_for_each(Demonstration::validate)
    }
}

fn parse_demonstrations(text: &str) -> Result<Vec<Demonstration>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn block(input: &str, bias: &str, feedback: &str) -> String {
    format!("[Input] {input}\n[Bias] {bias}\n[Feedback] {feedback}\n[Parse]")
}

/// Renders the prompt. The query block ends at `[Parse]` so the completion
/// continues with the label list.
pub fn build_prompt(config: &PromptConfig, input: &TokenSequence, feedback: &str) -> Result<String> {
    config.validate()?;
    let demos: String = config
        .demonstrations
        .iter()
        .map(|d| {
            let surfaces = tokenize(&d.input).map(|t| t.surfaces.join(" "))?;
            Ok(format!("{} {}\n\n", block(&surfaces, &d.bias, &d.feedback), format_labels(&d.parse)))
        })
        .collect::<Result<_>>()?;
    let prompt = config
        .template
        .replace("{instruction}", &config.instruction)
        .replace("{demonstrations}", &demos)
        .replace("{bias}", &config.bias_variable)
        .replace("{feedback}", feedback.trim())
        .replace("{input}", &input.surfaces.join(" "));
    Ok(prompt.trim_end().to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_demonstrations_are_well_formed() {
        let config = PromptConfig::bundled(20).unwrap();
        for d in &config.demonstrations {
            assert_eq!(tokenize(&d.input).unwrap().len(), d.parse.len(), "{}", d.input);
        }
    }

    #[test]
    fn k_blocks_before_query() {
        let input = tokenize("Angela Lindvall is a model and she represented several fashion houses .").unwrap();
        for k in ALLOWED_SHOTS {
            let prompt = build_prompt(&PromptConfig::bundled(k).unwrap(), &input, "ignore names").unwrap();
            assert_eq!(prompt.matches("[Input]").count(), k + 1);
            assert!(prompt.ends_with("[Parse]"));
            assert!(prompt.starts_with(DEFAULT_INSTRUCTION));
            let again = build_prompt(&PromptConfig::bundled(k).unwrap(), &input, "ignore names").unwrap();
            assert_eq!(prompt, again);
        }
    }

    #[test]
    fn rejects_bad_shot_counts_and_templates() {
        assert!(PromptConfig::bundled(7).is_err());
        let mut config = PromptConfig::bundled(5).unwrap();
        config.template = "{instruction} {input}".into();
        assert!(config.validate().is_err());
        let mut config = PromptConfig::bundled(5).unwrap();
        config.demonstrations[0].parse.pop();
        assert!(config.validate().is_err());
    }
}
