//! Parser backed by an external text-completion service.
//!
//! Request: `{"prompt", "max_tokens", "temperature": 0}`. Response:
//! `{"completion": "High, NA, ...", "label_scores": [{"High": .., "Low": .., "NA": ..}, ...]}`
//! where `label_scores` is optional and `text` is accepted for `completion`.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{FeedbackParse, FeedbackParser, Label, ParseSource, PromptConfig};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

pub const ENDPOINT_ENV: &str = "DEBIAS_PARSER_URL";
pub const TOKEN_ENV: &str = "DEBIAS_PARSER_TOKEN";
pub const TIMEOUT_ENV: &str = "DEBIAS_PARSER_TIMEOUT_SECS";

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Serialize)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub max_tokens: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CompletionResponse {
    #[serde(alias = "text")]
    pub completion: String,
    #[serde(default)]
    pub label_scores: Option<Vec<BTreeMap<String, f64>>>,
}

pub trait CompletionClient: Send + Sync {
    fn complete(&self, prompt: &str, max_tokens: usize) -> Result<CompletionResponse>;
}

#[derive(Debug, Clone)]
pub struct HttpCompletionClient {
    endpoint: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpCompletionClient {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::ExternalParser(format!("building HTTP client: {e}")))?;
        Ok(Self {
            endpoint: endpoint.into(),
            token,
            client,
        })
    }

    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| Error::ExternalParser(format!("{ENDPOINT_ENV} is not set")))?;
        let timeout = match std::env::var(TIMEOUT_ENV) {
            Ok(v) => Duration::from_secs_f64(
                v.parse::<f64>()
                    .ok()
                    .filter(|s| *s > 0.0)
                    .ok_or_else(|| Error::Config(format!("{TIMEOUT_ENV} must be a positive number")))?,
            ),
            Err(_) => DEFAULT_TIMEOUT,
        };
        Self::new(endpoint, std::env::var(TOKEN_ENV).ok(), timeout)
    }

    fn attempt(&self, body: &CompletionRequest<'_>) -> Result<CompletionResponse> {
        let mut request = self.client.post(&self.endpoint).json(body);
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let response = request
            .send()
            .map_err(|e| Error::ExternalParser(format!("request to {} failed: {e}", self.endpoint)))?;
        let status = response.status();
        if !status.is_success() {
            return Err(Error::ExternalParser(format!("completion service returned {status}")));
        }
        response
            .json()
            .map_err(|e| Error::ExternalParser(format!("malformed completion response: {e}")))
    }
}

impl CompletionClient for HttpCompletionClient {
    fn complete(&self, prompt: &str, max_tokens: usize) -> Result<CompletionResponse> {
        let body = CompletionRequest {
            prompt,
            max_tokens,
            temperature: 0.0,
        };
        self.attempt(&body).or_else(|first| {
            log::warn!("{first}; retrying once");
            self.attempt(&body)
        })
    }
}

pub struct ExternalParser {
    client: Box<dyn CompletionClient>,
    prompt: PromptConfig,
}

impl ExternalParser {
    pub fn new(client: Box<dyn CompletionClient>, prompt: PromptConfig) -> Self {
        Self { client, prompt }
    }

    /// HTTP client from the environment with the 10 bundled demonstrations.
    pub fn from_env() -> Result<Self> {
        Ok(Self::new(Box::new(HttpCompletionClient::from_env()?), PromptConfig::bundled(10)?))
    }
}

impl FeedbackParser for ExternalParser {
    fn name(&self) -> &'static str {
        "external"
    }

    fn parse(&self, feedback: &str, input: &TokenSequence, bias_variable: &str) -> Result<FeedbackParse> {
        let mut prompt = self.prompt.clone();
        prompt.bias_variable = bias_variable.to_owned();
        let text = super::build_prompt(&prompt, input, feedback)?;
        // Roughly three completion tokens per label ("High", ",", " ").
        let response = self.client.complete(&text, 4 * input.len() + 8)?;
        parse_completion(&response.completion, response.label_scores.as_deref(), input.len())
    }
}

/// Turns completion text into a parse over `n` tokens, padding with NA or
/// truncating as needed.
pub fn parse_completion(
    completion: &str,
    label_scores: Option<&[BTreeMap<String, f64>]>,
    n: usize,
) -> Result<FeedbackParse> {
    let line = completion.trim_start().lines().next().unwrap_or("").trim();
    if line.is_empty() {
        return Err(Error::ExternalParser("empty completion".into()));
    }
    let mut labels: Vec<Label> = line
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<Label>()
                .map_err(|_| Error::ExternalParser(format!("malformed completion label {s:?}")))
        })
        .collect::<Result<_>>()?;

    let mut warnings = Vec::new();
    if labels.len() != n {
        warnings.push(format!(
            "completion gave {} labels for {n} tokens; {}",
            labels.len(),
            if labels.len() > n { "truncated" } else { "padded with NA" }
        ));
        labels.resize(n, Label::Na);
    }

    let confidence = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let scored = label_scores.and_then(|s| s.get(i)).and_then(high_share);
            match label {
                Label::Na => None,
                Label::High => Some(scored.map_or(1.0, |c| c.max(0.5))),
                Label::Low => Some(scored.map_or(0.0, |c| c.min(0.5 - f64::EPSILON))),
            }
        })
        .collect();

    Ok(FeedbackParse {
        labels,
        confidence,
        source: ParseSource::External,
        warnings,
    })
}

/// `P(High) / (P(High) + P(Low))` from a score map with case-insensitive keys.
fn high_share(scores: &BTreeMap<String, f64>) -> Option<f64> {
    let get = |name: &str| {
        scores
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| *v)
            .filter(|v| v.is_finite() && *v >= 0.0)
    };
    let (high, low) = (get("high")?, get("low")?);
    (high + low > 0.0).then(|| high / (high + low))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::feedback::parse_with_fallback;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Canned(Result<CompletionResponse>, Arc<AtomicUsize>);

    impl CompletionClient for Canned {
        fn complete(&self, prompt: &str, _max_tokens: usize) -> Result<CompletionResponse> {
            assert!(prompt.ends_with("[Parse]"));
            self.1.fetch_add(1, Ordering::SeqCst);
            match &self.0 {
                Ok(r) => Ok(r.clone()),
                Err(e) => Err(Error::ExternalParser(e.to_string())),
            }
        }
    }

    fn canned(text: &str) -> ExternalParser {
        let response = CompletionResponse {
            completion: text.into(),
            label_scores: None,
        };
        ExternalParser::new(
            Box::new(Canned(Ok(response), Arc::default())),
            PromptConfig::bundled(5).unwrap(),
        )
    }

    #[test]
    fn table_row_completion() {
        let p = parse_completion("High, High, NA, NA, NA, NA, NA, NA", None, 8).unwrap();
        use Label::*;
        assert_eq!(p.labels, [High, High, Na, Na, Na, Na, Na, Na]);
        assert_eq!(p.confidence[0], Some(1.0));
        assert_eq!(p.confidence[2], None);
        assert!(p.warnings.is_empty());
        p.validate(8).unwrap();
    }

    #[test]
    fn short_and_long_completions_are_reconciled() {
        let p = parse_completion("high, low, na, NA, NA, NA", None, 8).unwrap();
        assert_eq!(p.labels.len(), 8);
        assert_eq!(p.labels[6..], [Label::Na, Label::Na]);
        assert_eq!(p.warnings.len(), 1);
        let p = parse_completion("High, High, High", None, 2).unwrap();
        assert_eq!(p.labels.len(), 2);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn continuation_lines_are_ignored() {
        let p = parse_completion(" High, NA\n\n[Input] something else", None, 2).unwrap();
        assert_eq!(p.labels, [Label::High, Label::Na]);
    }

    #[test]
    fn malformed_completions_fail() {
        assert!(matches!(parse_completion("", None, 3), Err(Error::ExternalParser(_))));
        assert!(matches!(parse_completion("High, maybe", None, 2), Err(Error::ExternalParser(_))));
    }

    #[test]
    fn scores_become_confidences_within_invariants() {
        let scores: Vec<BTreeMap<String, f64>> = vec![
            [("High".into(), 0.8), ("Low".into(), 0.2), ("NA".into(), 0.0)].into(),
            [("high".into(), 0.7), ("low".into(), 0.3)].into(),
            BTreeMap::new(),
        ];
        let p = parse_completion("High, Low, Low", Some(&scores), 3).unwrap();
        assert!((p.confidence[0].unwrap() - 0.8).abs() < 1e-12);
        assert!(p.confidence[1].unwrap() < 0.5);
        assert_eq!(p.confidence[2], Some(0.0));
        p.validate(3).unwrap();
    }

    #[test]
    fn parser_uses_client_and_falls_back() {
        let input = tokenize("she is a nurse").unwrap();
        let p = canned("High, NA, NA, NA").parse("ignore pronouns", &input, "gender").unwrap();
        assert_eq!(p.source, ParseSource::External);

        let calls = Arc::new(AtomicUsize::new(0));
        let failing = ExternalParser::new(
            Box::new(Canned(Err(Error::ExternalParser("timeout".into())), calls.clone())),
            PromptConfig::bundled(5).unwrap(),
        );
        let (p, notice) = parse_with_fallback(&failing, "ignore pronouns", &input, "gender").unwrap();
        assert_eq!(p.source, ParseSource::Grammar);
        assert_eq!(p.labels[0], Label::High);
        assert!(notice.unwrap().contains("grammar"));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn http_client_reports_unreachable_endpoint() {
        // Port 9 on localhost is closed in the sandbox; both attempts fail fast.
        let client = HttpCompletionClient::new("http://127.0.0.1:9/complete", None, Duration::from_millis(500)).unwrap();
        assert!(matches!(client.complete("x", 4), Err(Error::ExternalParser(_))));
    }
}
