//! Wire types and the JSON error envelope.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use debias_core::engine::Engine;
use debias_core::feedback::Label;
use debias_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::session::{AppliedFeedback, Session};

pub const DEFAULT_MODE: &str = "coarse";
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_PARSER: &str = "grammar";

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct CreateSessionRequest {
    pub text: String,
    #[serde(default)]
    pub policy: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct FeedbackRequest {
    pub text: String,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub parser: Option<String>,
}

/// One input token, all arrays of the snapshot folded into a row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenView {
    pub index: usize,
    pub surface: String,
    pub task_prob: f64,
    pub task_energy: f64,
    pub bias_prob: f64,
    pub bias_energy: f64,
    pub task_prob_adj: f64,
    pub task_energy_adj: f64,
    pub in_rationale: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedback_label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProb {
    pub class: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub depth: usize,
    pub tokens: Vec<TokenView>,
    pub probabilities: Vec<ClassProb>,
    pub predicted_class: String,
    pub feedback: Option<AppliedFeedback>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub revision: u64,
    pub policy: String,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    pub state: StateView,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notices: Vec<String>,
}

impl SessionView {
    pub fn build(engine: &Engine, session: &Session, notices: Vec<String>) -> Self {
        let a = &session.analysis;
        let snap = session.current();
        let o = &snap.overlay;
        let labels = snap.feedback.as_ref().map(|f| &f.parse.labels);
        let tokens = (0..a.tokens.len())
            .map(|i| TokenView {
                index: i,
                surface: a.tokens.surfaces[i].clone(),
                task_prob: a.task.select_prob[i],
                task_energy: a.task.energy[i],
                bias_prob: o.bias_prob_new[i],
                bias_energy: o.bias_energy_new[i],
                task_prob_adj: o.task_prob_adj[i],
                task_energy_adj: o.task_energy_adj[i],
                in_rationale: o.mask[i],
                feedback_label: labels.map(|l| l[i]),
            })
            .collect();
        let probabilities: Vec<ClassProb> = o
            .prediction
            .iter()
            .enumerate()
            .map(|(k, &prob)| ClassProb {
                class: engine.task_class_name(k).to_owned(),
                prob,
            })
            .collect();
        let best = debias_core::evaluation::predicted_class(&o.prediction);
        Self {
            id: session.id.clone(),
            revision: session.revision,
            policy: session.policy.clone(),
            created_at_ms: session.created_at_ms,
            updated_at_ms: session.updated_at_ms,
            state: StateView {
                depth: session.depth(),
                tokens,
                probabilities,
                predicted_class: engine.task_class_name(best).to_owned(),
                feedback: snap.feedback.clone(),
            },
            notices,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_owned(),
                message: message.into(),
                detail: None,
            },
        }
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.body.detail = Some(detail);
        self
    }

    pub fn session_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no live session {id}"))
    }

    pub fn models_not_loaded() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "models_not_loaded", "no trained models are loaded")
    }
}

impl From<CoreError> for ApiError {
    fn from(err: CoreError) -> Self {
        let (status, code) = match &err {
            CoreError::EmptyInput => (StatusCode::BAD_REQUEST, "empty_input"),
            CoreError::UnparseableFeedback(_) => (StatusCode::BAD_REQUEST, "unparseable_feedback"),
            CoreError::UnknownStrategy { .. } => (StatusCode::BAD_REQUEST, "unknown_strategy"),
            CoreError::Config(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            CoreError::ExternalParser(_) => (StatusCode::BAD_GATEWAY, "external_parser"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
