//! Session-oriented HTTP API over the inference engine.
//!
//! A session holds one analysed input and a stack of snapshots. Feedback
//! pushes a snapshot, undo pops one, and the bottom of the stack is the
//! model's own state before any feedback.

pub mod api;
pub mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use debias_core::engine::{Engine, BIAS_VARIABLE, INFERENCE_TAU};
use debias_core::feedback::{
    parse_with_fallback, parser as make_parser, parsers, user_prob_mode, user_prob_modes, FeedbackParse,
    FeedbackParser, GrammarParser,
};
use debias_core::rationale::mask_policy;
use serde_json::{json, Value};

pub use api::{ApiError, CreateSessionRequest, ErrorBody, FeedbackRequest, SessionView, StateView, TokenView};
pub use session::{AppliedFeedback, Session, SessionStore, Snapshot};

use api::{DEFAULT_ALPHA, DEFAULT_MODE, DEFAULT_PARSER};

pub const DEFAULT_TTL: Duration = Duration::from_secs(3600);

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub ttl: Duration,
    /// Sessions are restored from here at start-up and written back on
    /// shutdown.
    pub persist: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            ttl: DEFAULT_TTL,
            persist: None,
        }
    }
}

struct Inner {
    engine: Option<Engine>,
    store: SessionStore,
    /// Overrides the environment-configured external parser.
    external: Option<Arc<dyn FeedbackParser>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(engine: Option<Engine>, ttl: Duration) -> Self {
        Self(Arc::new(Inner {
            engine,
            store: SessionStore::new(ttl),
            external: None,
        }))
    }

    pub fn with_external_parser(engine: Option<Engine>, ttl: Duration, external: Arc<dyn FeedbackParser>) -> Self {
        Self(Arc::new(Inner {
            engine,
            store: SessionStore::new(ttl),
            external: Some(external),
        }))
    }

    pub fn store(&self) -> &SessionStore {
        &self.0.store
    }

    fn engine(&self) -> Result<&Engine, ApiError> {
        self.0.engine.as_ref().ok_or_else(ApiError::models_not_loaded)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/model/info", get(model_info))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/feedback", post(apply_feedback))
        .route("/v1/sessions/{id}/undo", post(undo))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

/// Binds, serves until Ctrl-C, then persists sessions if configured.
pub async fn serve(engine: Option<Engine>, config: ServiceConfig) -> Result<(), ServiceError> {
    let state = AppState::new(engine, config.ttl);
    if let Some(path) = config.persist.as_deref().filter(|p| p.exists()) {
        let n = state.store().load(path)?;
        log::info!("restored {n} sessions from {}", path.display());
    }
    let sweeper = {
        let state = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(60));
            loop {
                tick.tick().await;
                let n = state.store().evict_expired();
                if n > 0 {
                    log::info!("evicted {n} idle sessions");
                }
            }
        })
    };
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    sweeper.abort();
    if let Some(path) = &config.persist {
        let n = state.store().save(path).await?;
        log::info!("saved {n} sessions to {}", path.display());
    }
    Ok(())
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|rej| {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", rej.body_text())
            .with_detail(json!({ "status": rej.status().as_u16() }))
    })
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "models_loaded": state.0.engine.is_some(),
        "sessions": state.store().len(),
    }))
}

async fn model_info(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    let engine = state.engine()?;
    Ok(Json(json!({
        "bias_variable": BIAS_VARIABLE,
        "task_classes": engine.labels.profession,
        "bias_classes": engine.labels.gender,
        "vocab_size": engine.vocab.len(),
        "vocab_hash": engine.vocab.hash(),
        "task_dims": engine.task_model.dims,
        "bias_dims": engine.bias_model.dims,
        "stretch": [engine.task_model.stretch_lower, engine.task_model.stretch_upper],
        "policy": engine.policy.spec(),
        "inference_tau": INFERENCE_TAU,
        "parsers": parsers().names().collect::<Vec<_>>(),
        "modes": user_prob_modes().names().collect::<Vec<_>>(),
    })))
}

async fn create_session(
    State(state): State<AppState>,
    payload: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let req = body(payload)?;
    let engine = state.engine()?;
    let policy = match &req.policy {
        Some(spec) => mask_policy(spec)?,
        None => mask_policy(&engine.policy.spec())?,
    };
    let analysis = engine.analyze_text_with(&req.text, policy.as_ref())?;
    let session = Session::new(SessionStore::fresh_id(), analysis, policy.spec());
    let view = SessionView::build(engine, &session, Vec::new());
    state.store().insert(session);
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let engine = state.engine()?;
    let shared = state.store().get(&id).ok_or_else(|| ApiError::session_not_found(&id))?;
    let session = shared.lock().await;
    Ok(Json(SessionView::build(engine, &session, Vec::new())))
}

async fn apply_feedback(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<FeedbackRequest>, JsonRejection>,
) -> Result<Json<SessionView>, ApiError> {
    let req = body(payload)?;
    let engine = state.engine()?;
    let shared = state.store().get(&id).ok_or_else(|| ApiError::session_not_found(&id))?;
    let mode = req.mode.clone().unwrap_or_else(|| DEFAULT_MODE.to_owned());
    let alpha = req.alpha.unwrap_or(DEFAULT_ALPHA);
    let parser_name = req.parser.clone().unwrap_or_else(|| DEFAULT_PARSER.to_owned());
    user_prob_mode(&mode)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", format!("alpha must lie in [0, 1], got {alpha}")));
    }

    // Held until the snapshot is pushed, so one session sees one writer at a time.
    let mut session = shared.lock().await;
    let (parse, notice) = run_parser(&state, &parser_name, &req.text, &session).await?;
    let policy = mask_policy(&session.policy)?;
    let overlay = engine.apply_feedback_with(
        &session.analysis,
        &session.current().overlay.bias_prob_new,
        &parse,
        &mode,
        alpha,
        policy.as_ref(),
    )?;
    let mut notices: Vec<String> = notice.into_iter().collect();
    notices.extend(parse.warnings.iter().cloned());
    session.push(Snapshot {
        overlay,
        feedback: Some(AppliedFeedback {
            text: req.text,
            mode,
            alpha,
            parser: parser_name,
            parse,
        }),
    });
    Ok(Json(SessionView::build(engine, &session, notices)))
}

async fn run_parser(
    state: &AppState,
    name: &str,
    feedback: &str,
    session: &Session,
) -> Result<(FeedbackParse, Option<String>), ApiError> {
    let tokens = &session.analysis.tokens;
    match name {
        "grammar" => Ok((GrammarParser::default().parse(feedback, tokens, BIAS_VARIABLE)?, None)),
        "external" => {
            let injected = state.0.external.clone();
            let (feedback, tokens) = (feedback.to_owned(), tokens.clone());
            // The HTTP client blocks; keep it off the async workers.
            tokio::task::spawn_blocking(move || {
                let parser: Arc<dyn FeedbackParser> = match injected {
                    Some(p) => p,
                    None => match make_parser("external") {
                        Ok(p) => Arc::from(p),
                        Err(err) => {
                            let notice = format!("{err}; used the grammar parser instead");
                            log::warn!("{notice}");
                            let parse = GrammarParser::default().parse(&feedback, &tokens, BIAS_VARIABLE)?;
                            return Ok((parse, Some(notice)));
                        }
                    },
                };
                parse_with_fallback(parser.as_ref(), &feedback, &tokens, BIAS_VARIABLE)
            })
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
            .map_err(ApiError::from)
        }
        other => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "unknown_strategy",
            format!("unknown feedback parser {other:?}"),
        )),
    }
}

async fn undo(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let engine = state.engine()?;
    let shared = state.store().get(&id).ok_or_else(|| ApiError::session_not_found(&id))?;
    let mut session = shared.lock().await;
    let notices = if session.undo() {
        Vec::new()
    } else {
        vec!["already at the initial state; nothing to undo".to_owned()]
    };
    Ok(Json(SessionView::build(engine, &session, notices)))
}
