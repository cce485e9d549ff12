use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use debias_core::corpus::{generate_synthetic, SynthConfig, TokenSequence, Vocabulary};
use debias_core::engine::Engine;
use debias_core::feedback::{FeedbackParse, FeedbackParser, Label};
use debias_core::model::{Dims, ModelBundle};
use debias_core::rationale::{mask_policy, Objective};
use debias_core::Error;
use debias_service::{router, AppState, ErrorBody, SessionView};
use serde_json::{json, Value};
use tower::ServiceExt;

const TABLE_INPUT: &str = "Angela Lindvall is a model and she represented several fashion houses in her career.";

fn engine() -> Engine {
    let config = SynthConfig { num_examples: 50, ..SynthConfig::default() };
    let corpus = generate_synthetic(&config).unwrap();
    let vocab = Vocabulary::build(&corpus, 1);
    let labels = config.label_maps();
    let dims = Dims { vocab_size: vocab.len(), embed: 4, hidden: 4, classes: labels.num_bias_classes() };
    let bias = ModelBundle::init(Objective::Bias, dims, vocab.hash(), 1).unwrap();
    let task_dims = Dims { classes: labels.num_task_classes(), ..dims };
    let task = ModelBundle::init(Objective::Task, task_dims, vocab.hash(), 2).unwrap();
    Engine::new(bias, task, vocab, labels, mask_policy("threshold:0.5").unwrap()).unwrap()
}

fn app() -> Router {
    router(AppState::new(Some(engine()), Duration::from_secs(3600)))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => builder.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn create(app: &Router, text: &str) -> SessionView {
    let (status, v) = call(app, "POST", "/v1/sessions", Some(json!({ "text": text }))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn feedback(app: &Router, id: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", &format!("/v1/sessions/{id}/feedback"), Some(body)).await
}

fn view(v: Value) -> SessionView {
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn create_returns_aligned_state_zero() {
    let app = app();
    let s = create(&app, TABLE_INPUT).await;
    assert_eq!(s.id.len(), 32);
    assert!(s.id.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(s.revision, 0);
    assert_eq!(s.state.depth, 0);
    assert_eq!(s.state.tokens.len(), 15);
    assert_eq!(s.state.tokens[1].surface, "Lindvall");
    let total: f64 = s.state.probabilities.iter().map(|c| c.prob).sum();
    assert!((total - 1.0).abs() < 1e-6);
    assert!(s.state.tokens.iter().any(|t| t.in_rationale));

    let again = create(&app, TABLE_INPUT).await;
    assert_ne!(again.id, s.id);
    assert_eq!(again.state, s.state);
}

#[tokio::test]
async fn table_feedback_round_trip_and_undo() {
    use Label::{High, Na};
    let app = app();
    let s = create(&app, TABLE_INPUT).await;
    let (status, v) = feedback(&app, &s.id, json!({ "text": "Angela Lindvall is a woman's name" })).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let after = view(v);
    assert_eq!(after.revision, 1);
    assert_eq!(after.state.depth, 1);
    let parse = &after.state.feedback.as_ref().unwrap().parse;
    assert_eq!(parse.labels[..8], [High, High, Na, Na, Na, Na, Na, Na]);
    assert_eq!(after.state.tokens[0].feedback_label, Some(High));
    assert!(after.state.tokens[0].task_energy_adj <= after.state.tokens[0].task_energy);

    let (_, v) = feedback(&app, &s.id, json!({ "text": "Don't use model, no gendered names or pronouns", "mode": "fine", "alpha": 0.2 })).await;
    let second = view(v);
    assert_eq!(second.state.feedback.as_ref().unwrap().parse.labels[..8], [High, High, Na, Na, High, Na, High, Na]);

    let (_, v) = call(&app, "POST", &format!("/v1/sessions/{}/undo", s.id), None).await;
    assert_eq!(view(v).state, after.state);
    let (_, v) = call(&app, "POST", &format!("/v1/sessions/{}/undo", s.id), None).await;
    let back = view(v);
    assert_eq!(back.state, s.state);
    assert_eq!(back.revision, 4);

    let (_, v) = call(&app, "POST", &format!("/v1/sessions/{}/undo", s.id), None).await;
    let noop = view(v);
    assert_eq!(noop.state, s.state);
    assert_eq!(noop.revision, 4);
    assert_eq!(noop.notices.len(), 1);

    // Re-applying after undo is bit-identical.
    let (_, v) = feedback(&app, &s.id, json!({ "text": "Angela Lindvall is a woman's name" })).await;
    assert_eq!(view(v).state, after.state);
}

#[tokio::test]
async fn alpha_one_keeps_prediction() {
    let app = app();
    let s = create(&app, TABLE_INPUT).await;
    let (_, v) = feedback(&app, &s.id, json!({ "text": "ignore pronouns", "alpha": 1.0 })).await;
    let v = view(v);
    assert_eq!(v.state.probabilities, s.state.probabilities);
    assert_eq!(
        v.state.tokens.iter().map(|t| t.in_rationale).collect::<Vec<_>>(),
        s.state.tokens.iter().map(|t| t.in_rationale).collect::<Vec<_>>()
    );
}

#[tokio::test]
async fn errors_use_the_envelope() {
    let app = app();
    let (status, v) = call(&app, "POST", "/v1/sessions", Some(json!({ "text": "   " }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_value::<ErrorBody>(v).unwrap().code, "empty_input");

    let (status, v) = call(&app, "GET", "/v1/sessions/deadbeef", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "session_not_found");
    let (status, _) = call(&app, "POST", "/v1/sessions/deadbeef/undo", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let s = create(&app, TABLE_INPUT).await;
    let (status, v) = feedback(&app, &s.id, json!({ "text": "looks great to me" })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "unparseable_feedback");
    let (_, v) = call(&app, "GET", &format!("/v1/sessions/{}", s.id), None).await;
    let unchanged = view(v);
    assert_eq!(unchanged.state, s.state);
    assert_eq!(unchanged.revision, 0);

    for bad in [json!({ "text": "ignore her", "alpha": 1.5 }), json!({ "text": "ignore her", "mode": "loud" }), json!({ "text": "ignore her", "parser": "oracle" }), json!({ "feedback": "x" })] {
        let (status, v) = feedback(&app, &s.id, bad.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad} -> {v}");
        assert!(v["message"].is_string());
    }
    let (status, v) = call(&app, "POST", "/v1/sessions", Some(json!({ "text": "she", "policy": "median" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
}

#[tokio::test]
async fn no_models_is_service_unavailable() {
    let app = router(AppState::new(None, Duration::from_secs(60)));
    let (status, v) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["models_loaded"], false);
    let (status, v) = call(&app, "POST", "/v1/sessions", Some(json!({ "text": "she is a nurse" }))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["code"], "models_not_loaded");
    let (status, _) = call(&app, "GET", "/v1/model/info", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn model_info_and_policy_override() {
    let app = app();
    let (status, v) = call(&app, "GET", "/v1/model/info", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["bias_variable"], "gender");
    assert_eq!(v["policy"], "threshold:0.5");
    assert_eq!(v["inference_tau"], 0.0);

    let (_, v) = call(&app, "POST", "/v1/sessions", Some(json!({ "text": TABLE_INPUT, "policy": "topk:0.25" }))).await;
    let s = view(v);
    assert_eq!(s.policy, "topk:0.25");
    assert_eq!(s.state.tokens.iter().filter(|t| t.in_rationale).count(), 4);
}

struct Failing;

impl FeedbackParser for Failing {
    fn name(&self) -> &'static str {
        "external"
    }

    fn parse(&self, _: &str, _: &TokenSequence, _: &str) -> debias_core::Result<FeedbackParse> {
        Err(Error::ExternalParser("connection refused".into()))
    }
}

#[tokio::test]
async fn external_failure_falls_back_with_notice() {
    let app = router(AppState::with_external_parser(Some(engine()), Duration::from_secs(60), Arc::new(Failing)));
    let s = create(&app, TABLE_INPUT).await;
    let (status, v) = feedback(&app, &s.id, json!({ "text": "ignore her", "parser": "external" })).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let v = view(v);
    assert!(v.notices.iter().any(|n| n.contains("grammar parser")));
    assert_eq!(v.state.tokens[12].feedback_label, Some(Label::High));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_are_serialized_per_session() {
    let app = app();
    let a = create(&app, TABLE_INPUT).await;
    let b = create(&app, "She is a nurse at the hospital.").await;
    let mut handles = Vec::new();
    for k in 0..16 {
        let app = app.clone();
        let id = if k % 2 == 0 { a.id.clone() } else { b.id.clone() };
        handles.push(tokio::spawn(async move {
            let (status, v) = feedback(&app, &id, json!({ "text": "ignore pronouns" })).await;
            assert_eq!(status, StatusCode::OK);
            let v = view(v);
            (v.id, v.revision, v.state.depth)
        }));
    }
    let mut seen: Vec<(String, u64, usize)> = Vec::new();
    for h in handles {
        seen.push(h.await.unwrap());
    }
    for id in [&a.id, &b.id] {
        let mut revs: Vec<u64> = seen.iter().filter(|s| &s.0 == id).map(|s| s.1).collect();
        revs.sort();
        assert_eq!(revs, (1..=8).collect::<Vec<_>>());
        assert!(seen.iter().filter(|s| &s.0 == id).all(|s| s.1 as usize == s.2));
    }
    let (_, v) = call(&app, "GET", &format!("/v1/sessions/{}", a.id), None).await;
    assert_eq!(view(v).state.depth, 8);
}

#[tokio::test]
async fn idle_sessions_expire_and_persist() {
    let state = AppState::new(Some(engine()), Duration::from_millis(50));
    let app = router(state.clone());
    let s = create(&app, TABLE_INPUT).await;
    feedback(&app, &s.id, json!({ "text": "ignore her" })).await;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sessions.json");
    assert_eq!(state.store().save(&path).await.unwrap(), 1);

    tokio::time::sleep(Duration::from_millis(120)).await;
    let (status, _) = call(&app, "GET", &format!("/v1/sessions/{}", s.id), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let restored = AppState::new(Some(engine()), Duration::from_secs(60));
    assert_eq!(restored.store().load(&path).unwrap(), 1);
    let app = router(restored);
    let (status, v) = call(&app, "GET", &format!("/v1/sessions/{}", s.id), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view(v).state.depth, 1);
}
