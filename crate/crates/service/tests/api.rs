use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::{Duration, TimeZone, Utc};
use http_body_util::BodyExt;
use prescribe_core::eventlog::{annotate, Attributes};
use prescribe_core::mdp::{build_mdp, save_mdp};
use prescribe_core::rl::{customary_policy, policy_iteration, save_policy, PolicyArtifact, PolicyIterationConfig};
use prescribe_core::scenarios::fines_spec;
use prescribe_core::scenarios::synthetic::{generate_synthetic_log, Template};
use prescribe_core::{Event, EventLog, Mdp, Trace, Value};
use prescribe_service::api::{router, AppState};
use prescribe_service::recommender::{ArtifactPaths, Snapshot};
use serde_json::{json, Value as Json};
use tower::ServiceExt;

fn fines_trace(case: &str, amount: i64, steps: &[(&str, i64)]) -> Trace {
    let t0 = Utc.with_ymd_and_hms(2021, 1, 13, 0, 0, 0).unwrap();
    let events = steps
        .iter()
        .enumerate()
        .map(|(i, (a, d))| {
            let e = Event::new(*a, t0 + Duration::days(*d));
            if i == 0 {
                e.with("amount", Value::Int(amount))
            } else {
                e
            }
        })
        .collect();
    Trace::new(case, events, Attributes::new())
}

/// Worked fines trace: Create fine, Send fine, Add penalty, Payment.
fn worked_trace() -> Trace {
    fines_trace("F1", 40, &[("Create fine", 0), ("Send fine", 11), ("Add penalty", 64), ("Payment", 193)])
}

fn trained(traces: Vec<Trace>) -> (Mdp, PolicyArtifact) {
    let spec = fines_spec();
    let mdp = build_mdp(&annotate(&EventLog::new(traces), &spec).unwrap(), &spec).unwrap();
    let cfg = PolicyIterationConfig { episodes_per_eval: 2000, seed: 1, ..Default::default() };
    let training = policy_iteration(&mdp, &cfg).unwrap();
    let artifact = PolicyArtifact::from_training(&mdp, &training, &cfg);
    (mdp, artifact)
}

fn app(traces: Vec<Trace>) -> Router {
    let (mdp, artifact) = trained(traces);
    router(AppState::new(Snapshot::new(mdp, artifact, fines_spec(), None).unwrap(), None))
}

fn events(trace: &Trace, n: usize) -> Json {
    trace.events[..n]
        .iter()
        .map(|e| json!({ "activity": e.activity, "timestamp": e.timestamp.to_rfc3339(), "payload": e.payload }))
        .collect()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Json>) -> (StatusCode, Json) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Json::Null))
}

async fn recommend(app: &Router, body: Json) -> (StatusCode, Json) {
    call(app, "POST", "/v1/recommend", Some(body)).await
}

fn actions(resp: &Json) -> Vec<String> {
    resp["ranked"].as_array().unwrap().iter().map(|r| r["action"].as_str().unwrap().to_string()).collect()
}

#[tokio::test]
async fn empty_case_starts_at_start_state() {
    let app = app(vec![worked_trace()]);
    let (status, body) = recommend(&app, json!({ "scenario_id": "fines", "events": [] })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["api_version"], 1);
    assert_eq!(body["resolved_state"]["last_activity"], "<start>");
    assert_eq!(actions(&body), ["Create fine-0"]);
    assert_eq!(body["fallback_used"], false);
    assert_eq!(body["terminal"], false);
    assert_eq!(body["ranked"][0]["support"], 1);
}

#[tokio::test]
async fn worked_prefix_resolves_to_send_fine_state() {
    let t = worked_trace();
    let app = app(vec![t.clone()]);
    let (_, body) = recommend(&app, json!({ "scenario_id": "fines", "events": events(&t, 2) })).await;
    assert_eq!(
        body["resolved_state"],
        json!({ "last_activity": "Send fine", "history": [0], "env": ["low"], "terminal": false })
    );
    assert_eq!(body["resolved_state_label"], "⟨Send fine, 0, low⟩");
    assert_eq!(actions(&body), ["Add penalty-1"]);
    assert_eq!(body["ranked"][0]["q_value"], 2.0);
}

#[tokio::test]
async fn terminal_state_has_empty_ranking() {
    let t = worked_trace();
    let app = app(vec![t.clone()]);
    let (status, body) = recommend(&app, json!({ "scenario_id": "fines", "events": events(&t, 4) })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["terminal"], true);
    assert_eq!(body["ranked"], json!([]));
    assert_eq!(body["resolved_state"]["last_activity"], "Payment");
}

#[tokio::test]
async fn unseen_history_backs_off() {
    let app = app(vec![worked_trace()]);
    let late = fines_trace("X", 40, &[("Create fine", 0), ("Send fine", 200)]);
    let (status, body) = recommend(&app, json!({ "scenario_id": "fines", "events": events(&late, 2) })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["fallback_used"], true);
    assert_eq!(body["fallback"], "history_backoff");
    assert_eq!(body["dropped_features"], json!(["2months"]));
    assert_eq!(body["resolved_state_label"], "⟨Send fine, 0, low⟩");

    let other = fines_trace("Y", 90, &[("Create fine", 0), ("Send fine", 3)]);
    let (_, body) = recommend(&app, json!({ "scenario_id": "fines", "events": events(&other, 2) })).await;
    assert_eq!(body["fallback"], "last_activity");
    assert_eq!(actions(&body), ["Add penalty-1"]);
}

#[tokio::test]
async fn ranking_follows_q_values() {
    let good = fines_trace("A", 30, &[("Create fine", 0), ("Send fine", 10), ("Payment", 30)]);
    let bad = fines_trace("B", 30, &[("Create fine", 0), ("Add penalty", 10)]);
    let app = app(vec![good.clone(), bad]);
    let (_, body) = recommend(&app, json!({ "scenario_id": "fines", "events": events(&good, 1) })).await;
    assert_eq!(actions(&body), ["Send fine-0", "Add penalty-0"]);
    assert_eq!(body["ranked"][0]["q_value"], 3.0);
    assert_eq!(body["ranked"][1]["q_value"], 0.0);
}

#[tokio::test]
async fn identical_requests_get_identical_responses() {
    let t = worked_trace();
    let app = app(vec![t.clone()]);
    let req = json!({ "api_version": 1, "scenario_id": "fines", "events": events(&t, 3) });
    let a = recommend(&app, req.clone()).await;
    let b = recommend(&app, req).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn request_errors() {
    let t = worked_trace();
    let app = app(vec![t.clone()]);
    let cases = [
        (json!({ "scenario_id": "loans", "events": [] }), StatusCode::NOT_FOUND, "scenario_mismatch"),
        (json!({ "api_version": 2, "scenario_id": "fines" }), StatusCode::BAD_REQUEST, "unsupported_version"),
        (
            json!({ "scenario_id": "fines", "events": [{ "activity": "Teleport", "timestamp": "2021-01-01T00:00:00Z" }] }),
            StatusCode::UNPROCESSABLE_ENTITY,
            "unknown_activity",
        ),
        (
            json!({ "scenario_id": "fines", "events": [events(&t, 2)[1].clone(), events(&t, 1)[0].clone()] }),
            StatusCode::BAD_REQUEST,
            "unordered_events",
        ),
        (
            json!({ "scenario_id": "fines", "events": [{ "activity": "Create fine", "timestamp": "yesterday" }] }),
            StatusCode::BAD_REQUEST,
            "invalid_request",
        ),
    ];
    for (req, status, code) in cases {
        let (got, body) = recommend(&app, req).await;
        assert_eq!((got, body["error"]["code"].as_str()), (status, Some(code)));
        assert_eq!(body["api_version"], 1);
    }
}

#[tokio::test]
async fn meta_and_health() {
    let (mdp, artifact) = trained(vec![worked_trace()]);
    let fingerprint = mdp.fingerprint().to_string();
    let app = router(AppState::new(Snapshot::new(mdp, artifact, fines_spec(), None).unwrap(), None));
    let (status, meta) = call(&app, "GET", "/v1/policy/meta", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(meta["scenario_id"], "fines");
    assert_eq!(meta["mdp_fingerprint"], fingerprint.as_str());
    assert_eq!(meta["policy_kind"], "optimal");
    assert_eq!(meta["training"]["config"]["episodes_per_eval"], 2000);
    assert_eq!((meta["states"].as_u64(), meta["edges"].as_u64()), (Some(4), Some(3)));
    let (status, health) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["status"], "ok");
    let (status, _) = call(&app, "POST", "/v1/admin/reload", None).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
}

#[tokio::test]
async fn reload_swaps_artifacts_atomically() {
    let dir = tempfile::tempdir().unwrap();
    let (mdp, artifact) = trained(vec![worked_trace()]);
    let paths = ArtifactPaths {
        mdp: dir.path().join("m.mdp"),
        policy: dir.path().join("p.policy"),
        sim_mdp: None,
        scenario: None,
    };
    std::fs::write(&paths.mdp, save_mdp(&mdp)).unwrap();
    std::fs::write(&paths.policy, save_policy(&artifact)).unwrap();
    let state = AppState::load(paths.clone()).unwrap();
    let app = router(state.clone());
    let (_, meta) = call(&app, "GET", "/v1/policy/meta", None).await;
    assert_eq!(meta["policy_kind"], "optimal");

    std::fs::write(&paths.policy, save_policy(&PolicyArtifact::untrained(customary_policy(&mdp)))).unwrap();
    let snapshot = state.snapshot();
    let (status, meta) = call(&app, "POST", "/v1/admin/reload", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(meta["policy_kind"], "customary");
    assert_eq!(snapshot.artifact.policy.kind, prescribe_core::PolicyKind::Optimal);
    let (_, body) = recommend(&app, json!({ "scenario_id": "fines" })).await;
    assert_eq!(body["ranked"][0]["q_value"], Json::Null);

    std::fs::write(&paths.mdp, b"garbage").unwrap();
    let (status, body) = call(&app, "POST", "/v1/admin/reload", None).await;
    assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::INTERNAL_SERVER_ERROR, Some("load_failed")));
    let (_, meta) = call(&app, "GET", "/v1/policy/meta", None).await;
    assert_eq!(meta["policy_kind"], "customary");
}

#[tokio::test]
async fn concurrent_requests_see_a_consistent_snapshot() {
    let t = worked_trace();
    let app = app(vec![t.clone()]);
    let req = json!({ "scenario_id": "fines", "events": events(&t, 2) });
    let want = recommend(&app, req.clone()).await;
    let handles: Vec<_> = (0..32)
        .map(|_| {
            let (app, req) = (app.clone(), req.clone());
            tokio::spawn(async move { recommend(&app, req).await })
        })
        .collect();
    for h in handles {
        assert_eq!(h.await.unwrap(), want);
    }
}

fn synthetic_app() -> (Router, Arc<AppState>) {
    let spec = fines_spec();
    let (log, _) = generate_synthetic_log(Template::FinesLike, 1000, 42);
    let mdp = build_mdp(&annotate(&log, &spec).unwrap(), &spec).unwrap();
    let cfg = PolicyIterationConfig { seed: 42, ..Default::default() };
    let training = policy_iteration(&mdp, &cfg).unwrap();
    let artifact = PolicyArtifact::from_training(&mdp, &training, &cfg);
    let state = AppState::new(Snapshot::new(mdp, artifact, spec, None).unwrap(), None);
    (router(state.clone()), state)
}

#[tokio::test]
async fn what_if_projections_agree_with_the_ranking() {
    let (app, state) = synthetic_app();
    let snapshot = state.snapshot();
    let mut checked = 0;
    for (i, s) in snapshot.mdp.states().iter().enumerate() {
        let id = prescribe_core::mdp::StateId(i);
        if s.terminal || snapshot.mdp.groups_at(id).len() < 2 || s.is_start() {
            continue;
        }
        // Rebuild a case reaching this state from one training path.
        let Some(trace) = synthetic_case_for(s) else { continue };
        let req = json!({ "scenario_id": "fines", "events": events(&trace, trace.events.len()), "n_cases": 20000, "seed": 3 });
        let (status, body) = call(&app, "POST", "/v1/whatif", Some(req.clone())).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert_eq!(body["resolved_state_label"], s.to_string());
        let (_, rec) = recommend(&app, req).await;
        let top = rec["ranked"][0]["action"].as_str().unwrap();
        let proj = body["projections"].as_array().unwrap();
        let mean = |a: &str| proj.iter().find(|p| p["action"] == a).unwrap();
        let best = mean(top);
        for p in proj {
            let slack =
                3.0 * (best["std_error"].as_f64().unwrap().powi(2) + p["std_error"].as_f64().unwrap().powi(2)).sqrt();
            assert!(best["mean_kpi"].as_f64().unwrap() + slack >= p["mean_kpi"].as_f64().unwrap(), "{s}: {body}");
        }
        checked += 1;
    }
    assert!(checked > 0);

    let (status, body) = call(
        &app,
        "POST",
        "/v1/whatif",
        Some(json!({ "scenario_id": "fines", "action": "Create fine-0", "n_cases": 100 })),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["projections"].as_array().unwrap().len(), 1);
    let (status, _) = call(&app, "POST", "/v1/whatif", Some(json!({ "scenario_id": "fines", "n_cases": 0 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn what_if_is_disabled_at_terminal_states() {
    let t = worked_trace();
    let app = app(vec![t.clone()]);
    let (status, body) =
        call(&app, "POST", "/v1/whatif", Some(json!({ "scenario_id": "fines", "events": events(&t, 4) }))).await;
    assert_eq!((status, body["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("terminal_state")));
}

/// A case prefix in the synthetic Fines template ending in `state`, found by
/// search over the template's activities and day offsets.
fn synthetic_case_for(state: &prescribe_core::State) -> Option<Trace> {
    let (log, _) = generate_synthetic_log(Template::FinesLike, 300, 42);
    let spec = fines_spec();
    let annotated = annotate(&log, &spec).unwrap();
    for (t, a) in log.traces.iter().zip(&annotated.traces) {
        for i in 0..t.events.len() {
            let s = prescribe_core::mdp::state_at(a, i, &spec).unwrap().with_terminal(false);
            if &s == state {
                let events = t.events[..=i].to_vec();
                return Some(Trace::new(t.case_id.clone(), events, t.attrs.clone()));
            }
        }
    }
    None
}
