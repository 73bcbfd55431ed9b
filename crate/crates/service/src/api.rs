//! HTTP API over a swappable artifact snapshot.

use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State as AxumState;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use prescribe_core::rl::TrainingSummary;
use prescribe_core::PolicyKind;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::recommender::{
    ArtifactPaths, Recommendation, RecommendationRequest, ServiceError, Snapshot, WhatIfRequest, WhatIfResponse,
    API_VERSION,
};

pub struct AppState {
    /// Where reloads read from; `None` for in-memory snapshots.
    source: Option<ArtifactPaths>,
    current: RwLock<Loaded>,
}

#[derive(Clone)]
struct Loaded {
    snapshot: Arc<Snapshot>,
    loaded_at: DateTime<Utc>,
}

impl AppState {
    pub fn new(snapshot: Snapshot, source: Option<ArtifactPaths>) -> Arc<AppState> {
        Arc::new(AppState {
            source,
            current: RwLock::new(Loaded { snapshot: Arc::new(snapshot), loaded_at: Utc::now() }),
        })
    }

    pub fn load(paths: ArtifactPaths) -> Result<Arc<AppState>, ServiceError> {
        let snapshot = Snapshot::load(&paths)?;
        Ok(AppState::new(snapshot, Some(paths)))
    }

    fn loaded(&self) -> Loaded {
        self.current.read().expect("snapshot lock").clone()
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.loaded().snapshot
    }

    /// Reads the artifacts again and swaps them in. On failure the current
    /// snapshot stays in place.
    pub fn reload(&self) -> Result<Arc<Snapshot>, ServiceError> {
        let paths =
            self.source.as_ref().ok_or_else(|| ServiceError::Load("no artifact paths to reload from".into()))?;
        let fresh = Arc::new(Snapshot::load(paths)?);
        *self.current.write().expect("snapshot lock") = Loaded { snapshot: fresh.clone(), loaded_at: Utc::now() };
        Ok(fresh)
    }
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(ServiceError::Invalid(e.body_text()))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::Version(_) | ServiceError::Unordered(_) | ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            ServiceError::ScenarioMismatch { .. } => StatusCode::NOT_FOUND,
            ServiceError::UnknownActivity(_) | ServiceError::Resolution(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Terminal(_) => StatusCode::CONFLICT,
            ServiceError::Load(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({
            "api_version": API_VERSION,
            "error": { "code": self.0.code(), "message": self.0.to_string() },
        });
        (status, Json(body)).into_response()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub api_version: u32,
    pub scenario_id: String,
    pub mdp_fingerprint: String,
    pub policy_kind: PolicyKind,
    pub policy_mdp_fingerprint: String,
    pub training: Option<TrainingSummary>,
    pub states: usize,
    pub actions: usize,
    pub edges: usize,
    pub simulation_mdp_fingerprint: Option<String>,
    pub loaded_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub api_version: u32,
    pub status: String,
    pub scenario_id: String,
    pub mdp_fingerprint: String,
}

fn meta(loaded: &Loaded) -> PolicyMeta {
    let s = &loaded.snapshot;
    let stats = s.mdp.stats();
    PolicyMeta {
        api_version: API_VERSION,
        scenario_id: s.scenario_id().to_string(),
        mdp_fingerprint: s.mdp.fingerprint().to_string(),
        policy_kind: s.artifact.policy.kind,
        policy_mdp_fingerprint: s.artifact.policy.mdp_fingerprint.clone(),
        training: s.artifact.training.clone(),
        states: stats.states,
        actions: stats.actions,
        edges: stats.edges,
        simulation_mdp_fingerprint: s.sim_mdp.as_ref().map(|m| m.fingerprint().to_string()),
        loaded_at: loaded.loaded_at,
    }
}

async fn recommend(
    AxumState(app): AxumState<Arc<AppState>>,
    body: Result<Json<RecommendationRequest>, JsonRejection>,
) -> Result<Json<Recommendation>, ApiError> {
    let Json(req) = body?;
    Ok(Json(app.snapshot().recommend(&req)?))
}

async fn what_if(
    AxumState(app): AxumState<Arc<AppState>>,
    body: Result<Json<WhatIfRequest>, JsonRejection>,
) -> Result<Json<WhatIfResponse>, ApiError> {
    let Json(req) = body?;
    let snapshot = app.snapshot();
    let out = tokio::task::spawn_blocking(move || snapshot.what_if(&req))
        .await
        .map_err(|e| ServiceError::Invalid(format!("simulation aborted: {e}")))??;
    Ok(Json(out))
}

async fn policy_meta(AxumState(app): AxumState<Arc<AppState>>) -> Json<PolicyMeta> {
    Json(meta(&app.loaded()))
}

async fn health(AxumState(app): AxumState<Arc<AppState>>) -> Json<Health> {
    let s = app.snapshot();
    Json(Health {
        api_version: API_VERSION,
        status: "ok".into(),
        scenario_id: s.scenario_id().to_string(),
        mdp_fingerprint: s.mdp.fingerprint().to_string(),
    })
}

async fn reload(AxumState(app): AxumState<Arc<AppState>>) -> Result<Json<PolicyMeta>, ApiError> {
    let worker = app.clone();
    tokio::task::spawn_blocking(move || worker.reload())
        .await
        .map_err(|e| ServiceError::Load(format!("reload aborted: {e}")))??;
    log::info!("artifacts reloaded");
    Ok(Json(meta(&app.loaded())))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/recommend", post(recommend))
        .route("/v1/whatif", post(what_if))
        .route("/v1/policy/meta", get(policy_meta))
        .route("/v1/health", get(health))
        .route("/v1/admin/reload", post(reload))
        .with_state(state)
}
