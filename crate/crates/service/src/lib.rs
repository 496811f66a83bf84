//! JSON API over one corrected snapshot. The snapshot is built once in the
//! background; until it is ready data endpoints answer 503.

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::extract::State;
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};
use wealthtax_core::goals::GoalReport;
use wealthtax_core::report::{design_diagnostics, DatasetSummary, Diagnostic, Level, RunConfig, Snapshot};
use wealthtax_core::tax::{presets, TaxDesign, ThresholdMode};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateOptions {
    /// Resolve thresholds on the first implicate and reuse them for the rest.
    pub freeze_thresholds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRequest {
    pub design: TaxDesign,
    #[serde(default)]
    pub options: SimulateOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateResponse {
    pub label: String,
    #[serde(flatten)]
    pub report: GoalReport,
    /// Resolved (P90, P95, P99) thresholds per implicate.
    pub thresholds: Vec<[f64; 3]>,
    pub elapsed_ms: f64,
}

struct Ready {
    snapshot: Snapshot,
    summary: DatasetSummary,
}

/// Shared handler state. Cloning is cheap; all clones see the same snapshot.
#[derive(Clone, Default)]
pub struct AppState {
    ready: Arc<OnceLock<Arc<Ready>>>,
    failed: Arc<OnceLock<String>>,
}

impl AppState {
    pub fn pending() -> Self {
        Self::default()
    }

    pub fn with_snapshot(snapshot: Snapshot) -> Result<Self, String> {
        let s = Self::pending();
        s.install(snapshot)?;
        Ok(s)
    }

    /// Publishes the snapshot. Only the first call has any effect.
    pub fn install(&self, snapshot: Snapshot) -> Result<(), String> {
        let summary = snapshot.summary().map_err(|e| e.to_string())?;
        let _ = self.ready.set(Arc::new(Ready { snapshot, summary }));
        Ok(())
    }

    pub fn fail(&self, message: String) {
        let _ = self.failed.set(message);
    }

    pub fn is_ready(&self) -> bool {
        self.ready.get().is_some()
    }

    fn get(&self) -> Result<Arc<Ready>, ApiError> {
        match (self.ready.get(), self.failed.get()) {
            (Some(r), _) => Ok(r.clone()),
            (None, Some(msg)) => Err(ApiError::Unavailable(format!("snapshot failed to load: {msg}"))),
            (None, None) => Err(ApiError::Unavailable("snapshot is still loading".into())),
        }
    }
}

#[derive(Debug)]
enum ApiError {
    Unavailable(String),
    Invalid(Vec<Diagnostic>),
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    diagnostics: Vec<Diagnostic>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error, diagnostics) = match self {
            ApiError::Unavailable(m) => (StatusCode::SERVICE_UNAVAILABLE, m, Vec::new()),
            ApiError::Invalid(d) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid design".to_string(), d),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m, Vec::new()),
        };
        (status, Json(ErrorBody { error, diagnostics })).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/health", get(health))
        .route("/api/summary", get(summary))
        .route("/api/presets", get(list_presets))
        .route("/api/simulate", post(simulate))
        .layer(cors)
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "ready": state.is_ready() }))
}

async fn summary(State(state): State<AppState>) -> Result<Json<DatasetSummary>, ApiError> {
    Ok(Json(state.get()?.summary.clone()))
}

async fn list_presets() -> Json<Vec<TaxDesign>> {
    Json(presets())
}

async fn simulate(
    State(state): State<AppState>,
    Json(body): Json<serde_json::Value>,
) -> Result<Json<SimulateResponse>, ApiError> {
    let req: SimulateRequest = serde_json::from_value(body).map_err(|e| {
        ApiError::Invalid(vec![Diagnostic { level: Level::Error, path: "design".into(), message: e.to_string() }])
    })?;
    let diags = design_diagnostics(&req.design, "design.");
    if !diags.is_empty() {
        return Err(ApiError::Invalid(diags));
    }
    let ready = state.get()?;
    let started = Instant::now();
    let label = req.design.display_label();
    let (report, schedules) = tokio::task::spawn_blocking(move || {
        let mode = if req.options.freeze_thresholds {
            ThresholdMode::SharedFromFirst
        } else {
            ready.snapshot.threshold_mode
        };
        ready.snapshot.evaluate_with(&req.design, mode)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(SimulateResponse {
        label,
        report,
        thresholds: schedules.iter().map(|s| s.thresholds).collect(),
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}

/// State whose snapshot is prepared from `config` on a blocking thread.
pub fn spawn_loading(config: RunConfig) -> AppState {
    let state = AppState::pending();
    let handle = state.clone();
    tokio::task::spawn_blocking(move || match Snapshot::prepare(&config) {
        Ok(s) => {
            if let Err(e) = handle.install(s) {
                tracing::error!("snapshot summary failed: {e}");
                handle.fail(e);
            } else {
                tracing::info!("snapshot ready");
            }
        }
        Err(e) => {
            tracing::error!("snapshot failed: {e}");
            handle.fail(e.to_string());
        }
    });
    state
}

pub async fn serve(config: RunConfig, port: u16) -> std::io::Result<()> {
    let state = spawn_loading(config);
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
