//! HTTP front end for the gate engine.
//!
//! Every verdict, including Deny, is returned with status 200: the verdict is
//! data. Transport-level statuses are reserved for malformed input (400),
//! missing resources (404), state conflicts (409), signals outside the
//! intensity trace (422) and storage failures (503).

use std::collections::BTreeMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cagg_core::budget::{BudgetError, BudgetPeriod};
use cagg_core::engine::{EngineError, EngineSettings, WorkloadReport};
use cagg_core::intensity::IntensityError;
use cagg_core::ledger::{ExportFormat, LedgerError, ProvenanceRecord};
use cagg_core::orchestrator::OrchestratorError;
use cagg_core::policy::{GateRequest, PolicyConfig, PolicyError, ReviewResolution};
use cagg_core::{
    Clock, Engine, IntensitySeries, ReservationId, ScopeId, SystemClock, VirtualClock,
};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    /// Bearer token required on every route except `/healthz`.
    pub token: Option<String>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Self {
        Self {
            engine,
            token: None,
        }
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = self.code, message = %self.message, "request failed");
        }
        let body = ErrorBody {
            error: self.code,
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

fn budget_status(e: &BudgetError) -> (StatusCode, &'static str) {
    match e {
        BudgetError::UnknownScope(_) => (StatusCode::NOT_FOUND, "unknown_scope"),
        BudgetError::UnknownReservation(_) => (StatusCode::NOT_FOUND, "unknown_reservation"),
        BudgetError::AlreadySettled(_) => (StatusCode::CONFLICT, "already_settled"),
        BudgetError::InvalidAllocation(_) => (StatusCode::BAD_REQUEST, "invalid_allocation"),
        BudgetError::InvalidAmount(_) => (StatusCode::BAD_REQUEST, "invalid_amount"),
    }
}

fn loop_status(e: &OrchestratorError) -> (StatusCode, &'static str) {
    match e {
        OrchestratorError::UnknownLoop(_) => (StatusCode::NOT_FOUND, "unknown_loop"),
        OrchestratorError::LoopTerminated(_) | OrchestratorError::AlreadyTerminated(_) => {
            (StatusCode::CONFLICT, "loop_terminated")
        }
        OrchestratorError::LoopBlocked(_) => (StatusCode::CONFLICT, "loop_blocked"),
        OrchestratorError::NotBlocked(_) => (StatusCode::CONFLICT, "loop_not_blocked"),
        OrchestratorError::EmptyJustification => (StatusCode::BAD_REQUEST, "empty_justification"),
        OrchestratorError::InvalidExtension | OrchestratorError::InvalidCap => {
            (StatusCode::BAD_REQUEST, "invalid_extension")
        }
        OrchestratorError::TierNotInLadder(_) | OrchestratorError::Emission(_) => {
            (StatusCode::BAD_REQUEST, "invalid_plan")
        }
    }
}

fn ledger_status(e: &LedgerError) -> (StatusCode, &'static str) {
    match e {
        LedgerError::Storage(_) => (StatusCode::SERVICE_UNAVAILABLE, "storage_failure"),
        LedgerError::Corrupt { .. } => (StatusCode::SERVICE_UNAVAILABLE, "ledger_corrupt"),
        LedgerError::InvalidPayload(_) => (StatusCode::BAD_REQUEST, "invalid_payload"),
    }
}

fn intensity_status(e: &IntensityError) -> (StatusCode, &'static str) {
    match e {
        IntensityError::OutOfCoverage(_) => (StatusCode::UNPROCESSABLE_ENTITY, "out_of_coverage"),
        IntensityError::InfeasibleWindow(_) => {
            (StatusCode::UNPROCESSABLE_ENTITY, "infeasible_window")
        }
        IntensityError::InvalidSeries(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_series"),
        IntensityError::Io { .. } => (StatusCode::SERVICE_UNAVAILABLE, "trace_unavailable"),
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let (status, code) = match &e {
            EngineError::Policy(p) => match p {
                PolicyError::UnknownScope(_) => (StatusCode::NOT_FOUND, "unknown_scope"),
                PolicyError::OutOfCoverage(_) => {
                    (StatusCode::UNPROCESSABLE_ENTITY, "out_of_coverage")
                }
                PolicyError::UnknownReview(_) => (StatusCode::NOT_FOUND, "unknown_review"),
                PolicyError::AlreadyResolved(_) => (StatusCode::CONFLICT, "already_resolved"),
                PolicyError::InvalidRequest(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
                PolicyError::InvalidConfig(_) => {
                    (StatusCode::UNPROCESSABLE_ENTITY, "invalid_policy")
                }
                PolicyError::Budget(b) => budget_status(b),
                PolicyError::Ledger(l) => ledger_status(l),
                PolicyError::Orchestrator(o) => loop_status(o),
                PolicyError::Intensity(i) => intensity_status(i),
            },
            EngineError::Budget(b) => budget_status(b),
            EngineError::Ledger(l) => ledger_status(l),
            EngineError::Loop(o) => loop_status(o),
            EngineError::Intensity(i) => intensity_status(i),
            EngineError::InvalidReport(_) => (StatusCode::BAD_REQUEST, "invalid_report"),
            EngineError::UnknownLoop(_) => (StatusCode::NOT_FOUND, "unknown_loop"),
            EngineError::Persist(_) => (StatusCode::SERVICE_UNAVAILABLE, "storage_failure"),
        };
        Self::new(status, code, e.to_string())
    }
}

/// JSON body extractor that reports every rejection as 400.
pub struct Body<T>(pub T);

impl<S, T> FromRequest<S> for Body<T>
where
    Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(value)) => Ok(Body(value)),
            Err(rejection) => Err(ApiError::bad_request(rejection.body_text())),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Engine calls may fsync; keep them off the async workers.
async fn run<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, EngineError> + Send + 'static,
{
    let engine = state.engine.clone();
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

fn parse_scope(raw: &str) -> Result<ScopeId, ApiError> {
    raw.trim_start_matches('/')
        .parse()
        .map_err(|e: cagg_core::types::TypeError| ApiError::bad_request(e.to_string()))
}

async fn check_gate(
    State(state): State<AppState>,
    Body(req): Body<GateRequest>,
) -> ApiResult<cagg_core::GateDecision> {
    run(&state, move |e| e.check_gate(&req)).await.map(Json)
}

async fn record_events(
    State(state): State<AppState>,
    Body(report): Body<WorkloadReport>,
) -> ApiResult<cagg_core::engine::RecordedEvents> {
    run(&state, move |e| e.record_event(&report))
        .await
        .map(Json)
}

async fn cancel_reservation(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    run(&state, move |e| e.cancel_reservation(&ReservationId(id))).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn list_budgets(State(state): State<AppState>) -> Json<Vec<cagg_core::CarbonBudget>> {
    Json(state.engine.all_budgets())
}

async fn get_budget(
    State(state): State<AppState>,
    Path(raw): Path<String>,
) -> ApiResult<cagg_core::CarbonBudget> {
    let scope = parse_scope(&raw)?;
    Ok(Json(state.engine.budget_status(&scope)?))
}

#[derive(Debug, Deserialize)]
struct BudgetBody {
    allocation: f64,
    #[serde(default = "default_soft")]
    soft_threshold: f64,
    #[serde(default)]
    period: Option<BudgetPeriod>,
}

fn default_soft() -> f64 {
    0.8
}

async fn put_budget(
    State(state): State<AppState>,
    Path(raw): Path<String>,
    Body(body): Body<BudgetBody>,
) -> ApiResult<cagg_core::CarbonBudget> {
    let scope = parse_scope(&raw)?;
    run(&state, move |e| {
        e.set_budget(scope, body.allocation, body.soft_threshold, body.period)
    })
    .await
    .map(Json)
}

type LoopState = cagg_core::orchestrator::RegenerationLoopState;

async fn list_loops(State(state): State<AppState>) -> Json<Vec<LoopState>> {
    Json(state.engine.all_loops())
}

async fn get_loop(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<LoopState> {
    Ok(Json(state.engine.loop_state(&id)?))
}

#[derive(Debug, Deserialize)]
struct AttemptBody {
    scope: ScopeId,
}

async fn loop_attempt(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Body(body): Body<AttemptBody>,
) -> ApiResult<LoopState> {
    run(&state, move |e| e.loop_attempt(&id, &body.scope))
        .await
        .map(Json)
}

#[derive(Debug, Deserialize)]
struct JustifyBody {
    approver: String,
    text: String,
    #[serde(default = "one")]
    extension: u32,
}

fn one() -> u32 {
    1
}

async fn loop_justify(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Body(body): Body<JustifyBody>,
) -> ApiResult<LoopState> {
    run(&state, move |e| {
        e.loop_justify(&id, &body.approver, &body.text, body.extension)
    })
    .await
    .map(Json)
}

#[derive(Debug, Deserialize)]
struct TerminateBody {
    approver: String,
    reason: String,
}

async fn loop_terminate(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Body(body): Body<TerminateBody>,
) -> ApiResult<LoopState> {
    run(&state, move |e| {
        e.loop_terminate(&id, &body.approver, &body.reason)
    })
    .await
    .map(Json)
}

async fn pending_reviews(
    State(state): State<AppState>,
) -> Json<Vec<cagg_core::policy::ReviewItem>> {
    Json(state.engine.pending_reviews())
}

async fn decide_review(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Body(resolution): Body<ReviewResolution>,
) -> ApiResult<cagg_core::GateDecision> {
    run(&state, move |e| e.resolve_review(&id, &resolution))
        .await
        .map(Json)
}

async fn intensity_now(
    State(state): State<AppState>,
) -> ApiResult<cagg_core::engine::IntensityNow> {
    Ok(Json(state.engine.intensity_now()?))
}

#[derive(Debug, Deserialize)]
struct WindowQuery {
    duration: u64,
    deadline: u64,
}

async fn intensity_window(
    State(state): State<AppState>,
    query: Result<Query<WindowQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<cagg_core::engine::WindowAnswer> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    Ok(Json(state.engine.intensity_window(q.duration, q.deadline)?))
}

#[derive(Debug, Serialize)]
struct SeriesView {
    start: DateTime<Utc>,
    step: u64,
    values: Vec<f64>,
}

async fn intensity_series(State(state): State<AppState>) -> Json<SeriesView> {
    let s = state.engine.intensity_series();
    Json(SeriesView {
        start: s.start(),
        step: s.step(),
        values: s.values().to_vec(),
    })
}

#[derive(Debug, Deserialize)]
struct AuditQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn ledger_audit(
    State(state): State<AppState>,
    query: Result<Query<AuditQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    match q.format.as_deref().unwrap_or("summary") {
        "summary" => {
            let report = run(&state, |e| e.audit()).await?;
            Ok(Json(report).into_response())
        }
        "lines" => {
            let bytes = run(&state, |e| e.export(ExportFormat::Lines)).await?;
            Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], bytes).into_response())
        }
        other => Err(ApiError::bad_request(format!("unknown format `{other}`"))),
    }
}

#[derive(Debug, Deserialize)]
struct RecentQuery {
    #[serde(default)]
    limit: Option<usize>,
    #[serde(default)]
    scope: Option<String>,
}

async fn ledger_recent(
    State(state): State<AppState>,
    query: Result<Query<RecentQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Vec<ProvenanceRecord>> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let records = match q.scope.as_deref() {
        Some(raw) => state.engine.ledger().query(&parse_scope(raw)?, None),
        None => state.engine.ledger().records(),
    };
    let limit = q.limit.unwrap_or(50);
    let skip = records.len().saturating_sub(limit);
    Ok(Json(records.into_iter().skip(skip).collect()))
}

async fn get_policy(State(state): State<AppState>) -> Json<PolicyConfig> {
    Json(state.engine.config().as_ref().clone())
}

async fn reload_policy(State(state): State<AppState>) -> ApiResult<PolicyConfig> {
    run(&state, |e| e.reload_policy().map(|c| c.as_ref().clone()))
        .await
        .map(Json)
}

async fn healthz(State(state): State<AppState>) -> Json<BTreeMap<&'static str, serde_json::Value>> {
    let mut body = BTreeMap::new();
    body.insert("status", "ok".into());
    body.insert("ledger_records", state.engine.ledger().len().into());
    body.insert("now", state.engine.clock().now().to_rfc3339().into());
    Json(body)
}

async fn require_token(
    State(state): State<AppState>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    if let Some(token) = &state.token {
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or wrong bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/gates/check", post(check_gate))
        .route("/events", post(record_events))
        .route("/reservations/{id}/cancel", post(cancel_reservation))
        .route("/budgets", get(list_budgets))
        .route("/budgets/{*scope}", get(get_budget).put(put_budget))
        .route("/loops", get(list_loops))
        .route("/loops/{id}", get(get_loop))
        .route("/loops/{id}/attempt", post(loop_attempt))
        .route("/loops/{id}/justify", post(loop_justify))
        .route("/loops/{id}/terminate", post(loop_terminate))
        .route("/reviews/pending", get(pending_reviews))
        .route("/reviews/{id}/decision", post(decide_review))
        .route("/intensity/now", get(intensity_now))
        .route("/intensity/window", get(intensity_window))
        .route("/intensity/series", get(intensity_series))
        .route("/ledger/audit", get(ledger_audit))
        .route("/ledger/recent", get(ledger_recent))
        .route("/policy", get(get_policy))
        .route("/policy/reload", post(reload_policy))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(api)
        .with_state(state)
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Startup configuration read from the environment.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen_addr: String,
    pub data_dir: Option<PathBuf>,
    pub policy_path: Option<PathBuf>,
    pub intensity_trace: PathBuf,
    pub token: Option<String>,
    /// Freeze the clock at this instant instead of using system time.
    pub fixed_clock: Option<DateTime<Utc>>,
}

impl ServiceConfig {
    pub fn from_env() -> Result<Self, String> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let fixed_clock = match var("CAGG_FIXED_CLOCK") {
            Some(raw) => Some(
                raw.parse()
                    .map_err(|e| format!("CAGG_FIXED_CLOCK `{raw}` is not RFC 3339: {e}"))?,
            ),
            None => None,
        };
        Ok(Self {
            listen_addr: var("CAGG_LISTEN_ADDR").unwrap_or_else(|| "127.0.0.1:8087".into()),
            data_dir: var("CAGG_DATA_DIR").map(PathBuf::from),
            policy_path: var("CAGG_POLICY_PATH").map(PathBuf::from),
            intensity_trace: var("CAGG_INTENSITY_TRACE")
                .map(PathBuf::from)
                .ok_or("CAGG_INTENSITY_TRACE must point at an intensity trace file")?,
            token: var("CAGG_TOKEN"),
            fixed_clock,
        })
    }

    pub fn build_engine(&self) -> Result<Engine, String> {
        let policy = match &self.policy_path {
            Some(p) => PolicyConfig::load(p).map_err(|e| e.to_string())?,
            None => PolicyConfig::default(),
        };
        let intensity = IntensitySeries::load(&self.intensity_trace).map_err(|e| e.to_string())?;
        let clock: Arc<dyn Clock> = match self.fixed_clock {
            Some(t) => Arc::new(VirtualClock::new(t)),
            None => Arc::new(SystemClock),
        };
        let settings = EngineSettings {
            policy,
            policy_path: self.policy_path.clone(),
            intensity,
            intensity_path: Some(self.intensity_trace.clone()),
            clock,
        };
        match &self.data_dir {
            Some(dir) => Engine::open(dir, settings),
            None => Engine::in_memory(settings),
        }
        .map_err(|e| e.to_string())
    }
}
