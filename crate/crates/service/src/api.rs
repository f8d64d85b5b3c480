//! HTTP/JSON endpoints over the published [`View`] and the command queue.

use std::path::PathBuf;
use std::sync::{mpsc, Arc};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, NaiveDate, Utc};
use leakwatch_core::detect::engine::{EngineError, ThresholdView};
use leakwatch_core::detect::{AlertRecord, AlertState};
use leakwatch_core::md::{ReliabilityState, Verdict};
use leakwatch_core::metering::{day_start, DayWindow};
use leakwatch_core::pattern::PatternClass;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{oneshot, watch};
use tower_http::services::ServeDir;

use crate::monitor::{Command, View};

#[derive(Clone)]
pub struct AppState {
    commands: mpsc::Sender<Command>,
    view: watch::Receiver<Arc<View>>,
    token: Option<Arc<str>>,
}

impl AppState {
    pub fn new(
        commands: mpsc::Sender<Command>,
        view: watch::Receiver<Arc<View>>,
        token: Option<String>,
    ) -> Self {
        Self {
            commands,
            view,
            token: token.map(Into::into),
        }
    }

    fn view(&self) -> Arc<View> {
        self.view.borrow().clone()
    }

    async fn ask<T>(
        &self,
        make: impl FnOnce(oneshot::Sender<T>) -> Command,
    ) -> Result<T, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.commands
            .send(make(tx))
            .map_err(|_| ApiError::unavailable())?;
        rx.await.map_err(|_| ApiError::unavailable())
    }
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn unavailable() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "monitor is shutting down")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match e {
            EngineError::UnknownAlert(_) => StatusCode::NOT_FOUND,
            EngineError::AlreadyJudged(_) | EngineError::NotConfirmed(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

async fn status(State(s): State<AppState>) -> Response {
    Json(s.view().status.clone()).into_response()
}

#[derive(Deserialize)]
struct AlertQuery {
    state: Option<String>,
}

async fn alerts(
    State(s): State<AppState>,
    Query(q): Query<AlertQuery>,
) -> Result<Json<Vec<AlertRecord>>, ApiError> {
    let filter = match q.state.as_deref() {
        None | Some("") => None,
        Some(v) => Some(
            v.parse::<AlertState>()
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?,
        ),
    };
    let view = s.view();
    Ok(Json(
        view.alerts
            .iter()
            .filter(|a| filter.is_none_or(|f| a.state == f))
            .cloned()
            .collect(),
    ))
}

async fn alert(
    State(s): State<AppState>,
    Path(id): Path<u64>,
) -> Result<Json<AlertRecord>, ApiError> {
    s.view()
        .alerts
        .iter()
        .find(|a| a.id == id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown alert {id}")))
}

#[derive(Deserialize)]
struct VerdictBody {
    verdict: Verdict,
}

#[derive(Serialize)]
struct VerdictResponse {
    alert: AlertRecord,
    reliability: ReliabilityState,
    r: f64,
    thresholds: Vec<ThresholdView>,
}

async fn verdict(
    State(s): State<AppState>,
    Path(id): Path<u64>,
    Json(body): Json<VerdictBody>,
) -> Result<Json<VerdictResponse>, ApiError> {
    let outcome = s
        .ask(|reply| Command::Verdict {
            id,
            verdict: body.verdict,
            reply,
        })
        .await??;
    Ok(Json(VerdictResponse {
        r: outcome.reliability.r,
        alert: outcome.alert,
        reliability: outcome.reliability,
        thresholds: outcome.thresholds,
    }))
}

#[derive(Deserialize, Default)]
struct MissedBody {
    at: Option<DateTime<Utc>>,
}

async fn missed_leak(
    State(s): State<AppState>,
    body: Option<Json<MissedBody>>,
) -> Result<Json<ReliabilityState>, ApiError> {
    let at = body.map(|b| b.0).unwrap_or_default().at;
    Ok(Json(
        s.ask(|reply| Command::MissedLeak { at, reply }).await?,
    ))
}

#[derive(Deserialize)]
struct FireBody {
    active: bool,
}

async fn fire_alarm(
    State(s): State<AppState>,
    Json(body): Json<FireBody>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let active = s
        .ask(|reply| Command::FireAlarm {
            active: body.active,
            reply,
        })
        .await?;
    Ok(Json(json!({ "active": active })))
}

#[derive(Deserialize)]
struct WindowQuery {
    length: Option<u32>,
    date: Option<NaiveDate>,
}

#[derive(Serialize)]
struct WindowRow {
    window_start: DateTime<Utc>,
    window: DayWindow,
    length: u32,
    consumption: Option<f64>,
    pattern: Option<PatternClass>,
    md: Option<f64>,
    tmd: Option<f64>,
    alert_id: Option<u64>,
    alert_state: Option<AlertState>,
}

async fn windows(
    State(s): State<AppState>,
    Query(q): Query<WindowQuery>,
) -> Result<Json<Vec<WindowRow>>, ApiError> {
    let view = s.view();
    if let Some(l) = q.length {
        if !view.lengths.contains(&l) {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("length {l} is not one of {:?}", view.lengths),
            ));
        }
    }
    let state_of = |id: u64| view.alerts.iter().find(|a| a.id == id).map(|a| a.state);
    Ok(Json(
        view.evaluations
            .iter()
            .filter(|e| q.length.is_none_or(|l| e.window.length() == l))
            .filter(|e| q.date.is_none_or(|d| e.date == d))
            .map(|e| WindowRow {
                window_start: day_start(e.date) + Duration::minutes(e.window.start_offset() as i64),
                window: e.window,
                length: e.window.length(),
                consumption: e.consumption,
                pattern: e.pattern,
                md: e.md,
                tmd: e.tmd,
                alert_id: e.alert_id,
                alert_state: e.alert_id.and_then(state_of),
            })
            .collect(),
    ))
}

async fn thresholds(State(s): State<AppState>) -> Response {
    Json(s.view().thresholds.clone()).into_response()
}

async fn verdicts(State(s): State<AppState>) -> Response {
    Json(s.view().verdicts.clone()).into_response()
}

async fn require_token(State(s): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &s.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == &**token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong token")
                .into_response();
        }
    }
    next.run(req).await
}

/// The API router; `static_dir` is served for any other path.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/status", get(status))
        .route("/alerts", get(alerts))
        .route("/alerts/{id}", get(alert))
        .route("/alerts/{id}/verdict", post(verdict))
        .route("/leaks/missed", post(missed_leak))
        .route("/fire-alarm", post(fire_alarm))
        .route("/windows", get(windows))
        .route("/thresholds", get(thresholds))
        .route("/verdicts", get(verdicts))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
