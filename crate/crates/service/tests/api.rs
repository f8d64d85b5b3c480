use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::{Duration, NaiveDate};
use leakwatch_core::config::EngineConfig;
use leakwatch_core::detect::engine::{Engine, EngineSettings};
use leakwatch_core::md::CoefficientTable;
use leakwatch_core::sim::{
    emit_meter_csv, inject_leak, simulate, HouseholdProfile, LeakSpec, Trace,
};
use leakwatch_service::api::{router, AppState};
use leakwatch_service::{open_engine, start, MonitorHandle, MonitorOptions, Snapshot, Source};
use serde_json::{json, Value};
use tower::ServiceExt;

fn d0() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 3, 1).unwrap()
}

/// 15 days for a family of four with a one-hour 3 L/min leak on the last
/// morning; short enough that the steady criterion stays quiet.
fn leak_trace() -> Trace {
    let mut tr = simulate(&HouseholdProfile::new(4, 202), d0(), 15).unwrap();
    let at = tr.start + Duration::days(14) + Duration::hours(10);
    inject_leak(
        &mut tr,
        &LeakSpec::per_minute(3.0, at, Some(at + Duration::minutes(60))),
    )
    .unwrap();
    tr
}

fn write_csv(dir: &Path, name: &str, tr: &Trace) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, emit_meter_csv(tr, 100.0)).unwrap();
    p
}

fn engine() -> Engine {
    Engine::new(EngineSettings::default(), CoefficientTable::defaults()).unwrap()
}

fn options(snapshot: Option<PathBuf>) -> MonitorOptions {
    MonitorOptions {
        snapshot,
        snapshot_every_minutes: 1440,
        replay_speed: 0.0,
    }
}

fn app(h: &MonitorHandle, token: Option<&str>) -> axum::Router {
    router(
        AppState::new(h.commands(), h.view(), token.map(String::from)),
        None,
    )
}

async fn call(
    app: &axum::Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX)
        .await
        .unwrap();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::Null)
    };
    (status, v)
}

#[tokio::test]
async fn fresh_start_is_learning_with_no_alerts() {
    let h = start(engine(), Source::Idle, options(None));
    h.source_done().await;
    let app = app(&h, None);
    let (s, v) = call(&app, "GET", "/status", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["in_learning"], json!(true));
    assert_eq!(v["elapsed_days"], json!(0));
    assert_eq!(v["r"], Value::Null);
    assert_eq!(v["reliability"]["r"], json!(1.0));
    let (s, v) = call(&app, "GET", "/alerts", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!([]));
    h.shutdown().unwrap();
}

#[tokio::test]
async fn replay_learns_confirms_and_takes_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_csv(dir.path(), "leak.csv", &leak_trace());
    let h = start(engine(), Source::Replay(csv), options(None));
    h.source_done().await;
    let app = app(&h, None);

    let (_, st) = call(&app, "GET", "/status", None).await;
    assert_eq!(st["in_learning"], json!(false));
    assert_eq!(st["elapsed_days"], json!(14));
    assert!(st["current_pattern"].is_string());

    let (_, confirmed) = call(&app, "GET", "/alerts?state=Confirmed", None).await;
    let confirmed = confirmed.as_array().unwrap().clone();
    assert_eq!(confirmed.len(), 1, "{confirmed:?}");
    assert_eq!(confirmed[0]["criterion"], json!("AverageDeviation"));
    let (_, pot) = call(&app, "GET", "/alerts?state=potential", None).await;
    assert!(pot
        .as_array()
        .unwrap()
        .iter()
        .all(|a| a["state"] == json!("Potential")));
    let (s, _) = call(&app, "GET", "/alerts?state=bogus", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (_, all) = call(&app, "GET", "/alerts", None).await;
    let times: Vec<&str> = all
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["raised_at"].as_str().unwrap())
        .collect();
    let mut sorted = times.clone();
    sorted.sort();
    assert_eq!(times, sorted);

    let id = confirmed[0]["id"].as_u64().unwrap();
    let window = confirmed[0]["first"]["tile"]["window"]
        .as_str()
        .unwrap()
        .to_string();
    let (_, before) = call(&app, "GET", "/thresholds", None).await;
    let md = before
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["window"] == json!(window))
        .unwrap()["md"]
        .as_f64()
        .unwrap();

    let (s, v) = call(
        &app,
        "POST",
        &format!("/alerts/{id}/verdict"),
        Some(json!({"verdict": "false"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["r"], json!(0.0));
    assert_eq!(v["reliability"]["an"], json!(1));
    assert_eq!(v["reliability"]["fn"], json!(1));
    let t = v["thresholds"]
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["window"] == json!(window))
        .unwrap()
        .clone();
    assert!((t["tmd"].as_f64().unwrap() - 1.05 * md).abs() < 1e-9);

    let (s, _) = call(
        &app,
        "POST",
        &format!("/alerts/{id}/verdict"),
        Some(json!({"verdict": "false"})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, st2) = call(&app, "GET", "/status", None).await;
    assert_eq!(st2["reliability"], v["reliability"]);
    let (s, _) = call(
        &app,
        "POST",
        "/alerts/999999/verdict",
        Some(json!({"verdict": "real"})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (_, log) = call(&app, "GET", "/verdicts", None).await;
    assert_eq!(log.as_array().unwrap().len(), 1);

    let (s, rows) = call(&app, "GET", "/windows?length=15", None).await;
    assert_eq!(s, StatusCode::OK);
    let rows = rows.as_array().unwrap();
    assert!(rows.iter().all(|r| r["length"] == json!(15)));
    assert!(rows
        .iter()
        .any(|r| r["alert_id"] == json!(id) && r["alert_state"] == json!("JudgedFalse")));
    let (s, _) = call(&app, "GET", "/windows?length=17", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    h.shutdown().unwrap();
}

#[tokio::test]
async fn real_verdict_and_missed_leak() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_csv(dir.path(), "leak.csv", &leak_trace());
    let h = start(engine(), Source::Replay(csv), options(None));
    h.source_done().await;
    let app = app(&h, None);
    let (_, confirmed) = call(&app, "GET", "/alerts?state=confirmed", None).await;
    let id = confirmed[0]["id"].as_u64().unwrap();
    let (_, v) = call(
        &app,
        "POST",
        &format!("/alerts/{id}/verdict"),
        Some(json!({"verdict": "real"})),
    )
    .await;
    assert_eq!(v["reliability"]["ln"], json!(1));
    assert_eq!(v["r"], json!(1.0));
    let t = &v["thresholds"][0];
    assert_eq!(t["tmd"], t["md"]);
    let (s, v) = call(&app, "POST", "/leaks/missed", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["ln"], json!(2));
    assert_eq!(v["r"], json!(0.5));
    h.shutdown().unwrap();
}

#[tokio::test]
async fn fire_alarm_toggles_suppression() {
    let h = start(engine(), Source::Idle, options(None));
    let app = app(&h, None);
    let (s, v) = call(&app, "POST", "/fire-alarm", Some(json!({"active": true}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["active"], json!(true));
    let (_, st) = call(&app, "GET", "/status", None).await;
    assert_eq!(st["fire_alarm_suppressed"], json!(true));
    call(&app, "POST", "/fire-alarm", Some(json!({"active": false}))).await;
    let (_, st) = call(&app, "GET", "/status", None).await;
    assert_eq!(st["fire_alarm_suppressed"], json!(false));
    h.shutdown().unwrap();
}

#[tokio::test]
async fn token_guards_every_endpoint() {
    let h = start(engine(), Source::Idle, options(None));
    let app = app(&h, Some("s3cret"));
    let (s, _) = call(&app, "GET", "/status", None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let req = Request::builder()
        .uri("/status")
        .header("authorization", "Bearer s3cret")
        .body(Body::empty())
        .unwrap();
    assert_eq!(
        app.clone().oneshot(req).await.unwrap().status(),
        StatusCode::OK
    );
    h.shutdown().unwrap();
}

#[tokio::test]
async fn snapshot_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let tr = simulate(&HouseholdProfile::new(2, 7), d0(), 15).unwrap();
    let csv = write_csv(dir.path(), "t.csv", &tr);
    let snap = dir.path().join("state/snap.json");
    let h = start(engine(), Source::Replay(csv), options(Some(snap.clone())));
    h.source_done().await;
    h.shutdown().unwrap();
    let first = std::fs::read(&snap).unwrap();
    let restored = Snapshot::load(&snap)
        .unwrap()
        .restore(
            &snap,
            EngineSettings::default(),
            CoefficientTable::defaults(),
        )
        .unwrap();
    assert!(restored.learning_complete());
    let again = dir.path().join("again.json");
    Snapshot::of(&restored).persist(&again).unwrap();
    assert_eq!(first, std::fs::read(&again).unwrap());
}

#[tokio::test]
async fn restart_mid_stream_resumes_without_relearning() {
    let dir = tempfile::tempdir().unwrap();
    let tr = leak_trace();
    let full = write_csv(dir.path(), "full.csv", &tr);
    let half = write_csv(
        dir.path(),
        "half.csv",
        &tr.slice(tr.start, tr.start + Duration::days(8)),
    );

    // One uninterrupted run.
    let h = start(engine(), Source::Replay(full.clone()), options(None));
    h.source_done().await;
    let reference: Arc<_> = h.view().borrow().clone();
    h.shutdown().unwrap();

    // Eight days, stop, restore, then the full log again.
    let snap = dir.path().join("snap.json");
    let cfg_text = format!(
        "[server]\nsnapshot = {:?}\nsnapshot_every_minutes = 1440\n",
        snap.display().to_string()
    );
    let cfg_path = dir.path().join("engine.toml");
    std::fs::write(&cfg_path, cfg_text).unwrap();
    let cfg = EngineConfig::load(&cfg_path).unwrap();

    let h = start(
        open_engine(&cfg).unwrap(),
        Source::Replay(half),
        options(Some(snap.clone())),
    );
    h.source_done().await;
    h.shutdown().unwrap();
    let resumed = open_engine(&cfg).unwrap();
    assert_eq!(resumed.learning().unwrap().elapsed_days, 7);
    let h = start(resumed, Source::Replay(full), options(Some(snap.clone())));
    h.source_done().await;
    let view = h.view().borrow().clone();
    h.shutdown().unwrap();

    assert_eq!(view.alerts, reference.alerts);
    assert_eq!(view.thresholds, reference.thresholds);
    assert_eq!(view.status.engine, reference.status.engine);
}

#[test]
fn corrupt_snapshot_refuses_to_start() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("broken.json");
    std::fs::write(&snap, b"{\"schema\": \"leakwatch.snapshot/v1\", \"trunc").unwrap();
    let cfg_path = dir.path().join("engine.toml");
    std::fs::write(&cfg_path, "[server]\nsnapshot = \"broken.json\"\n").unwrap();
    let cfg = EngineConfig::load(&cfg_path).unwrap();
    let err = open_engine(&cfg).unwrap_err().to_string();
    assert!(err.contains("broken.json"), "{err}");
}

#[test]
fn snapshot_from_other_settings_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("snap.json");
    Snapshot::of(&engine()).persist(&snap).unwrap();
    let cfg_path = dir.path().join("engine.toml");
    std::fs::write(
        &cfg_path,
        "[detector]\nsd = 0.2\n[server]\nsnapshot = \"snap.json\"\n",
    )
    .unwrap();
    let cfg = EngineConfig::load(&cfg_path).unwrap();
    let err = open_engine(&cfg).unwrap_err().to_string();
    assert!(err.contains("different configuration"), "{err}");
}
