//! Long-running leak monitor.
//!
//! One writer thread owns the [`Engine`](leakwatch_core::Engine) and the
//! meter stream; HTTP handlers read published views and queue verdicts and
//! fire-alarm changes back to the writer. State survives restarts through a
//! JSON snapshot.

pub mod api;
pub mod monitor;
pub mod snapshot;

use std::path::PathBuf;

use leakwatch_core::config::{ConfigError, EngineConfig};
use leakwatch_core::Engine;
use thiserror::Error;
use tracing::info;

pub use monitor::{start, Command, MonitorHandle, MonitorOptions, Source, View};
pub use snapshot::{Snapshot, SnapshotError, SCHEMA};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("cannot listen on {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("server failed: {0}")]
    Server(String),
}

/// Restore from the configured snapshot when present, otherwise start fresh.
pub fn open_engine(config: &EngineConfig) -> Result<Engine, ServiceError> {
    let settings = config.settings()?;
    let coefficients = config.coefficients()?;
    let path = config.snapshot_path();
    if path.exists() {
        let engine = Snapshot::load(&path)?.restore(&path, settings, coefficients)?;
        info!(path = %path.display(), now = ?engine.now(), "state restored");
        Ok(engine)
    } else {
        Ok(Engine::new(settings, coefficients).map_err(ConfigError::from)?)
    }
}

pub fn monitor_options(config: &EngineConfig) -> MonitorOptions {
    MonitorOptions {
        snapshot: Some(config.snapshot_path()),
        snapshot_every_minutes: config.server.snapshot_every_minutes,
        replay_speed: config.server.replay_speed,
    }
}

/// Run until the process receives Ctrl-C.
pub async fn serve(config: EngineConfig, source: Source) -> Result<(), ServiceError> {
    let engine = open_engine(&config)?;
    let handle = start(engine, source, monitor_options(&config));
    let state = api::AppState::new(
        handle.commands(),
        handle.view(),
        config.server.token.clone(),
    );
    let static_dir: Option<PathBuf> = config.server.static_dir.as_ref().map(|p| config.resolve(p));
    let app = api::router(state, static_dir);
    let listener = tokio::net::TcpListener::bind(&config.server.bind)
        .await
        .map_err(|e| ServiceError::Bind {
            addr: config.server.bind.clone(),
            message: e.to_string(),
        })?;
    info!(addr = %config.server.bind, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Server(e.to_string()))?;
    tokio::task::spawn_blocking(move || handle.shutdown())
        .await
        .map_err(|e| ServiceError::Server(e.to_string()))??;
    Ok(())
}
