//! The single writer: owns the engine, consumes the meter stream and applies
//! operator commands. Readers see immutable [`View`]s published over a
//! watch channel.

use std::io::BufRead;
use std::path::PathBuf;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration as WallDuration, Instant};

use chrono::{DateTime, Duration, Utc};
use leakwatch_core::detect::engine::{
    Engine, EngineError, EngineStatus, ThresholdView, TileEvaluation, VerdictOutcome, VerdictRecord,
};
use leakwatch_core::detect::{AlertRecord, AlertState};
use leakwatch_core::md::{ReliabilityState, Verdict};
use leakwatch_core::metering::{parse_row, CSV_HEADER};
use serde::Serialize;
use tokio::sync::{oneshot, watch};
use tracing::{info, warn};

use crate::snapshot::{fingerprint, Snapshot, SnapshotError};

/// Where meter readings come from.
pub enum Source {
    /// A meter log replayed from disk.
    Replay(PathBuf),
    /// Rows arriving on a reader, e.g. standard input.
    Reader(Box<dyn BufRead + Send>),
    /// No stream; the API alone.
    Idle,
}

pub enum Command {
    Verdict {
        id: u64,
        verdict: Verdict,
        reply: oneshot::Sender<Result<VerdictOutcome, EngineError>>,
    },
    MissedLeak {
        at: Option<DateTime<Utc>>,
        reply: oneshot::Sender<ReliabilityState>,
    },
    FireAlarm {
        active: bool,
        reply: oneshot::Sender<bool>,
    },
    Persist {
        reply: oneshot::Sender<Result<(), SnapshotError>>,
    },
    Shutdown,
}

#[derive(Clone, Debug, Serialize)]
pub struct StatusBody {
    #[serde(flatten)]
    pub engine: EngineStatus,
    pub fingerprint: String,
    pub source_done: bool,
    pub readings_processed: u64,
    pub last_snapshot: Option<DateTime<Utc>>,
}

/// Everything the API serves, as of one publication.
#[derive(Clone, Debug, Serialize)]
pub struct View {
    pub status: StatusBody,
    pub alerts: Vec<AlertRecord>,
    pub evaluations: Vec<TileEvaluation>,
    pub thresholds: Vec<ThresholdView>,
    pub verdicts: Vec<VerdictRecord>,
    pub lengths: Vec<u32>,
}

pub struct MonitorOptions {
    pub snapshot: Option<PathBuf>,
    pub snapshot_every_minutes: u32,
    /// Stream minutes per wall-clock second; 0 runs flat out.
    pub replay_speed: f64,
}

pub struct MonitorHandle {
    commands: mpsc::Sender<Command>,
    view: watch::Receiver<Arc<View>>,
    join: Option<JoinHandle<Result<(), SnapshotError>>>,
}

impl MonitorHandle {
    pub fn commands(&self) -> mpsc::Sender<Command> {
        self.commands.clone()
    }

    pub fn view(&self) -> watch::Receiver<Arc<View>> {
        self.view.clone()
    }

    /// Resolve once the source has been fully consumed.
    pub async fn source_done(&self) {
        let mut rx = self.view.clone();
        let _ = rx.wait_for(|v| v.status.source_done).await;
    }

    /// Stop the writer; it persists a final snapshot first.
    pub fn shutdown(mut self) -> Result<(), SnapshotError> {
        let _ = self.commands.send(Command::Shutdown);
        match self.join.take() {
            Some(j) => j.join().expect("monitor thread panicked"),
            None => Ok(()),
        }
    }
}

impl Drop for MonitorHandle {
    fn drop(&mut self) {
        if let Some(j) = self.join.take() {
            let _ = self.commands.send(Command::Shutdown);
            let _ = j.join();
        }
    }
}

struct Writer {
    engine: Engine,
    fingerprint: String,
    opts: MonitorOptions,
    view: watch::Sender<Arc<View>>,
    processed: u64,
    source_done: bool,
    last_snapshot: Option<DateTime<Utc>>,
    last_persist_at: Option<DateTime<Utc>>,
}

fn spawn_reader(source: Source) -> mpsc::Receiver<Option<String>> {
    let (tx, rx) = mpsc::sync_channel(4096);
    let reader: Option<Box<dyn BufRead + Send>> = match source {
        Source::Replay(path) => match std::fs::File::open(&path) {
            Ok(f) => Some(Box::new(std::io::BufReader::new(f))),
            Err(e) => {
                warn!(path = %path.display(), error = %e, "cannot open replay file");
                None
            }
        },
        Source::Reader(r) => Some(r),
        Source::Idle => None,
    };
    std::thread::spawn(move || {
        if let Some(r) = reader {
            for line in r.lines() {
                match line {
                    Ok(l) => {
                        if tx.send(Some(l)).is_err() {
                            return;
                        }
                    }
                    Err(e) => {
                        warn!(error = %e, "stream read failed");
                        break;
                    }
                }
            }
        }
        let _ = tx.send(None);
    });
    rx
}

fn view_of(
    e: &Engine,
    fingerprint: &str,
    processed: u64,
    source_done: bool,
    last_snapshot: Option<DateTime<Utc>>,
) -> View {
    let mut alerts = e.alerts().to_vec();
    alerts.sort_by_key(|a| (a.raised_at, a.id));
    View {
        status: StatusBody {
            engine: e.status(),
            fingerprint: fingerprint.to_string(),
            source_done,
            readings_processed: processed,
            last_snapshot,
        },
        alerts,
        evaluations: e.evaluations().cloned().collect(),
        thresholds: e.thresholds(),
        verdicts: e.feedback().verdicts.clone(),
        lengths: e.settings().stp.lengths().to_vec(),
    }
}

impl Writer {
    fn build_view(&self) -> View {
        view_of(
            &self.engine,
            &self.fingerprint,
            self.processed,
            self.source_done,
            self.last_snapshot,
        )
    }

    fn publish(&self) {
        self.view.send_replace(Arc::new(self.build_view()));
    }

    fn persist(&mut self) -> Result<(), SnapshotError> {
        if let Some(path) = &self.opts.snapshot {
            Snapshot::of(&self.engine).persist(path)?;
            self.last_snapshot = self.engine.now();
        }
        self.last_persist_at = self.engine.now();
        Ok(())
    }

    fn stream_time(&self) -> DateTime<Utc> {
        self.engine.now().unwrap_or(DateTime::UNIX_EPOCH)
    }

    /// Returns false on shutdown.
    fn handle(&mut self, cmd: Command) -> bool {
        match cmd {
            Command::Verdict { id, verdict, reply } => {
                let at = self.stream_time();
                let r = self.engine.apply_verdict(id, verdict, at);
                if let Ok(o) = &r {
                    info!(id, ?verdict, r = o.reliability.r, "verdict recorded");
                }
                let _ = reply.send(r);
            }
            Command::MissedLeak { at, reply } => {
                let at = at.unwrap_or_else(|| self.stream_time());
                let _ = reply.send(self.engine.record_missed_leak(at));
            }
            Command::FireAlarm { active, reply } => {
                self.engine.set_fire_alarm(active);
                info!(active, "fire alarm input");
                let _ = reply.send(active);
            }
            Command::Persist { reply } => {
                let _ = reply.send(self.persist());
            }
            Command::Shutdown => return false,
        }
        self.publish();
        true
    }

    fn process_line(&mut self, line: &str, line_no: usize) {
        let line = line.trim();
        if line.is_empty() || line == CSV_HEADER {
            return;
        }
        let sample = match parse_row(line, line_no) {
            Ok(s) => s,
            Err(e) => {
                warn!(error = %e, "skipping malformed row");
                return;
            }
        };
        if let Some((t, reading)) = self.engine.last_reading() {
            if sample.timestamp <= t {
                return;
            }
            if sample.reading < reading {
                warn!(at = %sample.timestamp, reading = sample.reading, previous = reading, "meter rollback ignored");
                return;
            }
        }
        let before = self.engine.now();
        match self.engine.push_reading(&sample) {
            Ok(transitions) => {
                for t in transitions {
                    if matches!(t.state, AlertState::Confirmed) {
                        info!(id = t.id, criterion = ?t.criterion, measured = t.measured, "leak confirmed");
                    }
                }
            }
            Err(e) => warn!(error = %e, "reading rejected"),
        }
        self.processed += 1;
        if let (Some(b), Some(a)) = (before, self.engine.now()) {
            let it = self.engine.settings().interval_minutes as i64;
            let gap = (a - b).num_minutes() / it - 1;
            if gap > 0 {
                warn!(from = %b, intervals = gap, "stream gap");
            }
        }
    }

    fn maybe_persist(&mut self) -> Result<(), SnapshotError> {
        let every = Duration::minutes(self.opts.snapshot_every_minutes as i64);
        let (Some(now), last) = (self.engine.now(), self.last_persist_at) else {
            return Ok(());
        };
        match last {
            Some(l) if now - l < every => Ok(()),
            None => {
                self.last_persist_at = Some(now);
                Ok(())
            }
            _ => self.persist(),
        }
    }

    fn run(
        mut self,
        lines: mpsc::Receiver<Option<String>>,
        commands: mpsc::Receiver<Command>,
    ) -> Result<(), SnapshotError> {
        let mut line_no = 0usize;
        let mut wake: Option<Instant> = None;
        let paced = self.opts.replay_speed > 0.0;
        loop {
            while let Ok(c) = commands.try_recv() {
                if !self.handle(c) {
                    return self.stop();
                }
            }
            if let Some(w) = wake.take() {
                loop {
                    let now = Instant::now();
                    if now >= w {
                        break;
                    }
                    match commands.recv_timeout(w - now) {
                        Ok(c) => {
                            if !self.handle(c) {
                                return self.stop();
                            }
                        }
                        Err(RecvTimeoutError::Timeout) => break,
                        Err(RecvTimeoutError::Disconnected) => return self.stop(),
                    }
                }
            }
            if self.source_done {
                match commands.recv() {
                    Ok(c) => {
                        if !self.handle(c) {
                            return self.stop();
                        }
                    }
                    Err(_) => return self.stop(),
                }
                continue;
            }
            match lines.recv_timeout(WallDuration::from_millis(50)) {
                Ok(Some(line)) => {
                    line_no += 1;
                    let before = self.engine.now();
                    self.process_line(&line, line_no);
                    self.maybe_persist()?;
                    if paced {
                        if let (Some(b), Some(a)) = (before, self.engine.now()) {
                            let minutes = (a - b).num_seconds() as f64 / 60.0;
                            wake = Some(
                                Instant::now()
                                    + WallDuration::from_secs_f64(minutes / self.opts.replay_speed),
                            );
                        }
                        self.publish();
                    } else if self.processed.is_multiple_of(60) {
                        self.publish();
                    }
                }
                Ok(None) | Err(RecvTimeoutError::Disconnected) => {
                    self.source_done = true;
                    info!(readings = self.processed, "stream finished");
                    self.persist()?;
                    self.publish();
                }
                Err(RecvTimeoutError::Timeout) => {}
            }
        }
    }

    fn stop(mut self) -> Result<(), SnapshotError> {
        let r = self.persist();
        self.publish();
        r
    }
}

/// Start the writer thread over `engine` and `source`.
pub fn start(engine: Engine, source: Source, opts: MonitorOptions) -> MonitorHandle {
    let fp = fingerprint(engine.settings(), engine.coefficients());
    let (view_tx, view_rx) = watch::channel(Arc::new(view_of(&engine, &fp, 0, false, None)));
    let writer = Writer {
        engine,
        fingerprint: fp,
        opts,
        view: view_tx,
        processed: 0,
        source_done: false,
        last_snapshot: None,
        last_persist_at: None,
    };
    let (cmd_tx, cmd_rx) = mpsc::channel();
    let lines = spawn_reader(source);
    let join = std::thread::Builder::new()
        .name("leakwatch-writer".into())
        .spawn(move || writer.run(lines, cmd_rx))
        .expect("spawn writer thread");
    MonitorHandle {
        commands: cmd_tx,
        view: view_rx,
        join: Some(join),
    }
}
