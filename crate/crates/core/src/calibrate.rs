//! Coefficient calibration against a labelled corpus.
//!
//! A corpus is a directory of meter logs `<name>.csv`, each with a sidecar
//! `<name>.labels.jsonl` marking leak intervals. The search sweeps a grid of
//! `(a, b)` per pattern, one pattern at a time. Among tables whose confirmed
//! false alerts stay within the budget it keeps the one with the fewest leaks
//! missed or confirmed after the deadline, then the one raising the fewest
//! potentials outside leaks.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::engine::{Engine, EngineError, EngineSettings};
use crate::detect::{AlertState, Criterion, Span};
use crate::md::{CoefficientTable, Coefficients};
use crate::metering::{ingest_csv, to_flow_with, FlowEntry, MeteringError};
use crate::pattern::PatternClass;
use crate::sim::{
    default_profiles, inject_leak, labels, meter_samples, simulate, HouseholdProfile, LeakSpec,
    SimError, Trace, TraceLabel,
};

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("corpus {0} holds no traces")]
    EmptyCorpus(PathBuf),
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Metering {
        path: PathBuf,
        source: MeteringError,
    },
    #[error("{path} line {line}: {message}")]
    Labels {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusTrace {
    pub name: String,
    pub flows: Vec<FlowEntry>,
    /// Leak intervals, merged into contiguous spans.
    pub incidents: Vec<Span>,
}

fn incidents_of(labels: &[TraceLabel], interval: u32) -> Vec<Span> {
    let step = Duration::minutes(interval as i64);
    let mut out: Vec<Span> = Vec::new();
    for l in labels.iter().filter(|l| l.leak) {
        match out.last_mut() {
            Some(s) if s.end == l.interval_start => s.end = l.interval_start + step,
            _ => out.push(Span {
                start: l.interval_start,
                end: l.interval_start + step,
            }),
        }
    }
    out
}

fn read(path: &Path) -> Result<String, CalibrateError> {
    std::fs::read_to_string(path).map_err(|e| CalibrateError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Load every `*.csv` in `dir` in file-name order. A missing label sidecar
/// means the trace is leak-free.
pub fn load_corpus(
    dir: &Path,
    settings: &EngineSettings,
) -> Result<Vec<CorpusTrace>, CalibrateError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CalibrateError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let samples =
            ingest_csv(read(&p)?.as_bytes()).map_err(|source| CalibrateError::Metering {
                path: p.clone(),
                source,
            })?;
        let flows = to_flow_with(&samples, settings.interval_minutes, settings.gap_policy)
            .map_err(|source| CalibrateError::Metering {
                path: p.clone(),
                source,
            })?;
        let stem = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let label_path = p.with_file_name(format!("{stem}.labels.jsonl"));
        let incidents = if label_path.exists() {
            let text = read(&label_path)?;
            let mut ls = Vec::new();
            for (i, line) in text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
            {
                let l: TraceLabel =
                    serde_json::from_str(line).map_err(|e| CalibrateError::Labels {
                        path: label_path.clone(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                ls.push(l);
            }
            // Labels are per minute; incidents are compared as spans.
            incidents_of(&ls, 1)
        } else {
            Vec::new()
        };
        out.push(CorpusTrace {
            name: stem,
            flows,
            incidents,
        });
    }
    if out.is_empty() {
        return Err(CalibrateError::EmptyCorpus(dir.to_path_buf()));
    }
    Ok(out)
}

/// Minute of day at which each bundled leak starts.
pub const CORPUS_ONSETS: [u32; 6] = [67, 307, 547, 787, 1027, 1237];

/// Leak-free months of every default profile plus 3 L/min leak days at
/// onsets spread over the day, each on its own household seed.
pub fn default_corpus_traces(start: NaiveDate) -> Result<Vec<(String, Trace)>, CalibrateError> {
    let mut out = Vec::new();
    for p in default_profiles() {
        out.push((
            format!("family{}_clean", p.family_size),
            simulate(&p, start, 30)?,
        ));
        for (k, &minute) in CORPUS_ONSETS.iter().enumerate() {
            let household = HouseholdProfile::new(p.family_size, p.seed + k as u64 + 1);
            let mut leaky = simulate(&household, start, 15)?;
            let onset = leaky.start + Duration::days(14) + Duration::minutes(minute as i64);
            inject_leak(&mut leaky, &LeakSpec::per_minute(3.0, onset, None))?;
            out.push((
                format!(
                    "family{}_leak_{:02}{:02}",
                    p.family_size,
                    minute / 60,
                    minute % 60
                ),
                leaky,
            ));
        }
    }
    Ok(out)
}

pub fn corpus_trace(name: &str, trace: &Trace, settings: &EngineSettings) -> CorpusTrace {
    let flows = to_flow_with(
        &meter_samples(trace, 0.0),
        settings.interval_minutes,
        settings.gap_policy,
    )
    .unwrap_or_default();
    CorpusTrace {
        name: name.to_string(),
        flows,
        incidents: incidents_of(&labels(trace), 1),
    }
}

pub fn default_corpus(
    start: NaiveDate,
    settings: &EngineSettings,
) -> Result<Vec<CorpusTrace>, CalibrateError> {
    Ok(default_corpus_traces(start)?
        .iter()
        .map(|(n, t)| corpus_trace(n, t, settings))
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    /// Confirmed alerts overlapping no leak.
    pub false_alerts: usize,
    /// Leaks without a confirmed average-deviation alert.
    pub missed_leaks: usize,
    /// Leaks confirmed only after the deadline.
    pub late_leaks: usize,
    /// Average-deviation potentials overlapping no leak.
    pub false_potentials: usize,
    pub incidents: usize,
    /// Sum over detected leaks of minutes from onset to confirmation.
    pub delay_minutes: i64,
}

fn score_trace(
    trace: &CorpusTrace,
    settings: &EngineSettings,
    table: &CoefficientTable,
    deadline_minutes: i64,
) -> Result<Score, CalibrateError> {
    let mut engine = Engine::new(
        EngineSettings {
            evaluation_log: 0,
            ..settings.clone()
        },
        table.clone(),
    )?;
    let transitions = engine.push_all(&trace.flows)?;
    let confirmed: Vec<_> = transitions
        .iter()
        .filter(|t| t.state == AlertState::Confirmed)
        .collect();
    let mut s = Score {
        incidents: trace.incidents.len(),
        ..Default::default()
    };
    let clean = |span: &Span| !trace.incidents.iter().any(|i| i.overlaps(span));
    s.false_alerts = confirmed.iter().filter(|c| clean(&c.span)).count();
    s.false_potentials = transitions
        .iter()
        .filter(|t| t.criterion == Criterion::AverageDeviation && t.state == AlertState::Potential)
        .filter(|t| clean(&t.span))
        .count();
    for inc in &trace.incidents {
        let first: Option<DateTime<Utc>> = confirmed
            .iter()
            .filter(|c| c.criterion == Criterion::AverageDeviation && inc.overlaps(&c.span))
            .map(|c| c.timestamp)
            .min();
        match first {
            Some(t) => {
                let delay = (t - inc.start).num_minutes();
                s.delay_minutes += delay;
                if delay > deadline_minutes {
                    s.late_leaks += 1;
                }
            }
            None => s.missed_leaks += 1,
        }
    }
    Ok(s)
}

/// Score a table over the corpus. Traces run on separate threads; results
/// are reduced in corpus order.
pub fn evaluate(
    corpus: &[CorpusTrace],
    settings: &EngineSettings,
    table: &CoefficientTable,
    deadline_minutes: i64,
) -> Result<Score, CalibrateError> {
    let results: Vec<Result<Score, CalibrateError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = corpus
            .iter()
            .map(|t| scope.spawn(move || score_trace(t, settings, table, deadline_minutes)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    });
    let mut total = Score::default();
    for r in results {
        let s = r?;
        total.false_alerts += s.false_alerts;
        total.missed_leaks += s.missed_leaks;
        total.late_leaks += s.late_leaks;
        total.false_potentials += s.false_potentials;
        total.incidents += s.incidents;
        total.delay_minutes += s.delay_minutes;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub sweeps: usize,
    /// Minutes from onset by which a leak must be confirmed.
    pub deadline_minutes: i64,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            a: vec![0.9, 1.0, 1.1, 1.2, 1.3, 1.5, 1.8],
            b: vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0],
            sweeps: 2,
            deadline_minutes: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub table: CoefficientTable,
    pub score: Score,
    pub feasible: bool,
    pub evaluations: usize,
}

/// Ordering key: feasibility, then missed or late leaks, then false alerts,
/// then total delay, then potentials outside leaks.
fn key(s: &Score, budget: usize) -> (bool, usize, usize, i64, usize) {
    (
        s.false_alerts > budget,
        s.missed_leaks + s.late_leaks,
        s.false_alerts,
        s.delay_minutes,
        s.false_potentials,
    )
}

fn with_pattern(
    base: &CoefficientTable,
    pattern: PatternClass,
    c: Coefficients,
    rl: usize,
) -> CoefficientTable {
    let mut t = base.clone();
    for i in 1..=rl {
        t.set(pattern, i, c.a, c.b);
    }
    t
}

/// Coordinate search from `start`. Ties keep the earlier candidate, so the
/// result depends only on the inputs.
pub fn calibrate(
    corpus: &[CorpusTrace],
    settings: &EngineSettings,
    start: &CoefficientTable,
    budget: usize,
    grid: &Grid,
) -> Result<CalibrationResult, CalibrateError> {
    let rl = settings.stp.rl();
    let mut best = start.clone();
    let mut best_score = evaluate(corpus, settings, &best, grid.deadline_minutes)?;
    let mut evaluations = 1;
    for _ in 0..grid.sweeps {
        let mut improved = false;
        for pattern in PatternClass::ALL {
            for &a in &grid.a {
                for &b in &grid.b {
                    let cand = with_pattern(&best, pattern, Coefficients { a, b }, rl);
                    if cand == best {
                        continue;
                    }
                    let s = evaluate(corpus, settings, &cand, grid.deadline_minutes)?;
                    evaluations += 1;
                    if key(&s, budget) < key(&best_score, budget) {
                        best = cand;
                        best_score = s;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok(CalibrationResult {
        feasible: best_score.false_alerts <= budget,
        table: best,
        score: best_score,
        evaluations,
    })
}
