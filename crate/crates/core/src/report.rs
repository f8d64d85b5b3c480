//! Machine-readable outputs: the alert transition log, a run summary and
//! per-length window tables (consumption against threshold).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::engine::{Engine, TileEvaluation};
use crate::detect::{AlertState, AlertTransition, Criterion};
use crate::metering::{day_start, FlowEntry};

pub const WINDOW_TABLE_HEADER: &str = "window_start,consumption,MD,TMD,alert_state";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// One JSON object per line, in emission order.
pub fn transitions_jsonl(transitions: &[AlertTransition]) -> String {
    let mut out = String::new();
    for t in transitions {
        out.push_str(&serde_json::to_string(t).expect("transition serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_transitions(text: &str) -> Result<Vec<AlertTransition>, ReportError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReportError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Latest state of every alert id in a transition log.
pub fn final_states(transitions: &[AlertTransition]) -> BTreeMap<u64, AlertState> {
    let mut m = BTreeMap::new();
    for t in transitions {
        m.insert(t.id, t.state);
    }
    m
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriterionCounts {
    pub raised: usize,
    pub potential: usize,
    pub confirmed: usize,
    pub cleared_by_zero_flow: usize,
    pub expired: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub intervals: usize,
    pub missing_intervals: usize,
    pub total_liters: f64,
    pub learning_complete: bool,
    pub elapsed_days: u32,
    /// Alerts that ever reached the given state, per criterion.
    pub average_deviation: CriterionCounts,
    pub steady_consumption: CriterionCounts,
    /// Confirmed alerts of either criterion.
    pub confirmed: usize,
    /// Confirmed average-deviation alerts by `T1-T2` horizon.
    pub confirmed_by_horizon: BTreeMap<String, usize>,
}

impl RunSummary {
    pub fn from_run(flows: &[FlowEntry], transitions: &[AlertTransition], engine: &Engine) -> Self {
        let mut s = RunSummary {
            intervals: flows.len(),
            missing_intervals: flows.iter().filter(|f| f.volume().is_none()).count(),
            total_liters: round3(flows.iter().filter_map(FlowEntry::volume).sum()),
            learning_complete: engine.learning_complete(),
            elapsed_days: engine.learning().map_or(0, |l| l.elapsed_days),
            ..Default::default()
        };
        for t in transitions {
            let c = match t.criterion {
                Criterion::AverageDeviation => &mut s.average_deviation,
                Criterion::SteadyConsumption => &mut s.steady_consumption,
            };
            match t.state {
                AlertState::Potential => {
                    c.raised += 1;
                    c.potential += 1;
                }
                AlertState::Confirmed => {
                    if t.criterion == Criterion::SteadyConsumption {
                        c.raised += 1;
                    }
                    c.confirmed += 1;
                    s.confirmed += 1;
                    if let Some((a, b)) = t.horizon {
                        *s.confirmed_by_horizon
                            .entry(format!("{a}-{b}"))
                            .or_default() += 1;
                    }
                }
                AlertState::ClearedByZeroFlow => c.cleared_by_zero_flow += 1,
                AlertState::Expired => c.expired += 1,
                AlertState::JudgedFalse | AlertState::JudgedReal => {}
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.3}")).unwrap_or_default()
}

/// One CSV table per window length, keyed by length in minutes.
///
/// `alert_state` is the final state of the alert raised or confirmed on the
/// window, taken from `transitions` when present.
pub fn window_tables<'a>(
    lengths: &[u32],
    evaluations: impl IntoIterator<Item = &'a TileEvaluation>,
    transitions: &[AlertTransition],
) -> BTreeMap<u32, String> {
    let states = final_states(transitions);
    let mut tables: BTreeMap<u32, String> = lengths
        .iter()
        .map(|&l| (l, format!("{WINDOW_TABLE_HEADER}\n")))
        .collect();
    for ev in evaluations {
        let Some(t) = tables.get_mut(&ev.window.length()) else {
            continue;
        };
        let start = day_start(ev.date) + chrono::Duration::minutes(ev.window.start_offset() as i64);
        let state = ev
            .alert_id
            .and_then(|id| states.get(&id))
            .map(|s| s.as_str())
            .unwrap_or("");
        let _ = writeln!(
            t,
            "{},{},{},{},{}",
            start.format("%Y-%m-%dT%H:%M:%SZ"),
            cell(ev.consumption),
            cell(ev.md),
            cell(ev.tmd),
            state
        );
    }
    tables
}

pub fn window_table_name(length: u32) -> String {
    format!("windows_{length:03}min.csv")
}
