//! Leak criteria and the alert lifecycle.
//!
//! Three criteria run over the flow stream:
//!
//! - zero flow: a short pseudo-zero stretch proves there is no leak right now
//!   and clears pending suspicions;
//! - average deviation: consumption above the window threshold at a short
//!   horizon raises a potential alert, confirmed if the following longer
//!   window also deviates;
//! - steady consumption: an uninterrupted flow whose samples cluster around
//!   their median.

pub mod engine;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::md::StpVector;
use crate::metering::{DayWindow, FlowSample};
use crate::pattern::PatternClass;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("need {needed} contiguous samples, have {have}")]
    InsufficientCoverage { needed: usize, have: usize },
    #[error("sample at {at} is below the minimum flow")]
    InterruptedFlow { at: DateTime<Utc> },
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Liters over `zero_window` still treated as no flow.
    pub pseudo_zero: f64,
    /// Minutes.
    pub zero_window: u32,
    /// Half-width of the median band as a fraction of the median.
    pub sd: f64,
    /// Minutes of uninterrupted flow examined by the steady criterion.
    pub steady_window: u32,
    /// Liters per interval below which flow counts as interrupted.
    pub steady_min_flow: f64,
    /// `(T1, T2)` pairs in minutes. Empty means each STP length paired with
    /// its successor.
    pub horizon_pairs: Vec<(u32, u32)>,
    pub fire_alarm_suppressed: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            pseudo_zero: 0.1,
            zero_window: 2,
            sd: 0.05,
            steady_window: 120,
            steady_min_flow: 0.2,
            horizon_pairs: Vec::new(),
            fire_alarm_suppressed: false,
        }
    }
}

impl DetectorConfig {
    /// Effective horizon pairs, sorted by `T1`.
    pub fn pairs(&self, stp: &StpVector) -> Vec<(u32, u32)> {
        let mut pairs = if self.horizon_pairs.is_empty() {
            stp.lengths().windows(2).map(|w| (w[0], w[1])).collect()
        } else {
            self.horizon_pairs.clone()
        };
        pairs.sort();
        pairs
    }

    pub fn validate(&self, stp: &StpVector, it: u32) -> Result<(), DetectError> {
        let bad = |m: String| Err(DetectError::InvalidConfig(m));
        if !(self.sd > 0.0 && self.sd < 1.0) {
            return bad(format!("sd must be in (0, 1), got {}", self.sd));
        }
        if self.pseudo_zero.is_nan() || self.pseudo_zero < 0.0 {
            return bad("pseudo_zero must be non-negative".into());
        }
        if self.steady_min_flow.is_nan() || self.steady_min_flow < 0.0 {
            return bad("steady_min_flow must be non-negative".into());
        }
        if self.zero_window == 0 || !self.zero_window.is_multiple_of(it) {
            return bad(format!(
                "zero_window {} must be a positive multiple of {it}",
                self.zero_window
            ));
        }
        if self.steady_window == 0 || !self.steady_window.is_multiple_of(it) {
            return bad(format!(
                "steady_window {} must be a positive multiple of {it}",
                self.steady_window
            ));
        }
        for &(t1, t2) in &self.pairs(stp) {
            if t1 >= t2 {
                return bad(format!("horizon pair ({t1}, {t2}) needs T1 < T2"));
            }
            if stp.index_of(t1).is_none() || stp.index_of(t2).is_none() {
                return bad(format!(
                    "horizon pair ({t1}, {t2}) is not drawn from the STP lengths"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    AverageDeviation,
    SteadyConsumption,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlertState {
    Potential,
    Confirmed,
    ClearedByZeroFlow,
    /// The paired longer window closed without deviating.
    Expired,
    JudgedFalse,
    JudgedReal,
}

impl AlertState {
    pub const ALL: [AlertState; 6] = [
        AlertState::Potential,
        AlertState::Confirmed,
        AlertState::ClearedByZeroFlow,
        AlertState::Expired,
        AlertState::JudgedFalse,
        AlertState::JudgedReal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlertState::Potential => "Potential",
            AlertState::Confirmed => "Confirmed",
            AlertState::ClearedByZeroFlow => "ClearedByZeroFlow",
            AlertState::Expired => "Expired",
            AlertState::JudgedFalse => "JudgedFalse",
            AlertState::JudgedReal => "JudgedReal",
        }
    }

    pub fn is_open(self) -> bool {
        self == AlertState::Potential
    }

    /// Confirmed, whether or not a verdict followed.
    pub fn was_confirmed(self) -> bool {
        matches!(
            self,
            AlertState::Confirmed | AlertState::JudgedFalse | AlertState::JudgedReal
        )
    }
}

impl fmt::Display for AlertState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlertState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AlertState::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown alert state `{s}`"))
    }
}

/// A closed time range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl Span {
    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// A window on a specific date.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileRef {
    pub date: NaiveDate,
    pub window: DayWindow,
}

impl TileRef {
    pub fn span(&self) -> Span {
        Span {
            start: self.window.start_on(self.date),
            end: self.window.end_on(self.date),
        }
    }
}

/// Consumption and threshold of one window at evaluation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub tile: TileRef,
    pub pattern: PatternClass,
    pub measured: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub id: u64,
    pub criterion: Criterion,
    pub state: AlertState,
    pub span: Span,
    pub measured: f64,
    pub threshold: f64,
    pub raised_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    /// `(T1, T2)` for average-deviation alerts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<(u32, u32)>,
    /// The window that raised the alert.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first: Option<Evidence>,
    /// The longer window awaited or used for confirmation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TileRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirmation: Option<Evidence>,
}

/// One line of the alert report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlertTransition {
    pub id: u64,
    pub criterion: Criterion,
    pub state: AlertState,
    pub span: Span,
    pub measured: f64,
    pub threshold: f64,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<(u32, u32)>,
}

impl AlertTransition {
    pub fn of(alert: &AlertRecord, at: DateTime<Utc>) -> Self {
        Self {
            id: alert.id,
            criterion: alert.criterion,
            state: alert.state,
            span: alert.span,
            measured: alert.measured,
            threshold: alert.threshold,
            timestamp: at,
            horizon: alert.horizon,
        }
    }
}

/// True when the trailing `zero_window` carries at most `pseudo_zero` liters.
pub fn check_zero_flow(
    flows: &[FlowSample],
    cfg: &DetectorConfig,
    it: u32,
) -> Result<bool, DetectError> {
    let needed = (cfg.zero_window / it.max(1)) as usize;
    if flows.len() < needed {
        return Err(DetectError::InsufficientCoverage {
            needed,
            have: flows.len(),
        });
    }
    let tail = &flows[flows.len() - needed..];
    let contiguous = tail
        .windows(2)
        .all(|w| w[0].interval_end() == w[1].interval_start);
    if !contiguous {
        return Err(DetectError::InsufficientCoverage { needed, have: 0 });
    }
    Ok(is_pseudo_zero(tail.iter().map(|f| f.volume).sum(), cfg))
}

pub(crate) fn is_pseudo_zero(total: f64, cfg: &DetectorConfig) -> bool {
    total <= cfg.pseudo_zero + 1e-9
}

/// Strictly above the threshold.
pub fn check_deviation(consumption: f64, threshold: f64) -> bool {
    consumption > threshold
}

/// Median; the mean of the two middle values for even counts.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Fraction of samples inside `[med - med*sd, med + med*sd]`.
pub fn band_fraction(xs: &[f64], sd: f64) -> f64 {
    let Some(med) = median(xs) else {
        return 0.0;
    };
    let (lo, hi) = (med - med * sd, med + med * sd);
    // A little slack keeps boundary samples inside despite rounding.
    let eps = 1e-9 * med.abs().max(1.0);
    let inside = xs
        .iter()
        .filter(|x| **x >= lo - eps && **x <= hi + eps)
        .count();
    inside as f64 / xs.len() as f64
}

/// True when more than half the samples sit in the median band.
pub fn check_steady(samples: &[FlowSample], cfg: &DetectorConfig) -> Result<bool, DetectError> {
    if let Some(s) = samples.iter().find(|s| s.volume < cfg.steady_min_flow) {
        return Err(DetectError::InterruptedFlow {
            at: s.interval_start,
        });
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.volume).collect();
    Ok(steady_volumes(&xs, cfg.sd))
}

pub(crate) fn steady_volumes(xs: &[f64], sd: f64) -> bool {
    !xs.is_empty() && band_fraction(xs, sd) > 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;
    use proptest::prelude::*;

    fn flows(volumes: &[f64]) -> Vec<FlowSample> {
        let t0 = DateTime::parse_from_rfc3339("2024-01-01T10:00:00Z")
            .unwrap()
            .with_timezone(&Utc);
        volumes
            .iter()
            .enumerate()
            .map(|(i, v)| FlowSample {
                interval_start: t0 + Duration::minutes(i as i64),
                interval_length: 1,
                volume: *v,
            })
            .collect()
    }

    #[test]
    fn zero_flow_tolerance() {
        let cfg = DetectorConfig::default();
        assert!(check_zero_flow(&flows(&[0.0, 0.0]), &cfg, 1).unwrap());
        assert!(check_zero_flow(&flows(&[0.05, 0.04]), &cfg, 1).unwrap());
        assert!(check_zero_flow(&flows(&[0.0, 0.1]), &cfg, 1).unwrap());
        assert!(!check_zero_flow(&flows(&[0.1, 0.1]), &cfg, 1).unwrap());
        assert!(matches!(
            check_zero_flow(&flows(&[0.0]), &cfg, 1),
            Err(DetectError::InsufficientCoverage { .. })
        ));
    }

    #[test]
    fn deviation_is_strict() {
        assert!(check_deviation(41.0, 40.0));
        assert!(!check_deviation(40.0, 40.0));
        assert!(!check_deviation(0.0, 40.0));
    }

    #[test]
    fn steady_examples() {
        let cfg = DetectorConfig::default();
        assert!(check_steady(&flows(&[3.0, 3.1, 2.9, 3.0, 10.0]), &cfg).unwrap());
        assert!(!check_steady(&flows(&[1.0, 2.0, 3.0, 4.0, 20.0, 30.0, 40.0]), &cfg).unwrap());
        assert!(check_steady(&flows(&[1.5; 120]), &cfg).unwrap());
        assert!(matches!(
            check_steady(&flows(&[1.0, 0.1, 1.0]), &cfg),
            Err(DetectError::InterruptedFlow { .. })
        ));
        assert_eq!(band_fraction(&[3.0, 3.1, 2.9, 3.0, 10.0], 0.05), 0.8);
        assert_eq!(median(&[1.0, 4.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn band_boundaries_are_inclusive() {
        // Median 2.0, band [1.9, 2.1]: the boundary samples count.
        assert_eq!(band_fraction(&[1.9, 2.0, 2.1, 5.0, 0.5], 0.05), 0.6);
    }

    #[test]
    fn state_names() {
        assert_eq!(
            "potential".parse::<AlertState>().unwrap(),
            AlertState::Potential
        );
        assert_eq!(
            "ClearedByZeroFlow".parse::<AlertState>().unwrap(),
            AlertState::ClearedByZeroFlow
        );
        assert!("bogus".parse::<AlertState>().is_err());
        assert_eq!(
            serde_json::to_string(&AlertState::JudgedReal).unwrap(),
            "\"JudgedReal\""
        );
    }

    #[test]
    fn config_validation() {
        let stp = StpVector::stp1();
        let cfg = DetectorConfig::default();
        cfg.validate(&stp, 1).unwrap();
        assert_eq!(cfg.pairs(&stp)[0], (15, 30));
        assert_eq!(cfg.pairs(&stp).len(), 6);
        let bad = DetectorConfig {
            sd: 1.0,
            ..DetectorConfig::default()
        };
        assert!(bad.validate(&stp, 1).is_err());
        let bad = DetectorConfig {
            horizon_pairs: vec![(30, 15)],
            ..DetectorConfig::default()
        };
        assert!(bad.validate(&stp, 1).is_err());
        let bad = DetectorConfig {
            horizon_pairs: vec![(15, 45)],
            ..DetectorConfig::default()
        };
        assert!(bad.validate(&stp, 1).is_err());
    }

    proptest! {
        #[test]
        fn steady_scale_invariant(xs in prop::collection::vec(0.5f64..50.0, 1..80), k in 0.1f64..20.0) {
            // Quantize so scaling cannot move samples across the band edge by rounding alone.
            let xs: Vec<f64> = xs.iter().map(|x| (x * 8.0).round() / 8.0).collect();
            let scaled: Vec<f64> = xs.iter().map(|x| x * k).collect();
            prop_assert_eq!(steady_volumes(&xs, 0.05), steady_volumes(&scaled, 0.05));
        }
    }
}
