//! Maximum-deviation thresholds and feedback tuning.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metering::{DayWindow, MINUTES_PER_DAY};
use crate::pattern::PatternClass;
use crate::stats::{critical_value, CriticalValueTable, WindowStats};

/// Upper confidence limits at or below this are treated as no consumption.
pub const PSEUDO_ZERO_K: f64 = 0.3;

/// Shipped coefficient table.
pub const DEFAULT_COEFFICIENTS_CSV: &str = include_str!("../../../config/coefficients.csv");

#[derive(Debug, Error, PartialEq)]
pub enum MdError {
    #[error(
        "STP lengths must be strictly increasing, positive, at most a day, and at least two: {0:?}"
    )]
    InvalidStp(Vec<u32>),
    #[error("STP index {n} outside 1..={rl}")]
    IndexOutOfRange { n: usize, rl: usize },
    #[error("window {0} does not match any STP length")]
    WindowNotInStp(DayWindow),
    #[error("no segments to compose")]
    EmptySegments,
    #[error("segment length must be positive")]
    ZeroLengthSegment,
    #[error("coefficients line {line}: {reason}")]
    MalformedCoefficients { line: usize, reason: String },
    #[error("no coefficients for {pattern} at STP index {index}")]
    MissingCoefficients { pattern: PatternClass, index: usize },
    #[error("threshold tuning is only available after the learning period")]
    LearningIncomplete,
    #[error("tuning undefined for r = 0 without alerts")]
    UndefinedTuning,
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

/// Ordered short-time-period lengths in minutes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct StpVector(Vec<u32>);

impl StpVector {
    pub fn new(lengths: Vec<u32>) -> Result<Self, MdError> {
        let ok = lengths.len() >= 2
            && lengths.iter().all(|&l| l > 0 && l <= MINUTES_PER_DAY)
            && lengths.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(Self(lengths))
        } else {
            Err(MdError::InvalidStp(lengths))
        }
    }

    pub fn stp1() -> Self {
        Self(vec![15, 30, 60, 120, 300, 480, 720])
    }

    pub fn lengths(&self) -> &[u32] {
        &self.0
    }

    /// Resolution level: number of lengths.
    pub fn rl(&self) -> usize {
        self.0.len()
    }

    /// 1-based position of a length.
    pub fn index_of(&self, length: u32) -> Option<usize> {
        self.0.iter().position(|&l| l == length).map(|i| i + 1)
    }

    pub fn length_at(&self, n: usize) -> Option<u32> {
        n.checked_sub(1).and_then(|i| self.0.get(i)).copied()
    }

    /// STP index for a window: an exact length match, or a day-end tile
    /// truncated at midnight from one of the lengths.
    pub fn index_for_window(&self, window: &DayWindow) -> Option<usize> {
        if let Some(n) = self.index_of(window.length()) {
            return Some(n);
        }
        if window.end_offset() != MINUTES_PER_DAY {
            return None;
        }
        self.0
            .iter()
            .position(|&l| {
                window.start_offset().is_multiple_of(l)
                    && window.length() < l
                    && DayWindow::tile_containing(l, window.start_offset()) == *window
            })
            .map(|i| i + 1)
    }

    /// Largest slot size that aligns every tile boundary of every length.
    pub fn base_resolution(&self) -> u32 {
        self.0.iter().fold(MINUTES_PER_DAY, |g, &l| gcd(g, l))
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl TryFrom<Vec<u32>> for StpVector {
    type Error = MdError;
    fn try_from(v: Vec<u32>) -> Result<Self, Self::Error> {
        StpVector::new(v)
    }
}

impl From<StpVector> for Vec<u32> {
    fn from(s: StpVector) -> Self {
        s.0
    }
}

impl Default for StpVector {
    fn default() -> Self {
        Self::stp1()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub a: f64,
    pub b: f64,
}

/// The `a` and `b` multipliers per pattern and STP index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTable {
    entries: BTreeMap<PatternClass, BTreeMap<usize, Coefficients>>,
}

impl CoefficientTable {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// The same `(a, b)` per pattern for indices 1..=rl.
    pub fn uniform(rl: usize, per_pattern: &[(PatternClass, f64, f64)]) -> Self {
        let mut t = Self::empty();
        for &(p, a, b) in per_pattern {
            for n in 1..=rl {
                t.set(p, n, a, b);
            }
        }
        t
    }

    /// The shipped table.
    pub fn defaults() -> Self {
        Self::parse(DEFAULT_COEFFICIENTS_CSV).expect("bundled coefficient table parses")
    }

    pub fn load(path: &Path) -> Result<Self, MdError> {
        let text = std::fs::read_to_string(path).map_err(|e| MdError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Parse `pattern,stp_index,a,b` rows. Blank lines and `#` comments are
    /// skipped; everything else must be well-formed.
    pub fn parse(text: &str) -> Result<Self, MdError> {
        let mut table = Self::empty();
        let mut saw_header = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| MdError::MalformedCoefficients {
                line: line_no,
                reason: reason.to_string(),
            };
            if !saw_header {
                if line.replace(' ', "") != "pattern,stp_index,a,b" {
                    return Err(bad("expected header `pattern,stp_index,a,b`"));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(bad("expected four fields"));
            }
            let pattern: PatternClass = fields[0].parse().map_err(|e: String| bad(&e))?;
            let n: usize = fields[1]
                .parse()
                .map_err(|_| bad("stp_index must be a positive integer"))?;
            if n == 0 {
                return Err(bad("stp_index is 1-based"));
            }
            let a: f64 = fields[2].parse().map_err(|_| bad("a is not a number"))?;
            let b: f64 = fields[3].parse().map_err(|_| bad("b is not a number"))?;
            if !(a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0) {
                return Err(bad("coefficients must be finite and non-negative"));
            }
            if table.get(pattern, n).is_some() {
                return Err(bad("duplicate row"));
            }
            table.set(pattern, n, a, b);
        }
        if !saw_header {
            return Err(MdError::MalformedCoefficients {
                line: 1,
                reason: "missing header".into(),
            });
        }
        Ok(table)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pattern,stp_index,a,b\n");
        for (p, row) in &self.entries {
            for (n, c) in row {
                let _ = writeln!(out, "{p},{n},{},{}", c.a, c.b);
            }
        }
        out
    }

    pub fn get(&self, pattern: PatternClass, n: usize) -> Option<Coefficients> {
        self.entries.get(&pattern).and_then(|r| r.get(&n)).copied()
    }

    pub fn set(&mut self, pattern: PatternClass, n: usize, a: f64, b: f64) {
        self.entries
            .entry(pattern)
            .or_default()
            .insert(n, Coefficients { a, b });
    }

    /// Check that every pattern has coefficients for every STP index.
    pub fn validate_for(&self, stp: &StpVector) -> Result<(), MdError> {
        for p in PatternClass::ALL {
            for n in 1..=stp.rl() {
                if self.get(p, n).is_none() {
                    return Err(MdError::MissingCoefficients {
                        pattern: p,
                        index: n,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Fallback threshold for pseudo-zero windows: `20 (1 + n)` liters.
pub fn c_coefficient(n: usize, stp: &StpVector) -> Result<f64, MdError> {
    if n == 0 || n > stp.rl() {
        return Err(MdError::IndexOutOfRange { n, rl: stp.rl() });
    }
    Ok(20.0 * (1 + n) as f64)
}

/// Maximum deviation for one window.
///
/// With fewer than two observations there is no confidence limit yet and the
/// fallback applies.
pub fn compute_md(
    window: &DayWindow,
    pattern: PatternClass,
    stats: &WindowStats,
    table: &CoefficientTable,
    stp: &StpVector,
    critical: &CriticalValueTable,
) -> Result<f64, MdError> {
    let n = stp
        .index_for_window(window)
        .ok_or(MdError::WindowNotInStp(*window))?;
    let k = match critical_value(stats, critical) {
        Ok(k) => k,
        Err(_) => return c_coefficient(n, stp),
    };
    md_from_k(k, stats.std(), pattern, n, table, stp)
}

pub fn md_from_k(
    k: f64,
    std: f64,
    pattern: PatternClass,
    n: usize,
    table: &CoefficientTable,
    stp: &StpVector,
) -> Result<f64, MdError> {
    if k <= PSEUDO_ZERO_K {
        return c_coefficient(n, stp);
    }
    let c = table
        .get(pattern, n)
        .ok_or(MdError::MissingCoefficients { pattern, index: n })?;
    Ok(c.a * k + c.b * std)
}

/// Length-weighted average of per-segment thresholds.
pub fn compose_md(segments: &[(u32, f64)]) -> Result<f64, MdError> {
    if segments.is_empty() {
        return Err(MdError::EmptySegments);
    }
    if segments.iter().any(|(t, _)| *t == 0) {
        return Err(MdError::ZeroLengthSegment);
    }
    let total: u32 = segments.iter().map(|(t, _)| t).sum();
    Ok(segments
        .iter()
        .map(|&(t, md)| t as f64 / total as f64 * md)
        .sum())
}

/// Human judgement on a confirmed alert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// A leak that had not been reported before.
    #[serde(alias = "real")]
    RealLeak,
    /// No leak.
    #[serde(alias = "false")]
    FalseAlert,
    /// A true alert for a leak already counted.
    KnownLeak,
}

/// Alert counts and the reliability coefficient derived from them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityState {
    pub an: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub ln: u64,
    pub r: f64,
}

impl ReliabilityState {
    pub fn new() -> Self {
        Self {
            an: 0,
            fn_: 0,
            ln: 0,
            r: 1.0,
        }
    }

    /// Rebuild from counts.
    pub fn from_counts(an: u64, fn_: u64, ln: u64) -> Self {
        let mut s = Self {
            an,
            fn_,
            ln,
            r: 0.0,
        };
        s.r = reliability(an, fn_, ln);
        s
    }
}

/// `r = (AN - FN) / LN`, with `r = 1` before any alert and `r = 0` when
/// alerts exist but no leak has been confirmed.
pub fn reliability(an: u64, fn_: u64, ln: u64) -> f64 {
    if an == 0 {
        1.0
    } else if ln == 0 {
        0.0
    } else {
        an.saturating_sub(fn_) as f64 / ln as f64
    }
}

pub fn update_reliability(state: &ReliabilityState, verdict: Verdict) -> ReliabilityState {
    let mut s = state.clone();
    s.an += 1;
    match verdict {
        Verdict::RealLeak => s.ln += 1,
        Verdict::FalseAlert => s.fn_ += 1,
        Verdict::KnownLeak => {}
    }
    s.r = reliability(s.an, s.fn_, s.ln);
    s
}

/// A leak found by other means that no alert reported.
pub fn record_missed_leak(state: &ReliabilityState) -> ReliabilityState {
    let mut s = state.clone();
    s.ln += 1;
    s.r = reliability(s.an, s.fn_, s.ln);
    s
}

/// Tuned threshold: `MD / r`, or `0.5 (AN + 1.1) MD` when every alert so far
/// was false.
pub fn tune_md(md: f64, state: &ReliabilityState, learning_complete: bool) -> Result<f64, MdError> {
    if !learning_complete {
        return Err(MdError::LearningIncomplete);
    }
    if state.r > 0.0 {
        Ok(md / state.r)
    } else if state.an > 0 {
        Ok(0.5 * (state.an as f64 + 1.1) * md)
    } else {
        Err(MdError::UndefinedTuning)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Significance;
    use proptest::prelude::*;

    fn win(len: u32) -> DayWindow {
        DayWindow::new(600, len).unwrap()
    }

    #[test]
    fn c_values() {
        let stp = StpVector::stp1();
        assert_eq!(c_coefficient(1, &stp).unwrap(), 40.0);
        assert_eq!(c_coefficient(7, &stp).unwrap(), 160.0);
        assert!(matches!(
            c_coefficient(0, &stp),
            Err(MdError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            c_coefficient(8, &stp),
            Err(MdError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn md_branches() {
        let stp = StpVector::stp1();
        let table = CoefficientTable::uniform(7, &[(PatternClass::Stable, 1.0, 0.5)]);
        assert_eq!(
            md_from_k(0.2, 0.0, PatternClass::Stable, 1, &table, &stp).unwrap(),
            40.0
        );
        assert_eq!(
            md_from_k(0.3, 0.1, PatternClass::Stable, 1, &table, &stp).unwrap(),
            40.0
        );
        let md = md_from_k(12.353, 2.0, PatternClass::Stable, 2, &table, &stp).unwrap();
        assert!((md - 13.353).abs() < 1e-9);
        let zero = CoefficientTable::uniform(7, &[(PatternClass::Stable, 0.0, 0.0)]);
        assert_eq!(
            md_from_k(5.0, 2.0, PatternClass::Stable, 2, &zero, &stp).unwrap(),
            0.0
        );
    }

    #[test]
    fn md_from_stats() {
        let stp = StpVector::stp1();
        let table = CoefficientTable::uniform(7, &[(PatternClass::Low, 1.0, 0.5)]);
        let crit = CriticalValueTable::standard();
        let s = WindowStats::from_moments(win(30), Significance::Alpha05, 4, 10.0, 2.0);
        let md = compute_md(&win(30), PatternClass::Low, &s, &table, &stp, &crit).unwrap();
        assert!((md - 13.353).abs() < 1e-9);
        let thin = WindowStats::from_moments(win(15), Significance::Alpha05, 1, 3.0, 0.0);
        assert_eq!(
            compute_md(&win(15), PatternClass::Low, &thin, &table, &stp, &crit).unwrap(),
            40.0
        );
        assert!(matches!(
            compute_md(&win(45), PatternClass::Low, &s, &table, &stp, &crit),
            Err(MdError::WindowNotInStp(_))
        ));
    }

    #[test]
    fn truncated_tail_tile_maps_to_its_length() {
        let stp = StpVector::stp1();
        let tail: DayWindow = "20:00-24:00".parse().unwrap();
        assert_eq!(stp.index_for_window(&tail), Some(5));
        assert_eq!(
            stp.index_for_window(&"16:00-24:00".parse().unwrap()),
            Some(6)
        );
        assert_eq!(stp.index_for_window(&"10:00-14:00".parse().unwrap()), None);
        assert_eq!(stp.base_resolution(), 15);
    }

    #[test]
    fn stp_validation() {
        assert!(StpVector::new(vec![30, 15]).is_err());
        assert!(StpVector::new(vec![15]).is_err());
        assert!(StpVector::new(vec![15, 15]).is_err());
        assert!(StpVector::new(vec![15, 30]).is_ok());
    }

    #[test]
    fn compose_examples() {
        assert_eq!(compose_md(&[(30, 10.0), (30, 20.0)]).unwrap(), 15.0);
        assert_eq!(compose_md(&[(60, 7.5)]).unwrap(), 7.5);
        assert!((compose_md(&[(15, 40.0), (45, 8.0)]).unwrap() - 16.0).abs() < 1e-12);
        assert_eq!(compose_md(&[]), Err(MdError::EmptySegments));
        assert_eq!(compose_md(&[(0, 1.0)]), Err(MdError::ZeroLengthSegment));
    }

    #[test]
    fn reliability_sequences() {
        let s = ReliabilityState::new();
        assert_eq!(s.r, 1.0);
        let s1 = update_reliability(&s, Verdict::FalseAlert);
        assert_eq!((s1.an, s1.fn_, s1.ln, s1.r), (1, 1, 0, 0.0));
        assert!((tune_md(10.0, &s1, true).unwrap() - 10.5).abs() < 1e-12);
        let s2 = update_reliability(&s1, Verdict::FalseAlert);
        assert!((tune_md(10.0, &s2, true).unwrap() - 15.5).abs() < 1e-12);

        let real = update_reliability(&s, Verdict::RealLeak);
        assert_eq!(real.r, 1.0);
        assert_eq!(tune_md(10.0, &real, true).unwrap(), 10.0);

        let half = record_missed_leak(&real);
        assert_eq!(half.r, 0.5);
        assert_eq!(tune_md(10.0, &half, true).unwrap(), 20.0);

        assert_eq!(ReliabilityState::from_counts(3, 1, 2).r, 1.0);
        assert_eq!(ReliabilityState::from_counts(2, 2, 0).r, 0.0);
        assert_eq!(
            tune_md(10.0, &real, false),
            Err(MdError::LearningIncomplete)
        );
        let odd = ReliabilityState {
            an: 0,
            fn_: 0,
            ln: 0,
            r: 0.0,
        };
        assert_eq!(tune_md(10.0, &odd, true), Err(MdError::UndefinedTuning));
    }

    #[test]
    fn coefficient_parsing() {
        let t = CoefficientTable::parse(
            "# comment\npattern,stp_index,a,b\nlow,1,1.0,0.5\n\nstable,1,1.1,1\n",
        )
        .unwrap();
        assert_eq!(
            t.get(PatternClass::Low, 1),
            Some(Coefficients { a: 1.0, b: 0.5 })
        );
        assert!(CoefficientTable::parse("pattern,stp_index,a,b\nlow,1,-1,0\n").is_err());
        assert!(CoefficientTable::parse("pattern,stp_index,a,b\nlow,x,1,0\n").is_err());
        assert!(CoefficientTable::parse("pattern,stp_index,a,b\nlow,1,1,0\nlow,1,1,0\n").is_err());
        assert!(CoefficientTable::parse("low,1,1,0\n").is_err());
        let d = CoefficientTable::defaults();
        d.validate_for(&StpVector::stp1()).unwrap();
        assert_eq!(CoefficientTable::parse(&d.to_csv()).unwrap(), d);
    }

    proptest! {
        #[test]
        fn md_non_negative(k in 0.0f64..500.0, std in 0.0f64..100.0, a in 0.0f64..3.0, b in 0.0f64..3.0, n in 1usize..=7) {
            let stp = StpVector::stp1();
            let t = CoefficientTable::uniform(7, &[(PatternClass::Mutable, a, b)]);
            prop_assert!(md_from_k(k, std, PatternClass::Mutable, n, &t, &stp).unwrap() >= 0.0);
        }

        #[test]
        fn compose_subdivision_invariant(segs in prop::collection::vec((1u32..200, 0.0f64..300.0), 1..8), pick in 0usize..8) {
            let pick = pick % segs.len();
            let base = compose_md(&segs).unwrap();
            let mut split = Vec::new();
            for (i, &(t, md)) in segs.iter().enumerate() {
                if i == pick {
                    split.push((t, md));
                    split.push((t, md));
                } else {
                    split.push((2 * t, md));
                }
            }
            // Doubling every other length and splitting `pick` keeps weights.
            prop_assert!((compose_md(&split).unwrap() - base).abs() < 1e-9);
            let lo = segs.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
            let hi = segs.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(base >= lo - 1e-9 && base <= hi + 1e-9);
        }

        #[test]
        fn tuning_never_lowers_for_r_up_to_one(md in 0.0f64..500.0, r in 0.001f64..=1.0) {
            let s = ReliabilityState { an: 3, fn_: 1, ln: 2, r };
            prop_assert!(tune_md(md, &s, true).unwrap() >= md - 1e-12);
        }

        #[test]
        fn real_verdict_keeps_numerator(script in prop::collection::vec(0u8..3, 0..30)) {
            let mut s = ReliabilityState::new();
            for v in script {
                let verdict = [Verdict::RealLeak, Verdict::FalseAlert, Verdict::KnownLeak][v as usize];
                let before = s.an - s.fn_;
                s = update_reliability(&s, verdict);
                if verdict == Verdict::RealLeak {
                    prop_assert!(s.an - s.fn_ >= before);
                }
                prop_assert_eq!(s.r, reliability(s.an, s.fn_, s.ln));
            }
        }
    }
}
