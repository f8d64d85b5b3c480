//! Consumption-pattern classification per day window.
//!
//! Each tile of the day is labelled from its daily totals: a window that is
//! nearly always under 15 L is `Low` (night flow); otherwise the spread of
//! the totals separates `Stable` routines from `Mutable` periods.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metering::{to_deciliters, DayWindow, SampleGroup, MINUTES_PER_DAY};

/// A day counts as low for a window when its total is at most this.
pub const LOW_DAY_LIMIT_L: f64 = 15.0;
/// Daily totals with a sample standard deviation below this are stable.
pub const STABLE_STD_LIMIT_L: f64 = 20.0 / 3.0;
/// Length of the initial learning period.
pub const LEARNING_DAYS: u32 = 14;
/// Minimum observed days for a classification.
pub const MIN_CLASSIFY_DAYS: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum PatternError {
    #[error("sample group for {window} on {day} is incomplete")]
    IncompleteGroup { window: DayWindow, day: NaiveDate },
    #[error("window {window}: need at least {needed} observed days, have {have}")]
    InsufficientDays {
        window: DayWindow,
        needed: usize,
        have: usize,
    },
    #[error("learning period incomplete: {elapsed} of {LEARNING_DAYS} days")]
    LearningIncomplete { elapsed: u32 },
    #[error("window {window} is not aligned to the {resolution}-minute history")]
    Misaligned { window: DayWindow, resolution: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternClass {
    Low,
    Stable,
    Mutable,
}

impl PatternClass {
    pub const ALL: [PatternClass; 3] = [
        PatternClass::Low,
        PatternClass::Stable,
        PatternClass::Mutable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatternClass::Low => "low",
            PatternClass::Stable => "stable",
            PatternClass::Mutable => "mutable",
        }
    }
}

impl std::fmt::Display for PatternClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PatternClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(PatternClass::Low),
            "stable" => Ok(PatternClass::Stable),
            "mutable" => Ok(PatternClass::Mutable),
            other => Err(format!("unknown pattern `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LowVerdict {
    Low,
    NonLow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Mutable,
}

/// Per-day totals of one window. Days with missing data are excluded and
/// counted separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyTotals {
    pub window: DayWindow,
    pub totals: Vec<(NaiveDate, f64)>,
    pub missing_days: usize,
}

impl DailyTotals {
    pub fn values(&self) -> Vec<f64> {
        self.totals.iter().map(|(_, v)| *v).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningState {
    pub start_date: NaiveDate,
    pub elapsed_days: u32,
    pub in_learning: bool,
}

impl LearningState {
    pub fn new(start_date: NaiveDate) -> Self {
        Self {
            start_date,
            elapsed_days: 0,
            in_learning: true,
        }
    }

    /// Move the clock to `today`; elapsed days count whole days since start.
    pub fn advance_to(&mut self, today: NaiveDate) {
        let elapsed = (today - self.start_date).num_days().max(0) as u32;
        self.elapsed_days = self.elapsed_days.max(elapsed);
        self.in_learning = self.elapsed_days < LEARNING_DAYS;
    }

    pub fn is_complete(&self) -> bool {
        !self.in_learning
    }
}

/// 1 if the group's in-window consumption is at most 15 L.
pub fn is_low_day(group: &SampleGroup) -> Result<u8, PatternError> {
    if !group.is_complete() {
        return Err(PatternError::IncompleteGroup {
            window: group.window,
            day: group.day,
        });
    }
    Ok(is_low_total(group.total()) as u8)
}

fn is_low_total(total: f64) -> bool {
    to_deciliters(total) <= to_deciliters(LOW_DAY_LIMIT_L)
}

/// Low when at least six sevenths of the day span (D2 - D1) were low days.
pub fn classify_low(groups: &[SampleGroup]) -> Result<LowVerdict, PatternError> {
    let window = match groups.first() {
        Some(g) => g.window,
        None => {
            return Err(PatternError::InsufficientDays {
                window: DayWindow::new(0, MINUTES_PER_DAY).expect("whole day"),
                needed: MIN_CLASSIFY_DAYS,
                have: 0,
            })
        }
    };
    let mut low = 0usize;
    for g in groups {
        low += is_low_day(g)? as usize;
    }
    low_verdict(window, low, groups.len())
}

fn low_verdict(
    window: DayWindow,
    low_days: usize,
    observed: usize,
) -> Result<LowVerdict, PatternError> {
    if observed < MIN_CLASSIFY_DAYS {
        return Err(PatternError::InsufficientDays {
            window,
            needed: MIN_CLASSIFY_DAYS,
            have: observed,
        });
    }
    // Missing days are dropped, so the span is observed - 1.
    let span = observed - 1;
    Ok(if 7 * low_days >= 6 * span {
        LowVerdict::Low
    } else {
        LowVerdict::NonLow
    })
}

pub fn classify_low_totals(totals: &DailyTotals) -> Result<LowVerdict, PatternError> {
    let low = totals
        .totals
        .iter()
        .filter(|(_, v)| is_low_total(*v))
        .count();
    low_verdict(totals.window, low, totals.totals.len())
}

/// Stable when the sample standard deviation of the totals is below 20/3 L.
pub fn classify_stability(totals: &DailyTotals) -> Result<Stability, PatternError> {
    let (_, std) = mean_std(&totals.values()).ok_or(PatternError::InsufficientDays {
        window: totals.window,
        needed: 2,
        have: totals.totals.len(),
    })?;
    Ok(if std < STABLE_STD_LIMIT_L {
        Stability::Stable
    } else {
        Stability::Mutable
    })
}

fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// Summary of one window's classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowClassification {
    pub label: PatternClass,
    pub observed_days: usize,
    pub missing_days: usize,
    pub low_days: usize,
    pub mean_z: f64,
    pub std_z: f64,
}

pub fn classify_totals(totals: &DailyTotals) -> Result<WindowClassification, PatternError> {
    let values = totals.values();
    let low_days = values.iter().filter(|v| is_low_total(**v)).count();
    let verdict = low_verdict(totals.window, low_days, values.len())?;
    let (mean_z, std_z) = mean_std(&values).unwrap_or((0.0, 0.0));
    let label = match verdict {
        LowVerdict::Low => PatternClass::Low,
        LowVerdict::NonLow => match classify_stability(totals)? {
            Stability::Stable => PatternClass::Stable,
            Stability::Mutable => PatternClass::Mutable,
        },
    };
    Ok(WindowClassification {
        label,
        observed_days: values.len(),
        missing_days: totals.missing_days,
        low_days,
        mean_z,
        std_z,
    })
}

/// Source of per-day window totals.
pub trait ConsumptionHistory {
    fn daily_totals(&self, window: DayWindow) -> Result<DailyTotals, PatternError>;
    /// Number of calendar days spanned, observed or not.
    fn span_days(&self) -> u32;
}

/// Per-day consumption at a fixed resolution; `None` marks unavailable slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayLog {
    resolution: u32,
    days: BTreeMap<NaiveDate, Vec<Option<f64>>>,
}

impl DayLog {
    pub fn new(resolution: u32) -> Self {
        assert!(
            resolution > 0 && MINUTES_PER_DAY.is_multiple_of(resolution),
            "resolution must divide the day"
        );
        Self {
            resolution,
            days: BTreeMap::new(),
        }
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    fn slots(&self) -> usize {
        (MINUTES_PER_DAY / self.resolution) as usize
    }

    /// Replace one day's slots.
    pub fn set_day(&mut self, day: NaiveDate, slots: Vec<Option<f64>>) {
        assert_eq!(slots.len(), self.slots(), "slot count must cover the day");
        self.days.insert(day, slots);
    }

    /// Add volume to a slot, creating the day with zeroed slots if needed.
    pub fn add(&mut self, day: NaiveDate, minute: u32, volume: f64) {
        let n = self.slots();
        let slots = self.days.entry(day).or_insert_with(|| vec![Some(0.0); n]);
        let idx = (minute / self.resolution) as usize;
        if let Some(v) = slots[idx].as_mut() {
            *v += volume;
        }
    }

    pub fn mark_missing(&mut self, day: NaiveDate, minute: u32) {
        let n = self.slots();
        let slots = self.days.entry(day).or_insert_with(|| vec![Some(0.0); n]);
        slots[(minute / self.resolution) as usize] = None;
    }

    pub fn day(&self, day: NaiveDate) -> Option<&[Option<f64>]> {
        self.days.get(&day).map(|v| v.as_slice())
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.days.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    /// Keep only the most recent `n` days.
    pub fn retain_last(&mut self, n: usize) {
        while self.days.len() > n {
            let first = *self.days.keys().next().expect("non-empty");
            self.days.remove(&first);
        }
    }

    /// Drop days before `first`.
    pub fn retain_from(&mut self, first: NaiveDate) {
        self.days = self.days.split_off(&first);
    }

    /// Window total on one day, `None` if any slot is unavailable.
    pub fn window_total(&self, day: NaiveDate, window: DayWindow) -> Option<f64> {
        let slots = self.days.get(&day)?;
        let a = (window.start_offset() / self.resolution) as usize;
        let b = (window.end_offset() / self.resolution) as usize;
        slots[a..b]
            .iter()
            .try_fold(0.0, |acc, s| s.map(|v| acc + v))
    }

    fn check_aligned(&self, window: DayWindow) -> Result<(), PatternError> {
        if !window.start_offset().is_multiple_of(self.resolution)
            || !window.end_offset().is_multiple_of(self.resolution)
        {
            return Err(PatternError::Misaligned {
                window,
                resolution: self.resolution,
            });
        }
        Ok(())
    }
}

impl ConsumptionHistory for DayLog {
    fn daily_totals(&self, window: DayWindow) -> Result<DailyTotals, PatternError> {
        self.check_aligned(window)?;
        let mut totals = Vec::new();
        let mut missing = 0;
        for day in self.days.keys() {
            match self.window_total(*day, window) {
                Some(t) => totals.push((*day, t)),
                None => missing += 1,
            }
        }
        // Calendar days absent from the log count as missing as well.
        missing += self.span_days() as usize - self.days.len();
        Ok(DailyTotals {
            window,
            totals,
            missing_days: missing,
        })
    }

    fn span_days(&self) -> u32 {
        match (self.days.keys().next(), self.days.keys().next_back()) {
            (Some(a), Some(b)) => (*b - *a).num_days() as u32 + 1,
            _ => 0,
        }
    }
}

pub fn classify_window<H: ConsumptionHistory>(
    history: &H,
    window: DayWindow,
) -> Result<PatternClass, PatternError> {
    Ok(classify_totals(&history.daily_totals(window)?)?.label)
}

/// Labels for every tile of every STP length.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatternSchedule {
    pub labels: BTreeMap<DayWindow, PatternClass>,
    #[serde(default)]
    pub summaries: BTreeMap<DayWindow, WindowClassification>,
}

impl PatternSchedule {
    pub fn label(&self, window: &DayWindow) -> Option<PatternClass> {
        self.labels.get(window).copied()
    }

    /// Label of the tile of `length` covering `minute`.
    pub fn label_at(&self, length: u32, minute: u32) -> Option<PatternClass> {
        self.label(&DayWindow::tile_containing(length, minute))
    }
}

/// Classify every tile of every length in `stp`. Tiles with too few
/// observed days are left unlabelled.
pub fn pattern_schedule<H: ConsumptionHistory>(
    history: &H,
    stp: &[u32],
) -> Result<PatternSchedule, PatternError> {
    let span = history.span_days();
    if span < LEARNING_DAYS {
        return Err(PatternError::LearningIncomplete { elapsed: span });
    }
    classify_tiles(history, stp)
}

/// As [`pattern_schedule`] without the learning-period check.
pub fn classify_tiles<H: ConsumptionHistory>(
    history: &H,
    stp: &[u32],
) -> Result<PatternSchedule, PatternError> {
    let mut schedule = PatternSchedule::default();
    for &len in stp {
        for tile in DayWindow::tiles(len) {
            match classify_totals(&history.daily_totals(tile)?) {
                Ok(c) => {
                    schedule.labels.insert(tile, c.label);
                    schedule.summaries.insert(tile, c);
                }
                Err(PatternError::InsufficientDays { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(schedule)
}
