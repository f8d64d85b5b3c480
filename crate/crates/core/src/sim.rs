//! Deterministic household consumption traces.
//!
//! A day's budget is drawn as `p * S + 140` liters with `p ~ N(120, 20)` and
//! spread over a diurnal schedule: a near-zero night trickle, regular morning
//! and evening routines, and an irregular midday of discrete water-use
//! events. Volumes are kept in whole milliliters so that every emitted trace
//! conserves volume exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metering::{day_start, quantize, DayWindow, MeterSample, CSV_HEADER, MINUTES_PER_DAY};
use crate::pattern::PatternClass;

pub const GENERATOR: &str = "ChaCha8Rng";

/// Fixed daily consumption independent of household size.
pub const BASE_DAILY_L: f64 = 140.0;

/// Expected tile volume at or below which a quiet tile is labelled low.
const TRUTH_LOW_MAX_L: f64 = 12.0;
/// Expected tile volume at or above which a busy tile is labelled.
const TRUTH_BUSY_MIN_L: f64 = 20.0;

const DL: u64 = 100;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("leak span {start} .. {end} is not inside the trace")]
    SpanMismatch {
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activity {
    /// Occupants asleep: a sparse trickle.
    Sleep,
    /// Repeated daily habits at nearly constant volume.
    Routine,
    /// Irregular discrete events; some days the house is empty.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub window: DayWindow,
    pub activity: Activity,
    /// Fraction of the expected daily budget.
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HouseholdProfile {
    pub family_size: u32,
    pub p_mean: f64,
    pub p_std: f64,
    pub schedule: Vec<Segment>,
    /// Probability that the house is empty for most of the mixed period.
    pub away_probability: f64,
    /// Relative day-to-day noise on routine and night volumes.
    pub routine_noise: f64,
    pub seed: u64,
}

fn segment(start: u32, end: u32, activity: Activity, share: f64) -> Segment {
    Segment {
        window: DayWindow::new(start, end - start).expect("static schedule"),
        activity,
        share,
    }
}

/// Night 3%, morning 30%, evening 27%, midday 40%.
pub fn default_schedule() -> Vec<Segment> {
    let night = 0.03;
    vec![
        segment(0, 360, Activity::Sleep, night * 6.0 / 7.0),
        segment(360, 540, Activity::Routine, 0.30),
        segment(540, 1200, Activity::Mixed, 0.40),
        segment(1200, 1380, Activity::Routine, 0.27),
        segment(1380, 1440, Activity::Sleep, night / 7.0),
    ]
}

impl HouseholdProfile {
    pub fn new(family_size: u32, seed: u64) -> Self {
        Self {
            family_size,
            p_mean: 120.0,
            p_std: 20.0,
            schedule: default_schedule(),
            away_probability: 0.4,
            routine_noise: 0.02,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.p_std >= 0.0 && self.p_mean.is_finite()) {
            return Err(SimError::InvalidProfile(
                "p_std must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.away_probability) {
            return Err(SimError::InvalidProfile(
                "away_probability outside [0, 1]".into(),
            ));
        }
        let mut covered = vec![false; MINUTES_PER_DAY as usize];
        for s in &self.schedule {
            if s.share < 0.0 {
                return Err(SimError::InvalidProfile("negative share".into()));
            }
            for m in s.window.start_offset()..s.window.end_offset() {
                if covered[m as usize] {
                    return Err(SimError::InvalidProfile(format!(
                        "segment {} overlaps",
                        s.window
                    )));
                }
                covered[m as usize] = true;
            }
        }
        let total: f64 = self.schedule.iter().map(|s| s.share).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SimError::InvalidProfile(format!(
                "shares sum to {total}, not 1"
            )));
        }
        Ok(())
    }

    /// Mean daily volume in liters.
    pub fn expected_daily(&self) -> f64 {
        self.p_mean.max(0.0) * self.family_size as f64 + BASE_DAILY_L
    }

    /// Generator for one day, independent of every other day.
    pub fn day_rng(&self, day_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(day_index);
        rng
    }

    /// Expected pattern of each tile of the given lengths, where the
    /// schedule makes the answer unambiguous.
    pub fn truth_schedule(&self, lengths: &[u32]) -> BTreeMap<DayWindow, PatternClass> {
        let e = self.expected_daily();
        let mut out = BTreeMap::new();
        for &len in lengths {
            for tile in DayWindow::tiles(len) {
                let mut activity = None;
                let mut expected = 0.0;
                let mut uniform = true;
                for s in &self.schedule {
                    let ov = tile.overlap(&s.window);
                    if ov == 0 {
                        continue;
                    }
                    expected += e * s.share * ov as f64 / s.window.length() as f64;
                    match activity {
                        None => activity = Some(s.activity),
                        Some(a) if a == s.activity => {}
                        Some(_) => uniform = false,
                    }
                }
                let label = match (activity, uniform) {
                    (Some(Activity::Sleep), true) if expected <= TRUTH_LOW_MAX_L => {
                        Some(PatternClass::Low)
                    }
                    (Some(Activity::Routine), true) if expected <= TRUTH_LOW_MAX_L => {
                        Some(PatternClass::Low)
                    }
                    (Some(Activity::Routine), true) if expected >= TRUTH_BUSY_MIN_L => {
                        Some(PatternClass::Stable)
                    }
                    (Some(Activity::Mixed), true) if expected >= TRUTH_BUSY_MIN_L => {
                        Some(PatternClass::Mutable)
                    }
                    _ => None,
                };
                if let Some(l) = label {
                    out.insert(tile, l);
                }
            }
        }
        out
    }
}

/// Daily budget `p_d * S + 140` liters, `p_d ~ N(p_mean, p_std)` clamped at 0.
pub fn draw_daily_budget<R: Rng + ?Sized>(profile: &HouseholdProfile, rng: &mut R) -> f64 {
    let p = Normal::new(profile.p_mean, profile.p_std)
        .map(|n| n.sample(rng))
        .unwrap_or(profile.p_mean);
    p.max(0.0) * profile.family_size as f64 + BASE_DAILY_L
}

/// One minute of a trace, by source, in milliliters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMinute {
    pub household: u64,
    pub leak: u64,
    pub air_pocket: u64,
    pub burst: u64,
    pub fire: u64,
}

impl TraceMinute {
    pub fn total_ml(&self) -> u64 {
        self.household + self.leak + self.air_pocket + self.burst + self.fire
    }

    pub fn total_l(&self) -> f64 {
        self.total_ml() as f64 / 1000.0
    }
}

/// A constant-rate leak.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakSpec {
    /// Liters per second.
    pub rate: f64,
    pub start: DateTime<Utc>,
    /// Open-ended when `None`: the leak runs to the end of the trace.
    pub end: Option<DateTime<Utc>>,
}

impl LeakSpec {
    pub fn per_minute(rate_lpm: f64, start: DateTime<Utc>, end: Option<DateTime<Utc>>) -> Self {
        Self {
            rate: rate_lpm / 60.0,
            start,
            end,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub seed: u64,
    pub generator: String,
    pub family_size: u32,
    pub start: NaiveDate,
    pub days: u32,
    pub budgets_l: Vec<f64>,
    pub leaks: Vec<LeakSpec>,
    pub air_pockets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub start: DateTime<Utc>,
    pub minutes: Vec<TraceMinute>,
    pub meta: TraceMeta,
}

impl Trace {
    pub fn empty(start: NaiveDate, seed: u64) -> Self {
        Self {
            start: day_start(start),
            minutes: Vec::new(),
            meta: TraceMeta {
                seed,
                generator: GENERATOR.into(),
                family_size: 0,
                start,
                days: 0,
                budgets_l: Vec::new(),
                leaks: Vec::new(),
                air_pockets: 0,
            },
        }
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.start + Duration::minutes(self.minutes.len() as i64)
    }

    pub fn minute_at(&self, t: DateTime<Utc>) -> Option<usize> {
        let off = (t - self.start).num_minutes();
        (off >= 0 && (off as usize) < self.minutes.len()).then_some(off as usize)
    }

    pub fn total_ml(&self) -> u64 {
        self.minutes.iter().map(|m| m.total_ml()).sum()
    }

    /// Total liters per minute.
    pub fn volumes(&self) -> Vec<f64> {
        self.minutes.iter().map(|m| m.total_l()).collect()
    }

    /// Restrict to `[from, to)`, keeping metadata.
    pub fn slice(&self, from: DateTime<Utc>, to: DateTime<Utc>) -> Trace {
        let a = (from - self.start)
            .num_minutes()
            .clamp(0, self.minutes.len() as i64) as usize;
        let b = (to - self.start)
            .num_minutes()
            .clamp(a as i64, self.minutes.len() as i64) as usize;
        Trace {
            start: self.start + Duration::minutes(a as i64),
            minutes: self.minutes[a..b].to_vec(),
            meta: self.meta.clone(),
        }
    }
}

/// Generate `days` days of household consumption starting at `start`.
pub fn simulate(
    profile: &HouseholdProfile,
    start: NaiveDate,
    days: u32,
) -> Result<Trace, SimError> {
    profile.validate()?;
    let mut trace = Trace::empty(start, profile.seed);
    trace.meta.family_size = profile.family_size;
    trace.meta.days = days;
    trace
        .minutes
        .reserve(days as usize * MINUTES_PER_DAY as usize);
    for d in 0..days {
        let mut rng = profile.day_rng(d as u64);
        let budget = draw_daily_budget(profile, &mut rng);
        let day = render_day(profile, budget, &mut rng);
        trace.meta.budgets_l.push(budget);
        trace.minutes.extend(day.into_iter().map(|dl| TraceMinute {
            household: dl * DL,
            ..Default::default()
        }));
    }
    Ok(trace)
}

/// Spread a budget over one day; returns per-minute deciliters summing to
/// the budget rounded to 0.1 L.
pub fn render_day<R: Rng + ?Sized>(
    profile: &HouseholdProfile,
    budget_l: f64,
    rng: &mut R,
) -> Vec<u64> {
    let mut minutes = vec![0u64; MINUTES_PER_DAY as usize];
    let budget = (budget_l.max(0.0) * 10.0).round() as u64;
    if budget == 0 {
        return minutes;
    }
    let expected = profile.expected_daily() * 10.0;
    let noise = Normal::new(0.0, profile.routine_noise.max(0.0)).expect("finite noise");

    // Sleep and routine volumes follow the expected budget; the mixed period
    // absorbs the day's deviation.
    let mut fixed: Vec<(usize, u64)> = Vec::new();
    for (i, s) in profile.schedule.iter().enumerate() {
        if s.activity != Activity::Mixed {
            let f = (1.0 + noise.sample(rng)).max(0.0);
            let v = (expected * s.share * f).round().max(0.0) as u64;
            fixed.push((i, v));
        }
    }
    let fixed_total: u64 = fixed.iter().map(|(_, v)| v).sum();
    let has_mixed = profile
        .schedule
        .iter()
        .any(|s| s.activity == Activity::Mixed);
    if fixed_total > budget || !has_mixed {
        scale_to(&mut fixed, budget);
    }
    let mixed_total = budget - fixed.iter().map(|(_, v)| v).sum::<u64>();

    let mixed_segments: Vec<&Segment> = profile
        .schedule
        .iter()
        .filter(|s| s.activity == Activity::Mixed)
        .collect();
    let mixed_share: f64 = mixed_segments.iter().map(|s| s.share).sum();
    let mut mixed_volumes: Vec<u64> = mixed_segments
        .iter()
        .map(|s| {
            if mixed_share > 0.0 {
                (mixed_total as f64 * s.share / mixed_share).floor() as u64
            } else {
                0
            }
        })
        .collect();
    let assigned: u64 = mixed_volumes.iter().sum();
    if let Some(first) = mixed_volumes.first_mut() {
        *first += mixed_total - assigned;
    }

    for (i, v) in fixed {
        let s = &profile.schedule[i];
        match s.activity {
            Activity::Sleep => render_sleep(&mut minutes, s.window, v, rng),
            Activity::Routine => render_routine(&mut minutes, s.window, v, rng),
            Activity::Mixed => unreachable!(),
        }
    }
    let away = rng.random_bool(profile.away_probability);
    for (s, v) in mixed_segments.iter().zip(mixed_volumes) {
        render_mixed(&mut minutes, s.window, v, away, rng);
    }
    minutes
}

fn scale_to(volumes: &mut [(usize, u64)], target: u64) {
    let total: u64 = volumes.iter().map(|(_, v)| v).sum();
    if total == 0 {
        if let Some(first) = volumes.first_mut() {
            first.1 = target;
        }
        return;
    }
    let mut assigned = 0;
    for (_, v) in volumes.iter_mut() {
        *v = (*v as u128 * target as u128 / total as u128) as u64;
        assigned += *v;
    }
    if let Some(last) = volumes.last_mut() {
        last.1 += target - assigned;
    }
}

/// Split `total` units into `parts` near-equal shares, remainder placed at
/// random parts.
fn stratify<R: Rng + ?Sized>(total: u64, parts: usize, rng: &mut R) -> Vec<u64> {
    let base = total / parts as u64;
    let mut out = vec![base; parts];
    let mut extra = total - base * parts as u64;
    while extra > 0 {
        let i = rng.random_range(0..parts);
        out[i] += 1;
        extra -= 1;
    }
    out
}

fn render_sleep<R: Rng + ?Sized>(minutes: &mut [u64], window: DayWindow, volume: u64, rng: &mut R) {
    let slot = 30u32.min(window.length());
    let slots = window.length().div_ceil(slot) as usize;
    for (k, units) in stratify(volume, slots, rng).into_iter().enumerate() {
        let a = window.start_offset() + k as u32 * slot;
        let b = (a + slot).min(window.end_offset());
        for _ in 0..units {
            minutes[rng.random_range(a..b) as usize] += 1;
        }
    }
}

fn render_routine<R: Rng + ?Sized>(
    minutes: &mut [u64],
    window: DayWindow,
    volume: u64,
    rng: &mut R,
) {
    let block = 5u32.min(window.length());
    let blocks = window.length().div_ceil(block) as usize;
    for (k, v) in stratify(volume, blocks, rng).into_iter().enumerate() {
        let a = window.start_offset() + k as u32 * block;
        let b = (a + block).min(window.end_offset());
        let first = rng.random_range(a..b);
        if b - a >= 2 && rng.random_bool(0.5) && v >= 2 {
            let mut second = rng.random_range(a..b - 1);
            if second >= first {
                second += 1;
            }
            minutes[first as usize] += v - v / 2;
            minutes[second as usize] += v / 2;
        } else {
            minutes[first as usize] += v;
        }
    }
}

/// Per-minute deciliter profile of one water-use event.
fn draw_event<R: Rng + ?Sized>(rng: &mut R) -> Vec<u64> {
    let roll: f64 = rng.random();
    if roll < 0.45 {
        // Tap: 1-3 minutes at 3-8 L/min.
        let len = rng.random_range(1..=3);
        (0..len).map(|_| rng.random_range(30..=80)).collect()
    } else if roll < 0.75 {
        // Toilet flush.
        vec![rng.random_range(45..=60)]
    } else if roll < 0.87 {
        // Shower: 6-10 minutes at 7-10 L/min.
        let len = rng.random_range(6..=10);
        let rate = rng.random_range(70..=100);
        vec![rate; len]
    } else {
        // Washing machine: fill pulses separated by idle gaps.
        let mut v = Vec::new();
        for p in 0..4 {
            if p > 0 {
                v.extend(std::iter::repeat_n(0, rng.random_range(4..=8)));
            }
            v.extend([60, 60]);
        }
        v
    }
}

fn render_mixed<R: Rng + ?Sized>(
    minutes: &mut [u64],
    window: DayWindow,
    volume: u64,
    away: bool,
    rng: &mut R,
) {
    let (a, b) = (window.start_offset(), window.end_offset());
    let ranges: Vec<(u32, u32)> = if away && window.length() > 240 {
        vec![(a, a + 60), (b - 180, b)]
    } else {
        vec![(a, b)]
    };
    let span: u32 = ranges.iter().map(|(x, y)| y - x).sum();
    let mut remaining = volume;
    while remaining > 0 {
        let mut event = draw_event(rng);
        let len = event.len() as u32;
        // Pick a start inside the allowed ranges such that the event fits.
        let mut pos = rng.random_range(0..span);
        let mut start = a;
        for &(x, y) in &ranges {
            if pos < y - x {
                start = x + pos;
                break;
            }
            pos -= y - x;
        }
        let range_end = ranges
            .iter()
            .find(|(x, y)| start >= *x && start < *y)
            .map(|r| r.1)
            .unwrap_or(b);
        if start + len > range_end {
            start = range_end.saturating_sub(len).max(a);
        }
        for (i, v) in event.iter_mut().enumerate() {
            let m = start + i as u32;
            if m >= b || remaining == 0 {
                break;
            }
            let take = (*v).min(remaining);
            minutes[m as usize] += take;
            remaining -= take;
        }
    }
}

fn check_span(trace: &Trace, start: DateTime<Utc>, end: DateTime<Utc>) -> Result<(), SimError> {
    if start < trace.start || end > trace.end() || end < start {
        return Err(SimError::SpanMismatch { start, end });
    }
    Ok(())
}

/// Add a constant-rate leak. Minutes partially covered receive a
/// proportional volume.
pub fn inject_leak(trace: &mut Trace, leak: &LeakSpec) -> Result<(), SimError> {
    let end = leak.end.unwrap_or_else(|| trace.end());
    check_span(trace, leak.start, end)?;
    if leak.start >= end && leak.end.is_some() {
        return Err(SimError::SpanMismatch {
            start: leak.start,
            end,
        });
    }
    let ml_per_s = leak.rate * 1000.0;
    let first = (leak.start - trace.start).num_seconds();
    let last = (end - trace.start).num_seconds();
    // Accumulate in seconds so that rounding never drifts over long leaks.
    let mut injected = 0u64;
    let mut m = first / 60;
    while m * 60 < last {
        let seg_end = ((m + 1) * 60).min(last);
        let cumulative = ((seg_end - first) as f64 * ml_per_s).round() as u64;
        trace.minutes[m as usize].leak += cumulative - injected;
        injected = cumulative;
        m += 1;
    }
    trace.meta.leaks.push(leak.clone());
    Ok(())
}

/// Add `count` isolated blips of 0.1-0.3 L at idle minutes.
pub fn inject_air_pockets<R: Rng + ?Sized>(trace: &mut Trace, count: usize, rng: &mut R) -> usize {
    inject_air_pockets_in(trace, count, None, rng)
}

/// As [`inject_air_pockets`], restricted to minutes `[from, to)` of the trace.
pub fn inject_air_pockets_in<R: Rng + ?Sized>(
    trace: &mut Trace,
    count: usize,
    range: Option<(DateTime<Utc>, DateTime<Utc>)>,
    rng: &mut R,
) -> usize {
    let (a, b) = match range {
        Some((from, to)) => (
            (from - trace.start).num_minutes().max(0) as usize,
            ((to - trace.start).num_minutes().max(0) as usize).min(trace.minutes.len()),
        ),
        None => (0, trace.minutes.len()),
    };
    // Isolated: the minute and both neighbours idle.
    let idle = |mins: &[TraceMinute], i: usize| {
        mins[i].total_ml() == 0
            && (i == 0 || mins[i - 1].total_ml() == 0)
            && (i + 1 >= mins.len() || mins[i + 1].total_ml() == 0)
    };
    let mut candidates: Vec<usize> = (a..b).filter(|&i| idle(&trace.minutes, i)).collect();
    let mut placed = 0;
    while placed < count && !candidates.is_empty() {
        let k = rng.random_range(0..candidates.len());
        let i = candidates.swap_remove(k);
        if !idle(&trace.minutes, i) {
            continue;
        }
        trace.minutes[i].air_pocket += rng.random_range(1..=3) * DL;
        placed += 1;
    }
    trace.meta.air_pockets += placed;
    placed
}

/// A short high-volume draw such as a bathtub fill.
pub fn inject_burst(
    trace: &mut Trace,
    start: DateTime<Utc>,
    minutes: u32,
    liters: f64,
) -> Result<(), SimError> {
    let end = start + Duration::minutes(minutes as i64);
    check_span(trace, start, end)?;
    let first = trace
        .minute_at(start)
        .ok_or(SimError::SpanMismatch { start, end })?;
    let total = (liters * 1000.0).round() as u64;
    let per = total / minutes.max(1) as u64;
    for i in 0..minutes as usize {
        trace.minutes[first + i].burst += per;
    }
    trace.minutes[first].burst += total - per * minutes as u64;
    Ok(())
}

/// Sprinkler flow during a fire alarm, at `rate_lpm` liters per minute.
pub fn inject_fire_surge(
    trace: &mut Trace,
    start: DateTime<Utc>,
    minutes: u32,
    rate_lpm: f64,
) -> Result<(), SimError> {
    let end = start + Duration::minutes(minutes as i64);
    check_span(trace, start, end)?;
    let first = trace
        .minute_at(start)
        .ok_or(SimError::SpanMismatch { start, end })?;
    let per = (rate_lpm * 1000.0).round() as u64;
    for i in 0..minutes as usize {
        trace.minutes[first + i].fire += per;
    }
    Ok(())
}

fn fmt_liters(ml: u64) -> String {
    let int = ml / 1000;
    let frac = ml % 1000;
    if frac == 0 {
        format!("{int}.0")
    } else {
        let s = format!("{frac:03}");
        format!("{int}.{}", s.trim_end_matches('0'))
    }
}

/// The readings a meter would report for this trace, quantized as on ingest.
pub fn meter_samples(trace: &Trace, initial_reading: f64) -> Vec<MeterSample> {
    if trace.minutes.is_empty() {
        return Vec::new();
    }
    let mut cum = (initial_reading.max(0.0) * 1000.0).round() as u64;
    let mut out = Vec::with_capacity(trace.minutes.len() + 1);
    for i in 0..=trace.minutes.len() {
        out.push(MeterSample {
            timestamp: trace.start + Duration::minutes(i as i64),
            reading: quantize(cum as f64 / 1000.0),
        });
        if let Some(m) = trace.minutes.get(i) {
            cum += m.total_ml();
        }
    }
    out
}

/// Cumulative meter log: one reading at every minute boundary.
pub fn emit_meter_csv(trace: &Trace, initial_reading: f64) -> String {
    let mut out = String::with_capacity(40 * (trace.minutes.len() + 2));
    out.push_str(CSV_HEADER);
    out.push('\n');
    if trace.minutes.is_empty() {
        return out;
    }
    let mut cum = (initial_reading.max(0.0) * 1000.0).round() as u64;
    for i in 0..=trace.minutes.len() {
        let t = trace.start + Duration::minutes(i as i64);
        let _ = writeln!(
            out,
            "{},{}",
            t.format("%Y-%m-%dT%H:%M:%SZ"),
            fmt_liters(cum)
        );
        if let Some(m) = trace.minutes.get(i) {
            cum += m.total_ml();
        }
    }
    out
}

/// Generator for injections, on a stream no household day uses.
pub fn injection_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Ground truth for one interval of the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLabel {
    pub interval_start: DateTime<Utc>,
    pub volume: f64,
    pub leak: bool,
    pub fire: bool,
    pub air_pocket: bool,
    pub burst: bool,
}

pub fn labels(trace: &Trace) -> Vec<TraceLabel> {
    trace
        .minutes
        .iter()
        .enumerate()
        .map(|(i, m)| TraceLabel {
            interval_start: trace.start + Duration::minutes(i as i64),
            volume: m.total_l(),
            leak: m.leak > 0,
            fire: m.fire > 0,
            air_pocket: m.air_pocket > 0,
            burst: m.burst > 0,
        })
        .collect()
}

/// Sidecar label file, one JSON object per interval.
pub fn emit_labels_jsonl(trace: &Trace) -> String {
    let mut out = String::new();
    for l in labels(trace) {
        out.push_str(&serde_json::to_string(&l).expect("labels serialize"));
        out.push('\n');
    }
    out
}

/// Trace metadata plus ground-truth patterns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarMeta {
    #[serde(flatten)]
    pub meta: TraceMeta,
    pub patterns: BTreeMap<DayWindow, PatternClass>,
}

/// Three households of different sizes with fixed seeds.
pub fn default_profiles() -> Vec<HouseholdProfile> {
    vec![
        HouseholdProfile::new(2, 101),
        HouseholdProfile::new(4, 202),
        HouseholdProfile::new(6, 303),
    ]
}
