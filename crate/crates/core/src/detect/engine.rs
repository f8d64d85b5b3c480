//! The streaming detection engine.
//!
//! A single-writer state machine fed one interval at a time. Slots are
//! aligned to midnight; at each midnight the finished day joins a rolling
//! history and, once the learning period is over, the window model
//! (statistics, pattern schedule, thresholds) is rebuilt from it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::{DateTime, Duration, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{
    is_pseudo_zero, median, steady_volumes, AlertRecord, AlertState, AlertTransition, Criterion,
    DetectError, DetectorConfig, Evidence, Span, TileRef,
};
use crate::md::{
    compose_md, compute_md, record_missed_leak, tune_md, update_reliability, CoefficientTable,
    MdError, ReliabilityState, StpVector, Verdict,
};
use crate::metering::{
    day_start, minute_of_day, DayWindow, FlowAssembler, FlowEntry, GapPolicy, MeterSample,
    MINUTES_PER_DAY,
};
use crate::pattern::{
    classify_tiles, ConsumptionHistory, DayLog, LearningState, PatternClass, PatternSchedule,
    LEARNING_DAYS,
};
use crate::stats::{CriticalValueTable, Significance, WindowStats};

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("interval starting {got} arrived before the expected {expected}")]
    OutOfOrder {
        expected: DateTime<Utc>,
        got: DateTime<Utc>,
    },
    #[error("interval starting {start} ({length} min) is not on the {it}-minute grid")]
    Misaligned {
        start: DateTime<Utc>,
        length: u32,
        it: u32,
    },
    #[error("unknown alert {0}")]
    UnknownAlert(u64),
    #[error("alert {0} already has a verdict")]
    AlreadyJudged(u64),
    #[error("alert {0} is not confirmed")]
    NotConfirmed(u64),
    #[error("invalid engine settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Detector(#[from] DetectError),
    #[error(transparent)]
    Md(#[from] MdError),
}

/// Static engine parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    /// Detection interval in minutes.
    pub interval_minutes: u32,
    pub gap_policy: GapPolicy,
    pub stp: StpVector,
    pub alpha: Significance,
    pub detector: DetectorConfig,
    /// Rolling history length used for the model.
    pub history_days: u32,
    /// Number of window evaluations retained.
    pub evaluation_log: usize,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            interval_minutes: 1,
            gap_policy: GapPolicy::Mark,
            stp: StpVector::stp1(),
            alpha: Significance::Alpha05,
            detector: DetectorConfig::default(),
            history_days: LEARNING_DAYS,
            evaluation_log: 4096,
        }
    }
}

impl EngineSettings {
    pub fn validate(&self) -> Result<(), EngineError> {
        let it = self.interval_minutes;
        if it == 0 || !self.stp.base_resolution().is_multiple_of(it) {
            return Err(EngineError::InvalidSettings(format!(
                "interval {it} min must divide every STP length and the day"
            )));
        }
        if self.history_days < LEARNING_DAYS {
            return Err(EngineError::InvalidSettings(format!(
                "history_days must be at least {LEARNING_DAYS}"
            )));
        }
        self.detector.validate(&self.stp, it)?;
        Ok(())
    }
}

/// Threshold of one window under the current model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileThreshold {
    pub pattern: PatternClass,
    pub md: f64,
    /// Whether the finer windows disagreed and the threshold was composed.
    pub composed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub built_on: NaiveDate,
    pub stats: BTreeMap<DayWindow, WindowStats>,
    pub schedule: PatternSchedule,
    pub thresholds: BTreeMap<DayWindow, TileThreshold>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub alert_id: u64,
    pub verdict: Verdict,
    pub at: DateTime<Utc>,
}

/// Human feedback: reliability counts and the windows whose thresholds are
/// tuned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackState {
    pub reliability: ReliabilityState,
    pub tuned: BTreeSet<(DayWindow, PatternClass)>,
    pub verdicts: Vec<VerdictRecord>,
    pub missed_leaks: Vec<DateTime<Utc>>,
}

impl Default for FeedbackState {
    fn default() -> Self {
        Self {
            reliability: ReliabilityState::new(),
            tuned: BTreeSet::new(),
            verdicts: Vec::new(),
            missed_leaks: Vec::new(),
        }
    }
}

/// One window closing after the learning period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileEvaluation {
    pub date: NaiveDate,
    pub window: DayWindow,
    pub consumption: Option<f64>,
    pub pattern: Option<PatternClass>,
    pub md: Option<f64>,
    /// Threshold in force: tuned when feedback applies, otherwise `md`.
    pub tmd: Option<f64>,
    pub alert_id: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdView {
    pub window: DayWindow,
    pub pattern: PatternClass,
    pub md: f64,
    pub tmd: f64,
    pub tuned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictOutcome {
    pub alert: AlertRecord,
    pub reliability: ReliabilityState,
    pub thresholds: Vec<ThresholdView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineStatus {
    pub now: Option<DateTime<Utc>>,
    pub in_learning: bool,
    pub elapsed_days: u32,
    pub learning_days: u32,
    pub learning_start: Option<NaiveDate>,
    pub current_pattern: Option<PatternClass>,
    /// Liters per minute over the last interval.
    pub instantaneous_flow: Option<f64>,
    pub reliability: ReliabilityState,
    pub fire_alarm_suppressed: bool,
    pub open_potentials: usize,
    pub confirmed_alerts: usize,
    pub total_alerts: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct SteadyTracker {
    samples: VecDeque<f64>,
    span_start: Option<DateTime<Utc>>,
    inhibited: bool,
}

/// Everything the engine learns and remembers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    learning: Option<LearningState>,
    next_slot: Option<DateTime<Utc>>,
    day: Option<NaiveDate>,
    slots: Vec<Option<f64>>,
    suppressed_slots: Vec<bool>,
    history: DayLog,
    model: Option<Model>,
    alerts: Vec<AlertRecord>,
    open: Vec<usize>,
    feedback: FeedbackState,
    recent: VecDeque<Option<f64>>,
    steady: SteadyTracker,
    avg_inhibited: bool,
    fire_alarm: bool,
    evaluations: VecDeque<TileEvaluation>,
    next_id: u64,
    last_volume: Option<f64>,
    assembler: Option<FlowAssembler>,
}

enum TileStatus {
    Available(f64),
    Missing,
    Suppressed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Engine {
    settings: EngineSettings,
    coefficients: CoefficientTable,
    #[serde(skip, default = "CriticalValueTable::standard")]
    critical: CriticalValueTable,
    state: EngineState,
}

impl Engine {
    pub fn new(
        settings: EngineSettings,
        coefficients: CoefficientTable,
    ) -> Result<Self, EngineError> {
        settings.validate()?;
        coefficients.validate_for(&settings.stp)?;
        let slots = (MINUTES_PER_DAY / settings.interval_minutes) as usize;
        let state = EngineState {
            learning: None,
            next_slot: None,
            day: None,
            slots: vec![None; slots],
            suppressed_slots: vec![false; slots],
            history: DayLog::new(settings.stp.base_resolution()),
            model: None,
            alerts: Vec::new(),
            open: Vec::new(),
            feedback: FeedbackState::default(),
            recent: VecDeque::new(),
            steady: SteadyTracker::default(),
            avg_inhibited: false,
            fire_alarm: settings.detector.fire_alarm_suppressed,
            evaluations: VecDeque::new(),
            next_id: 1,
            last_volume: None,
            assembler: None,
        };
        Ok(Self {
            settings,
            coefficients,
            critical: CriticalValueTable::standard(),
            state,
        })
    }

    /// Resume from a saved state.
    pub fn from_state(
        settings: EngineSettings,
        coefficients: CoefficientTable,
        state: EngineState,
    ) -> Result<Self, EngineError> {
        let mut e = Self::new(settings, coefficients)?;
        if state.slots.len() != e.state.slots.len() {
            return Err(EngineError::InvalidSettings(
                "saved state was produced with a different interval".into(),
            ));
        }
        e.state = state;
        Ok(e)
    }

    pub fn settings(&self) -> &EngineSettings {
        &self.settings
    }

    pub fn coefficients(&self) -> &CoefficientTable {
        &self.coefficients
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn into_state(self) -> EngineState {
        self.state
    }

    /// Replace the coefficient table and recompute thresholds.
    pub fn set_coefficients(&mut self, table: CoefficientTable) -> Result<(), EngineError> {
        table.validate_for(&self.settings.stp)?;
        self.coefficients = table;
        if let Some(model) = self.state.model.take() {
            let thresholds = self.thresholds_for(&model.stats, &model.schedule)?;
            self.state.model = Some(Model {
                thresholds,
                ..model
            });
        }
        Ok(())
    }

    pub fn alerts(&self) -> &[AlertRecord] {
        &self.state.alerts
    }

    pub fn alert(&self, id: u64) -> Option<&AlertRecord> {
        self.state.alerts.iter().find(|a| a.id == id)
    }

    pub fn model(&self) -> Option<&Model> {
        self.state.model.as_ref()
    }

    pub fn learning(&self) -> Option<&LearningState> {
        self.state.learning.as_ref()
    }

    pub fn learning_complete(&self) -> bool {
        self.state
            .learning
            .as_ref()
            .is_some_and(|l| l.is_complete())
    }

    pub fn evaluations(&self) -> impl Iterator<Item = &TileEvaluation> {
        self.state.evaluations.iter()
    }

    pub fn feedback(&self) -> &FeedbackState {
        &self.state.feedback
    }

    /// Take over reliability and tuning from another engine.
    pub fn adopt_feedback(&mut self, feedback: FeedbackState) {
        self.state.feedback = feedback;
    }

    pub fn fire_alarm(&self) -> bool {
        self.state.fire_alarm
    }

    /// While set, no alert is raised and pending potentials are frozen.
    pub fn set_fire_alarm(&mut self, active: bool) {
        self.state.fire_alarm = active;
    }

    /// Start of the next expected interval.
    pub fn now(&self) -> Option<DateTime<Utc>> {
        self.state.next_slot
    }

    pub fn status(&self) -> EngineStatus {
        let it = self.settings.interval_minutes;
        let learning = self.state.learning.as_ref();
        let current_pattern = match (&self.state.model, self.state.next_slot) {
            (Some(m), Some(now)) => {
                let last = now - Duration::minutes(it as i64);
                m.schedule
                    .label_at(self.settings.stp.lengths()[0], minute_of_day(last))
            }
            _ => None,
        };
        EngineStatus {
            now: self.state.next_slot,
            in_learning: learning.is_none_or(|l| l.in_learning),
            elapsed_days: learning.map_or(0, |l| l.elapsed_days),
            learning_days: LEARNING_DAYS,
            learning_start: learning.map(|l| l.start_date),
            current_pattern,
            instantaneous_flow: self.state.last_volume.map(|v| v / it as f64),
            reliability: self.state.feedback.reliability.clone(),
            fire_alarm_suppressed: self.state.fire_alarm,
            open_potentials: self.state.open.len(),
            confirmed_alerts: self
                .state
                .alerts
                .iter()
                .filter(|a| a.state.was_confirmed())
                .count(),
            total_alerts: self.state.alerts.len(),
        }
    }

    /// Thresholds in force for every labelled window.
    pub fn thresholds(&self) -> Vec<ThresholdView> {
        let Some(model) = &self.state.model else {
            return Vec::new();
        };
        model
            .thresholds
            .iter()
            .map(|(w, t)| {
                let tuned = self.state.feedback.tuned.contains(&(*w, t.pattern));
                ThresholdView {
                    window: *w,
                    pattern: t.pattern,
                    md: t.md,
                    tmd: self.effective(w, t),
                    tuned,
                }
            })
            .collect()
    }

    fn effective(&self, window: &DayWindow, t: &TileThreshold) -> f64 {
        let fb = &self.state.feedback;
        if fb.tuned.contains(&(*window, t.pattern)) {
            tune_md(t.md, &fb.reliability, self.learning_complete()).unwrap_or(t.md)
        } else {
            t.md
        }
    }

    /// Last cumulative reading accepted by [`Engine::push_reading`].
    pub fn last_reading(&self) -> Option<(DateTime<Utc>, f64)> {
        self.state.assembler.as_ref().and_then(FlowAssembler::last)
    }

    /// Feed a cumulative reading. Readings off the interval grid are ignored.
    pub fn push_reading(
        &mut self,
        sample: &MeterSample,
    ) -> Result<Vec<AlertTransition>, EngineError> {
        let it = self.settings.interval_minutes;
        if self.state.assembler.is_none() {
            let asm = FlowAssembler::new(it, self.settings.gap_policy)
                .map_err(|e| EngineError::InvalidSettings(e.to_string()))?
                .anchored(day_start(sample.timestamp.date_naive()));
            self.state.assembler = Some(asm);
        }
        let flows = self
            .state
            .assembler
            .as_mut()
            .expect("assembler initialised")
            .push(sample);
        let mut out = Vec::new();
        for f in &flows {
            out.extend(self.push(f)?);
        }
        Ok(out)
    }

    pub fn push_all(&mut self, flows: &[FlowEntry]) -> Result<Vec<AlertTransition>, EngineError> {
        let mut out = Vec::new();
        for f in flows {
            out.extend(self.push(f)?);
        }
        Ok(out)
    }

    /// Feed one interval. Skipped intervals are treated as missing.
    pub fn push(&mut self, entry: &FlowEntry) -> Result<Vec<AlertTransition>, EngineError> {
        let it = self.settings.interval_minutes;
        let start = entry.start();
        if entry.length() != it
            || !minute_of_day(start).is_multiple_of(it)
            || start.timestamp() % 60 != 0
        {
            return Err(EngineError::Misaligned {
                start,
                length: entry.length(),
                it,
            });
        }
        let mut out = Vec::new();
        if let Some(expected) = self.state.next_slot {
            if start < expected {
                return Err(EngineError::OutOfOrder {
                    expected,
                    got: start,
                });
            }
            let mut t = expected;
            while t < start {
                self.step(t, None, &mut out);
                t += Duration::minutes(it as i64);
            }
        }
        self.step(start, entry.volume(), &mut out);
        Ok(out)
    }

    fn step(&mut self, start: DateTime<Utc>, volume: Option<f64>, out: &mut Vec<AlertTransition>) {
        let it = self.settings.interval_minutes;
        let date = start.date_naive();
        if self.state.day != Some(date) {
            self.rollover(date, start, out);
        }
        let m_start = minute_of_day(start);
        let idx = (m_start / it) as usize;
        let suppressed = self.state.fire_alarm;
        self.state.slots[idx] = volume;
        self.state.suppressed_slots[idx] = suppressed;
        self.state.last_volume = volume;
        let end = start + Duration::minutes(it as i64);
        self.state.next_slot = Some(end);

        self.zero_flow_step(volume, suppressed, end, out);
        self.steady_step(start, volume, suppressed, end, out);
        if self.state.model.is_some() {
            self.average_step(date, m_start + it, end, suppressed, out);
        }
    }

    fn rollover(&mut self, date: NaiveDate, now: DateTime<Utc>, out: &mut Vec<AlertTransition>) {
        if let Some(old) = self.state.day {
            let base = self.state.history.resolution();
            let it = self.settings.interval_minutes;
            let per = (base / it) as usize;
            let slots: Vec<Option<f64>> = self
                .state
                .slots
                .chunks(per)
                .zip(self.state.suppressed_slots.chunks(per))
                .map(|(vs, ss)| {
                    if ss.iter().any(|s| *s) {
                        None
                    } else {
                        vs.iter().try_fold(0.0, |acc, v| v.map(|v| acc + v))
                    }
                })
                .collect();
            self.state.history.set_day(old, slots);
        }
        // Potentials waiting on a day that has passed can no longer confirm.
        let stale: Vec<usize> = self
            .state
            .open
            .iter()
            .copied()
            .filter(|&i| self.state.alerts[i].target.is_some_and(|t| t.date < date))
            .collect();
        for i in stale {
            self.close_alert(i, AlertState::Expired, now, out);
        }

        self.state.day = Some(date);
        self.state.slots.iter_mut().for_each(|s| *s = None);
        self.state
            .suppressed_slots
            .iter_mut()
            .for_each(|s| *s = false);
        match self.state.learning.as_mut() {
            None => self.state.learning = Some(LearningState::new(date)),
            Some(l) => l.advance_to(date),
        }
        let keep_from = date - Duration::days(self.settings.history_days as i64);
        self.state.history.retain_from(keep_from);
        if self.learning_complete() {
            // An empty history leaves the previous model in place.
            if let Ok(model) = self.build_model(date) {
                self.state.model = Some(model);
            }
        }
    }

    fn build_model(&self, date: NaiveDate) -> Result<Model, EngineError> {
        let history = &self.state.history;
        let mut stats = BTreeMap::new();
        for &len in self.settings.stp.lengths() {
            for tile in DayWindow::tiles(len) {
                let totals = history
                    .daily_totals(tile)
                    .map_err(|e| EngineError::InvalidSettings(e.to_string()))?;
                stats.insert(
                    tile,
                    WindowStats::from_samples(tile, self.settings.alpha, &totals.values()),
                );
            }
        }
        let schedule = classify_tiles(history, self.settings.stp.lengths())
            .map_err(|e| EngineError::InvalidSettings(e.to_string()))?;
        let thresholds = self.thresholds_for(&stats, &schedule)?;
        Ok(Model {
            built_on: date,
            stats,
            schedule,
            thresholds,
        })
    }

    fn thresholds_for(
        &self,
        stats: &BTreeMap<DayWindow, WindowStats>,
        schedule: &PatternSchedule,
    ) -> Result<BTreeMap<DayWindow, TileThreshold>, EngineError> {
        let stp = &self.settings.stp;
        let mut out = BTreeMap::new();
        for (i, &len) in stp.lengths().iter().enumerate() {
            let finer = i.checked_sub(1).map(|j| stp.lengths()[j]);
            for tile in DayWindow::tiles(len) {
                let Some(label) = schedule.label(&tile) else {
                    continue;
                };
                let ws = &stats[&tile];
                // Per-pattern share of the tile according to the next finer level.
                let mut parts: BTreeMap<PatternClass, u32> = BTreeMap::new();
                if let Some(f) = finer {
                    for sub in DayWindow::tiles(f) {
                        let ov = sub.overlap(&tile);
                        if ov > 0 {
                            if let Some(p) = schedule.label(&sub) {
                                *parts.entry(p).or_default() += ov;
                            }
                        }
                    }
                }
                let md = |p: PatternClass| {
                    compute_md(&tile, p, ws, &self.coefficients, stp, &self.critical)
                };
                let threshold = if parts.len() > 1 {
                    let mut segments = Vec::with_capacity(parts.len());
                    for (p, t) in &parts {
                        segments.push((*t, md(*p)?));
                    }
                    TileThreshold {
                        pattern: label,
                        md: compose_md(&segments)?,
                        composed: true,
                    }
                } else {
                    TileThreshold {
                        pattern: label,
                        md: md(label)?,
                        composed: false,
                    }
                };
                out.insert(tile, threshold);
            }
        }
        Ok(out)
    }

    fn zero_flow_step(
        &mut self,
        volume: Option<f64>,
        suppressed: bool,
        at: DateTime<Utc>,
        out: &mut Vec<AlertTransition>,
    ) {
        let cfg = &self.settings.detector;
        let n = (cfg.zero_window / self.settings.interval_minutes) as usize;
        let recent = &mut self.state.recent;
        recent.push_back(volume);
        while recent.len() > n {
            recent.pop_front();
        }
        if recent.len() < n || suppressed {
            return;
        }
        let Some(total) = recent.iter().try_fold(0.0, |acc, v| v.map(|v| acc + v)) else {
            return;
        };
        if !is_pseudo_zero(total, cfg) {
            return;
        }
        self.state.avg_inhibited = false;
        let open = std::mem::take(&mut self.state.open);
        let (clear, keep): (Vec<usize>, Vec<usize>) = open
            .into_iter()
            .partition(|&i| self.state.alerts[i].criterion == Criterion::AverageDeviation);
        self.state.open = keep;
        for i in clear {
            self.transition(i, AlertState::ClearedByZeroFlow, at, out);
        }
    }

    fn steady_step(
        &mut self,
        start: DateTime<Utc>,
        volume: Option<f64>,
        suppressed: bool,
        end: DateTime<Utc>,
        out: &mut Vec<AlertTransition>,
    ) {
        let cfg = self.settings.detector.clone();
        let n = (cfg.steady_window / self.settings.interval_minutes) as usize;
        let tracker = &mut self.state.steady;
        match volume {
            Some(v) if !suppressed && v >= cfg.steady_min_flow => {
                if tracker.span_start.is_none() {
                    tracker.span_start = Some(start);
                }
                tracker.samples.push_back(v);
                while tracker.samples.len() > n {
                    tracker.samples.pop_front();
                }
            }
            _ => {
                tracker.samples.clear();
                tracker.span_start = None;
                tracker.inhibited = false;
                return;
            }
        }
        if tracker.samples.len() < n || tracker.inhibited {
            return;
        }
        let xs: Vec<f64> = tracker.samples.iter().copied().collect();
        if !steady_volumes(&xs, cfg.sd) {
            return;
        }
        tracker.inhibited = true;
        let med = median(&xs).unwrap_or(0.0);
        let span = Span {
            start: end - Duration::minutes(cfg.steady_window as i64),
            end,
        };
        self.raise(
            AlertRecord {
                id: 0,
                criterion: Criterion::SteadyConsumption,
                state: AlertState::Confirmed,
                span,
                measured: med,
                threshold: cfg.steady_min_flow,
                raised_at: end,
                updated_at: end,
                horizon: None,
                first: None,
                target: None,
                confirmation: None,
            },
            out,
        );
    }

    fn tile_status(&self, window: &DayWindow) -> TileStatus {
        let it = self.settings.interval_minutes;
        let a = (window.start_offset() / it) as usize;
        let b = (window.end_offset() / it) as usize;
        if self.state.suppressed_slots[a..b].iter().any(|s| *s) {
            return TileStatus::Suppressed;
        }
        match self.state.slots[a..b]
            .iter()
            .try_fold(0.0, |acc, v| v.map(|v| acc + v))
        {
            Some(total) => TileStatus::Available(total),
            None => TileStatus::Missing,
        }
    }

    fn threshold_of(&self, window: &DayWindow) -> Option<(PatternClass, f64, f64)> {
        let t = self.state.model.as_ref()?.thresholds.get(window)?;
        Some((t.pattern, t.md, self.effective(window, t)))
    }

    fn next_tile(tile: TileRef, len: u32) -> TileRef {
        if tile.window.end_offset() >= MINUTES_PER_DAY {
            TileRef {
                date: tile.date + Duration::days(1),
                window: DayWindow::tile_containing(len, 0),
            }
        } else {
            TileRef {
                date: tile.date,
                window: DayWindow::tile_containing(len, tile.window.end_offset()),
            }
        }
    }

    fn closes_at(len: u32, m_end: u32) -> Option<DayWindow> {
        let tile = DayWindow::tile_containing(len, m_end - 1);
        (tile.end_offset() == m_end).then_some(tile)
    }

    fn average_step(
        &mut self,
        date: NaiveDate,
        m_end: u32,
        at: DateTime<Utc>,
        suppressed: bool,
        out: &mut Vec<AlertTransition>,
    ) {
        let pairs = self.settings.detector.pairs(&self.settings.stp);
        let mut touched: BTreeMap<DayWindow, u64> = BTreeMap::new();
        for (t1, t2) in pairs {
            if let Some(tile) = Self::closes_at(t2, m_end) {
                let tref = TileRef { date, window: tile };
                let waiting: Vec<usize> = self
                    .state
                    .open
                    .iter()
                    .copied()
                    .filter(|&i| {
                        let a = &self.state.alerts[i];
                        a.horizon == Some((t1, t2)) && a.target == Some(tref)
                    })
                    .collect();
                for i in waiting {
                    match self.tile_status(&tile) {
                        TileStatus::Suppressed => {
                            self.state.alerts[i].target = Some(Self::next_tile(tref, t2));
                        }
                        TileStatus::Available(cons) => match self.threshold_of(&tile) {
                            Some((pattern, _, thr)) if cons > thr => {
                                let id = self.confirm(i, tref, pattern, cons, thr, at, out);
                                touched.insert(tile, id);
                            }
                            _ => self.close_alert(i, AlertState::Expired, at, out),
                        },
                        TileStatus::Missing => self.close_alert(i, AlertState::Expired, at, out),
                    }
                }
            }
            if let Some(tile) = Self::closes_at(t1, m_end) {
                if self.state.avg_inhibited || suppressed {
                    continue;
                }
                let TileStatus::Available(cons) = self.tile_status(&tile) else {
                    continue;
                };
                let Some((pattern, _, thr)) = self.threshold_of(&tile) else {
                    continue;
                };
                if cons <= thr {
                    continue;
                }
                let target = if m_end >= MINUTES_PER_DAY {
                    TileRef {
                        date: date + Duration::days(1),
                        window: DayWindow::tile_containing(t2, 0),
                    }
                } else {
                    TileRef {
                        date,
                        window: DayWindow::tile_containing(t2, m_end),
                    }
                };
                let duplicate = self.state.open.iter().any(|&i| {
                    let a = &self.state.alerts[i];
                    a.horizon == Some((t1, t2)) && a.target == Some(target)
                });
                if duplicate {
                    continue;
                }
                let first = TileRef { date, window: tile };
                let id = self.raise(
                    AlertRecord {
                        id: 0,
                        criterion: Criterion::AverageDeviation,
                        state: AlertState::Potential,
                        span: first.span(),
                        measured: cons,
                        threshold: thr,
                        raised_at: at,
                        updated_at: at,
                        horizon: Some((t1, t2)),
                        first: Some(Evidence {
                            tile: first,
                            pattern,
                            measured: cons,
                            threshold: thr,
                        }),
                        target: Some(target),
                        confirmation: None,
                    },
                    out,
                );
                touched.insert(tile, id);
            }
        }
        self.record_evaluations(date, m_end, &touched);
    }

    fn record_evaluations(
        &mut self,
        date: NaiveDate,
        m_end: u32,
        touched: &BTreeMap<DayWindow, u64>,
    ) {
        if self.settings.evaluation_log == 0 {
            return;
        }
        for &len in self.settings.stp.lengths() {
            let Some(tile) = Self::closes_at(len, m_end) else {
                continue;
            };
            let consumption = match self.tile_status(&tile) {
                TileStatus::Available(c) => Some(c),
                _ => None,
            };
            let t = self.threshold_of(&tile);
            self.state.evaluations.push_back(TileEvaluation {
                date,
                window: tile,
                consumption,
                pattern: t.map(|t| t.0),
                md: t.map(|t| t.1),
                tmd: t.map(|t| t.2),
                alert_id: touched.get(&tile).copied(),
            });
        }
        while self.state.evaluations.len() > self.settings.evaluation_log {
            self.state.evaluations.pop_front();
        }
    }

    fn raise(&mut self, mut alert: AlertRecord, out: &mut Vec<AlertTransition>) -> u64 {
        alert.id = self.state.next_id;
        self.state.next_id += 1;
        out.push(AlertTransition::of(&alert, alert.raised_at));
        let idx = self.state.alerts.len();
        if alert.state.is_open() {
            self.state.open.push(idx);
        }
        let id = alert.id;
        self.state.alerts.push(alert);
        id
    }

    fn transition(
        &mut self,
        idx: usize,
        state: AlertState,
        at: DateTime<Utc>,
        out: &mut Vec<AlertTransition>,
    ) {
        let a = &mut self.state.alerts[idx];
        a.state = state;
        a.updated_at = at;
        out.push(AlertTransition::of(a, at));
    }

    fn close_alert(
        &mut self,
        idx: usize,
        state: AlertState,
        at: DateTime<Utc>,
        out: &mut Vec<AlertTransition>,
    ) {
        self.state.open.retain(|&i| i != idx);
        self.transition(idx, state, at, out);
    }

    #[allow(clippy::too_many_arguments)]
    fn confirm(
        &mut self,
        idx: usize,
        tile: TileRef,
        pattern: PatternClass,
        measured: f64,
        threshold: f64,
        at: DateTime<Utc>,
        out: &mut Vec<AlertTransition>,
    ) -> u64 {
        self.state.open.retain(|&i| i != idx);
        {
            let a = &mut self.state.alerts[idx];
            a.span = Span {
                start: a.span.start,
                end: tile.span().end,
            };
            a.measured = measured;
            a.threshold = threshold;
            a.confirmation = Some(Evidence {
                tile,
                pattern,
                measured,
                threshold,
            });
        }
        self.transition(idx, AlertState::Confirmed, at, out);
        // One incident, one alert: pending suspicions are subsumed.
        self.state.avg_inhibited = true;
        let others: Vec<usize> = self
            .state
            .open
            .iter()
            .copied()
            .filter(|&i| self.state.alerts[i].criterion == Criterion::AverageDeviation)
            .collect();
        for i in others {
            self.close_alert(i, AlertState::Expired, at, out);
        }
        self.state.alerts[idx].id
    }

    /// Record a human verdict on a confirmed alert and retune its windows.
    pub fn apply_verdict(
        &mut self,
        id: u64,
        verdict: Verdict,
        at: DateTime<Utc>,
    ) -> Result<VerdictOutcome, EngineError> {
        let idx = self
            .state
            .alerts
            .iter()
            .position(|a| a.id == id)
            .ok_or(EngineError::UnknownAlert(id))?;
        match self.state.alerts[idx].state {
            AlertState::Confirmed => {}
            AlertState::JudgedFalse | AlertState::JudgedReal => {
                return Err(EngineError::AlreadyJudged(id))
            }
            _ => return Err(EngineError::NotConfirmed(id)),
        }
        let new_state = match verdict {
            Verdict::FalseAlert => AlertState::JudgedFalse,
            Verdict::RealLeak | Verdict::KnownLeak => AlertState::JudgedReal,
        };
        {
            let a = &mut self.state.alerts[idx];
            a.state = new_state;
            a.updated_at = at;
        }
        let fb = &mut self.state.feedback;
        fb.reliability = update_reliability(&fb.reliability, verdict);
        fb.verdicts.push(VerdictRecord {
            alert_id: id,
            verdict,
            at,
        });
        let alert = self.state.alerts[idx].clone();
        let mut windows = Vec::new();
        if self.learning_complete() {
            for ev in alert.first.iter().chain(alert.confirmation.iter()) {
                windows.push(ev.tile.window);
                self.state
                    .feedback
                    .tuned
                    .insert((ev.tile.window, ev.pattern));
            }
        }
        let thresholds = self
            .thresholds()
            .into_iter()
            .filter(|t| windows.contains(&t.window))
            .collect();
        Ok(VerdictOutcome {
            alert,
            reliability: self.state.feedback.reliability.clone(),
            thresholds,
        })
    }

    /// A leak that no alert reported.
    pub fn record_missed_leak(&mut self, at: DateTime<Utc>) -> ReliabilityState {
        let fb = &mut self.state.feedback;
        fb.reliability = record_missed_leak(&fb.reliability);
        fb.missed_leaks.push(at);
        fb.reliability.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metering::FlowSample;

    fn t0() -> DateTime<Utc> {
        day_start(NaiveDate::from_ymd_opt(2024, 5, 1).unwrap())
    }

    fn flow(t: DateTime<Utc>, v: f64) -> FlowEntry {
        FlowEntry::Flow(FlowSample {
            interval_start: t,
            interval_length: 1,
            volume: v,
        })
    }

    fn engine() -> Engine {
        Engine::new(EngineSettings::default(), CoefficientTable::defaults()).unwrap()
    }

    #[test]
    fn rejects_out_of_order_and_misaligned() {
        let mut e = engine();
        e.push(&flow(t0() + Duration::minutes(5), 0.0)).unwrap();
        assert!(matches!(
            e.push(&flow(t0(), 0.0)),
            Err(EngineError::OutOfOrder { .. })
        ));
        assert!(matches!(
            e.push(&flow(t0() + Duration::seconds(390), 0.0)),
            Err(EngineError::Misaligned { .. })
        ));
    }

    #[test]
    fn steady_leak_confirms_during_learning() {
        let mut e = engine();
        let mut alerts = Vec::new();
        for m in 0..200 {
            let v = if m >= 30 { 1.5 } else { 0.0 };
            alerts.extend(e.push(&flow(t0() + Duration::minutes(m), v)).unwrap());
        }
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].criterion, Criterion::SteadyConsumption);
        assert_eq!(alerts[0].span.start, t0() + Duration::minutes(30));
        assert_eq!(alerts[0].timestamp, t0() + Duration::minutes(150));
        assert!(e.status().in_learning);
    }

    #[test]
    fn fire_alarm_blocks_steady_alert() {
        let mut e = engine();
        e.set_fire_alarm(true);
        for m in 0..200 {
            assert!(e
                .push(&flow(t0() + Duration::minutes(m), 20.0))
                .unwrap()
                .is_empty());
        }
        e.set_fire_alarm(false);
        let mut n = 0;
        for m in 200..330 {
            n += e
                .push(&flow(t0() + Duration::minutes(m), 20.0))
                .unwrap()
                .len();
        }
        assert_eq!(n, 1);
    }

    #[test]
    fn gaps_fill_as_missing() {
        let mut e = engine();
        e.push(&flow(t0(), 1.0)).unwrap();
        e.push(&flow(t0() + Duration::minutes(10), 1.0)).unwrap();
        assert_eq!(e.now(), Some(t0() + Duration::minutes(11)));
        assert_eq!(e.state().slots[5], None);
        assert_eq!(e.state().slots[10], Some(1.0));
    }

    #[test]
    fn verdict_errors() {
        let mut e = engine();
        assert_eq!(
            e.apply_verdict(9, Verdict::FalseAlert, t0()).unwrap_err(),
            EngineError::UnknownAlert(9)
        );
    }
}
