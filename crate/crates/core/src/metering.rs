//! Meter ingestion.
//!
//! A meter log is a sequence of cumulative readings. Detection works on the
//! per-interval consumption derived from consecutive readings, and all
//! statistics live on [`DayWindow`]s: clock intervals such as 06:00-06:30
//! that describe the same span on every day.

use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, Timelike, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const MINUTES_PER_DAY: u32 = 1440;

/// CSV header of the meter-log format.
pub const CSV_HEADER: &str = "timestamp,reading_liters";

#[derive(Debug, Error)]
pub enum MeteringError {
    #[error("line {line}: expected header `{CSV_HEADER}`")]
    BadHeader { line: usize },
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: reading {reading} L is below the previous reading {previous} L")]
    NonMonotoneReading {
        line: usize,
        reading: f64,
        previous: f64,
    },
    #[error("line {line}: duplicate timestamp {timestamp}")]
    DuplicateTimestamp {
        line: usize,
        timestamp: DateTime<Utc>,
    },
    #[error("line {line}: timestamp {timestamp} is earlier than the previous row")]
    OutOfOrder {
        line: usize,
        timestamp: DateTime<Utc>,
    },
    #[error("interval must be a positive number of minutes")]
    InvalidInterval,
    #[error("samples span less than one interval")]
    InsufficientData,
    #[error("invalid day window: {0}")]
    InvalidWindow(String),
    #[error("interval of {it} min does not divide window length {length} min")]
    IndivisibleWindow { it: u32, length: u32 },
    #[error("window {window} on {day}: no sample at offset {offset} min")]
    CoverageGap {
        window: DayWindow,
        day: NaiveDate,
        offset: u32,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One cumulative register reading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeterSample {
    pub timestamp: DateTime<Utc>,
    /// Cumulative volume in liters.
    pub reading: f64,
}

/// Consumption over one sampling interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub interval_start: DateTime<Utc>,
    /// Interval length in minutes.
    pub interval_length: u32,
    /// Liters consumed in the interval.
    pub volume: f64,
}

impl FlowSample {
    pub fn interval_end(&self) -> DateTime<Utc> {
        self.interval_start + Duration::minutes(self.interval_length as i64)
    }
}

/// An interval for which no reading pair exists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingInterval {
    pub interval_start: DateTime<Utc>,
    pub interval_length: u32,
}

/// Element of a flow stream: either a measured interval or an explicit gap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowEntry {
    Flow(FlowSample),
    Missing(MissingInterval),
}

impl FlowEntry {
    pub fn start(&self) -> DateTime<Utc> {
        match self {
            FlowEntry::Flow(f) => f.interval_start,
            FlowEntry::Missing(m) => m.interval_start,
        }
    }

    pub fn length(&self) -> u32 {
        match self {
            FlowEntry::Flow(f) => f.interval_length,
            FlowEntry::Missing(m) => m.interval_length,
        }
    }

    pub fn volume(&self) -> Option<f64> {
        match self {
            FlowEntry::Flow(f) => Some(f.volume),
            FlowEntry::Missing(_) => None,
        }
    }

    pub fn as_flow(&self) -> Option<&FlowSample> {
        match self {
            FlowEntry::Flow(f) => Some(f),
            FlowEntry::Missing(_) => None,
        }
    }
}

/// How [`to_flow`] treats intervals with no bracketing readings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapPolicy {
    /// Emit [`FlowEntry::Missing`] for every interval lacking a reading pair.
    #[default]
    Mark,
    /// Spread the volume across the gap linearly.
    Interpolate,
}

/// Round a volume to the 0.1 L register resolution, returned in deciliters.
pub fn to_deciliters(liters: f64) -> i64 {
    (liters * 10.0).round() as i64
}

pub fn quantize(liters: f64) -> f64 {
    to_deciliters(liters) as f64 / 10.0
}

/// Parse a meter log. Readings are quantized to 0.1 L.
///
/// Rows must be strictly increasing in time and non-decreasing in reading;
/// a reordered log is rejected rather than sorted.
pub fn ingest_csv<R: BufRead>(reader: R) -> Result<Vec<MeterSample>, MeteringError> {
    let mut samples: Vec<MeterSample> = Vec::new();
    let mut lines = reader.lines().enumerate();

    match lines.next() {
        None => return Err(MeteringError::BadHeader { line: 1 }),
        Some((_, line)) => {
            let line = line?;
            if line.trim_end_matches('\r') != CSV_HEADER {
                return Err(MeteringError::BadHeader { line: 1 });
            }
        }
    }

    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let sample = parse_row(line, line_no)?;
        if let Some(prev) = samples.last() {
            if sample.timestamp == prev.timestamp {
                return Err(MeteringError::DuplicateTimestamp {
                    line: line_no,
                    timestamp: sample.timestamp,
                });
            }
            if sample.timestamp < prev.timestamp {
                return Err(MeteringError::OutOfOrder {
                    line: line_no,
                    timestamp: sample.timestamp,
                });
            }
            if sample.reading < prev.reading {
                return Err(MeteringError::NonMonotoneReading {
                    line: line_no,
                    reading: sample.reading,
                    previous: prev.reading,
                });
            }
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Parse a single `timestamp,reading_liters` row.
pub fn parse_row(line: &str, line_no: usize) -> Result<MeterSample, MeteringError> {
    let malformed = |reason: String| MeteringError::MalformedRow {
        line: line_no,
        reason,
    };
    let (ts, reading) = line
        .split_once(',')
        .ok_or_else(|| malformed("expected two comma-separated fields".into()))?;
    if reading.contains(',') {
        return Err(malformed("too many fields".into()));
    }
    let timestamp = DateTime::parse_from_rfc3339(ts.trim())
        .map_err(|e| malformed(format!("bad timestamp `{ts}`: {e}")))?
        .with_timezone(&Utc);
    let value: f64 = reading
        .trim()
        .parse()
        .map_err(|_| malformed(format!("bad reading `{reading}`")))?;
    if !value.is_finite() || value < 0.0 {
        return Err(malformed(format!(
            "reading must be a non-negative number, got `{reading}`"
        )));
    }
    Ok(MeterSample {
        timestamp,
        reading: quantize(value),
    })
}

/// Incremental reading-to-flow converter.
///
/// The interval grid is anchored at the first accepted sample. Samples that
/// fall between grid points are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowAssembler {
    interval: u32,
    policy: GapPolicy,
    anchor: Option<DateTime<Utc>>,
    last: Option<(i64, i64)>,
}

impl FlowAssembler {
    pub fn new(interval: u32, policy: GapPolicy) -> Result<Self, MeteringError> {
        if interval == 0 {
            return Err(MeteringError::InvalidInterval);
        }
        Ok(Self {
            interval,
            policy,
            anchor: None,
            last: None,
        })
    }

    /// Start the grid at `anchor` instead of at the first sample.
    pub fn anchored(mut self, anchor: DateTime<Utc>) -> Self {
        self.anchor = Some(anchor);
        self
    }

    /// Time and reading of the last accepted sample.
    pub fn last(&self) -> Option<(DateTime<Utc>, f64)> {
        let (anchor, (i, dl)) = (self.anchor?, self.last?);
        Some((
            anchor + Duration::seconds(i * self.interval as i64 * 60),
            dl as f64 / 10.0,
        ))
    }

    pub fn push(&mut self, sample: &MeterSample) -> Vec<FlowEntry> {
        let anchor = *self.anchor.get_or_insert(sample.timestamp);
        let step = self.interval as i64 * 60;
        let offset = (sample.timestamp - anchor).num_seconds();
        if offset < 0 || offset % step != 0 {
            return Vec::new();
        }
        let index = offset / step;
        let dl = to_deciliters(sample.reading);
        let mut out = Vec::new();
        if let Some((prev_index, prev_dl)) = self.last {
            if index <= prev_index {
                return out;
            }
            let count = index - prev_index;
            let at = |i: i64| anchor + Duration::seconds(i * step);
            if count == 1 {
                out.push(FlowEntry::Flow(FlowSample {
                    interval_start: at(prev_index),
                    interval_length: self.interval,
                    volume: (dl - prev_dl) as f64 / 10.0,
                }));
            } else {
                let share = (dl - prev_dl) as f64 / 10.0 / count as f64;
                for i in prev_index..index {
                    out.push(match self.policy {
                        GapPolicy::Mark => FlowEntry::Missing(MissingInterval {
                            interval_start: at(i),
                            interval_length: self.interval,
                        }),
                        GapPolicy::Interpolate => FlowEntry::Flow(FlowSample {
                            interval_start: at(i),
                            interval_length: self.interval,
                            volume: share,
                        }),
                    });
                }
            }
        }
        self.last = Some((index, dl));
        out
    }
}

/// Convert cumulative readings to per-interval flow, marking gaps.
pub fn to_flow(samples: &[MeterSample], interval: u32) -> Result<Vec<FlowEntry>, MeteringError> {
    to_flow_with(samples, interval, GapPolicy::Mark)
}

pub fn to_flow_with(
    samples: &[MeterSample],
    interval: u32,
    policy: GapPolicy,
) -> Result<Vec<FlowEntry>, MeteringError> {
    let mut asm = FlowAssembler::new(interval, policy)?;
    let mut out = Vec::new();
    for s in samples {
        out.extend(asm.push(s));
    }
    if out.is_empty() {
        return Err(MeteringError::InsufficientData);
    }
    Ok(out)
}

/// Aggregate flows into coarser blocks aligned to midnight.
///
/// A block containing any missing interval becomes missing; partial blocks
/// at either end of the input are dropped.
pub fn resample(flows: &[FlowEntry], it: u32) -> Result<Vec<FlowEntry>, MeteringError> {
    if it == 0 || !MINUTES_PER_DAY.is_multiple_of(it) {
        return Err(MeteringError::InvalidInterval);
    }
    let mut out = Vec::new();
    let mut block: Option<(DateTime<Utc>, u32, Option<f64>)> = None;
    for entry in flows {
        let start = entry.start();
        let minute = minute_of_day(start);
        if !it.is_multiple_of(entry.length()) {
            return Err(MeteringError::InvalidInterval);
        }
        if minute.is_multiple_of(it) {
            block = Some((start, 0, Some(0.0)));
        }
        if let Some((bstart, covered, vol)) = block.as_mut() {
            if start != *bstart + Duration::minutes(*covered as i64) {
                block = None;
                continue;
            }
            *covered += entry.length();
            *vol = match (*vol, entry.volume()) {
                (Some(a), Some(b)) => Some(a + b),
                _ => None,
            };
            if *covered == it {
                out.push(match *vol {
                    Some(v) => FlowEntry::Flow(FlowSample {
                        interval_start: *bstart,
                        interval_length: it,
                        volume: v,
                    }),
                    None => FlowEntry::Missing(MissingInterval {
                        interval_start: *bstart,
                        interval_length: it,
                    }),
                });
                block = None;
            }
        }
    }
    Ok(out)
}

/// Minutes past midnight (UTC) of an instant.
pub fn minute_of_day(t: DateTime<Utc>) -> u32 {
    t.hour() * 60 + t.minute()
}

pub fn day_start(day: NaiveDate) -> DateTime<Utc> {
    day.and_time(NaiveTime::MIN).and_utc()
}

/// A clock-anchored window, e.g. 06:00-06:30 on every day.
///
/// Windows never wrap past midnight: `end_offset() <= 1440`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DayWindow {
    start_offset: u32,
    length: u32,
}

impl DayWindow {
    pub fn new(start_offset: u32, length: u32) -> Result<Self, MeteringError> {
        if start_offset >= MINUTES_PER_DAY {
            return Err(MeteringError::InvalidWindow(format!(
                "start offset {start_offset} is not within the day"
            )));
        }
        if length == 0 || start_offset + length > MINUTES_PER_DAY {
            return Err(MeteringError::InvalidWindow(format!(
                "length {length} from offset {start_offset} leaves the day"
            )));
        }
        Ok(Self {
            start_offset,
            length,
        })
    }

    pub fn start_offset(&self) -> u32 {
        self.start_offset
    }

    pub fn length(&self) -> u32 {
        self.length
    }

    pub fn end_offset(&self) -> u32 {
        self.start_offset + self.length
    }

    pub fn contains(&self, minute: u32) -> bool {
        minute >= self.start_offset && minute < self.end_offset()
    }

    pub fn overlap(&self, other: &DayWindow) -> u32 {
        let lo = self.start_offset.max(other.start_offset);
        let hi = self.end_offset().min(other.end_offset());
        hi.saturating_sub(lo)
    }

    pub fn start_on(&self, day: NaiveDate) -> DateTime<Utc> {
        day_start(day) + Duration::minutes(self.start_offset as i64)
    }

    pub fn end_on(&self, day: NaiveDate) -> DateTime<Utc> {
        day_start(day) + Duration::minutes(self.end_offset() as i64)
    }

    /// Partition the day into consecutive windows of `length` minutes.
    /// When `length` does not divide the day the last tile is truncated at
    /// midnight.
    pub fn tiles(length: u32) -> Vec<DayWindow> {
        assert!(length > 0, "tile length must be positive");
        let mut out = Vec::new();
        let mut start = 0;
        while start < MINUTES_PER_DAY {
            let len = length.min(MINUTES_PER_DAY - start);
            out.push(DayWindow {
                start_offset: start,
                length: len,
            });
            start += length;
        }
        out
    }

    /// The tile of the `length` tiling that contains `minute`.
    pub fn tile_containing(length: u32, minute: u32) -> DayWindow {
        let start = (minute / length) * length;
        DayWindow {
            start_offset: start,
            length: length.min(MINUTES_PER_DAY - start),
        }
    }
}

fn fmt_hhmm(minutes: u32) -> String {
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

fn parse_hhmm(s: &str) -> Option<u32> {
    let (h, m) = s.split_once(':')?;
    let h: u32 = h.parse().ok()?;
    let m: u32 = m.parse().ok()?;
    (m < 60 && h <= 24).then_some(h * 60 + m)
}

impl fmt::Display for DayWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}",
            fmt_hhmm(self.start_offset),
            fmt_hhmm(self.end_offset())
        )
    }
}

impl FromStr for DayWindow {
    type Err = MeteringError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MeteringError::InvalidWindow(format!("cannot parse `{s}` as HH:MM-HH:MM"));
        let (a, b) = s.split_once('-').ok_or_else(bad)?;
        let start = parse_hhmm(a).ok_or_else(bad)?;
        let end = parse_hhmm(b).ok_or_else(bad)?;
        if end <= start {
            return Err(bad());
        }
        DayWindow::new(start, end - start)
    }
}

impl Serialize for DayWindow {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DayWindow {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The samples of one window on one day: `x_i = Cons(SP + IT*i)` for every
/// `i` with `IT*i <= T`.
///
/// The last sample starts at the window's end point; it is kept for
/// membership but belongs to the following window, so [`SampleGroup::total`]
/// sums only the intervals inside `[SP, EP)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub window: DayWindow,
    pub day: NaiveDate,
    pub it: u32,
    pub samples: Vec<FlowSample>,
}

impl SampleGroup {
    /// Number of samples a complete group holds: `T/IT + 1`.
    pub fn expected_len(&self) -> usize {
        (self.window.length() / self.it) as usize + 1
    }

    pub fn is_complete(&self) -> bool {
        self.it > 0 && self.samples.len() == self.expected_len()
    }

    /// Consumption inside the window.
    pub fn total(&self) -> f64 {
        let inside = (self.window.length() / self.it.max(1)) as usize;
        self.samples.iter().take(inside).map(|s| s.volume).sum()
    }
}

/// Cut the samples of `window` on `day` out of a flow stream at spacing `it`.
pub fn slice_window(
    flows: &[FlowEntry],
    window: DayWindow,
    day: NaiveDate,
    it: u32,
) -> Result<SampleGroup, MeteringError> {
    if it == 0 {
        return Err(MeteringError::InvalidInterval);
    }
    if !window.length().is_multiple_of(it) {
        return Err(MeteringError::IndivisibleWindow {
            it,
            length: window.length(),
        });
    }
    let sp = window.start_on(day);
    let count = window.length() / it;
    let mut samples = Vec::with_capacity(count as usize + 1);
    for i in 0..=count {
        let offset = it * i;
        let at = sp + Duration::minutes(offset as i64);
        let found = flows
            .binary_search_by(|e| e.start().cmp(&at))
            .ok()
            .map(|idx| &flows[idx])
            .filter(|e| e.length() == it)
            .and_then(|e| e.as_flow());
        match found {
            Some(s) => samples.push(*s),
            None => {
                return Err(MeteringError::CoverageGap {
                    window,
                    day,
                    offset,
                })
            }
        }
    }
    Ok(SampleGroup {
        window,
        day,
        it,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
    }

    fn csv(body: &str) -> String {
        format!("{CSV_HEADER}\n{body}")
    }

    #[test]
    fn ingest_two_rows() {
        let data = csv("2024-01-01T00:00:00Z,100.0\n2024-01-01T00:01:00Z,100.5");
        let samples = ingest_csv(data.as_bytes()).unwrap();
        assert_eq!(samples.len(), 2);
        assert!((samples[1].reading - samples[0].reading - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ingest_rejects_rollback() {
        let data = csv("2024-01-01T00:00:00Z,100.0\n2024-01-01T00:01:00Z,99.0\n");
        match ingest_csv(data.as_bytes()) {
            Err(MeteringError::NonMonotoneReading { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingest_empty_body() {
        let data = format!("{CSV_HEADER}\n");
        assert!(ingest_csv(data.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn ingest_reports_malformed_line() {
        let data = csv("2024-01-01T00:00:00Z,100.0\nnot-a-time,3\n");
        match ingest_csv(data.as_bytes()) {
            Err(MeteringError::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_duplicates_and_reordering() {
        let dup = csv("2024-01-01T00:00:00Z,1.0\n2024-01-01T00:00:00Z,1.0\n");
        assert!(matches!(
            ingest_csv(dup.as_bytes()),
            Err(MeteringError::DuplicateTimestamp { line: 3, .. })
        ));
        let swapped = csv("2024-01-01T00:01:00Z,1.0\n2024-01-01T00:00:00Z,1.0\n");
        assert!(matches!(
            ingest_csv(swapped.as_bytes()),
            Err(MeteringError::OutOfOrder { line: 3, .. })
        ));
    }

    #[test]
    fn ingest_requires_header() {
        assert!(matches!(
            ingest_csv("2024-01-01T00:00:00Z,1.0\n".as_bytes()),
            Err(MeteringError::BadHeader { .. })
        ));
    }

    #[test]
    fn ingest_quantizes_to_deciliters() {
        let data = csv("2024-01-01T00:00:00Z,100.04\n2024-01-01T00:01:00Z,100.26\n");
        let s = ingest_csv(data.as_bytes()).unwrap();
        assert_eq!(s[0].reading, 100.0);
        assert_eq!(s[1].reading, 100.3);
    }

    fn sample(ts: &str, reading: f64) -> MeterSample {
        MeterSample {
            timestamp: t(ts),
            reading,
        }
    }

    #[test]
    fn flow_single_interval() {
        let flows = to_flow(
            &[
                sample("2024-01-01T00:00:00Z", 100.0),
                sample("2024-01-01T00:01:00Z", 100.5),
            ],
            1,
        )
        .unwrap();
        assert_eq!(flows.len(), 1);
        assert_eq!(flows[0].volume(), Some(0.5));
    }

    #[test]
    fn flow_constant_reading_is_zero() {
        let samples: Vec<_> = (0..=10)
            .map(|m| MeterSample {
                timestamp: t("2024-01-01T00:00:00Z") + Duration::minutes(m),
                reading: 42.0,
            })
            .collect();
        let flows = to_flow(&samples, 1).unwrap();
        assert_eq!(flows.len(), 10);
        assert!(flows.iter().all(|f| f.volume() == Some(0.0)));
    }

    #[test]
    fn flow_gap_is_marked_not_zeroed() {
        let samples = [
            sample("2024-01-01T00:00:00Z", 10.0),
            sample("2024-01-01T00:03:00Z", 13.0),
        ];
        let marked = to_flow(&samples, 1).unwrap();
        assert_eq!(marked.len(), 3);
        assert!(marked.iter().all(|f| matches!(f, FlowEntry::Missing(_))));

        let interpolated = to_flow_with(&samples, 1, GapPolicy::Interpolate).unwrap();
        assert_eq!(interpolated.len(), 3);
        for f in &interpolated {
            assert!((f.volume().unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_needs_one_interval() {
        assert!(matches!(
            to_flow(&[sample("2024-01-01T00:00:00Z", 1.0)], 1),
            Err(MeteringError::InsufficientData)
        ));
        assert!(matches!(
            to_flow(&[], 1),
            Err(MeteringError::InsufficientData)
        ));
        assert!(matches!(
            to_flow(&[sample("2024-01-01T00:00:00Z", 1.0)], 0),
            Err(MeteringError::InvalidInterval)
        ));
    }

    fn minute_flows(day: NaiveDate, volumes: &[f64]) -> Vec<FlowEntry> {
        volumes
            .iter()
            .enumerate()
            .map(|(i, v)| {
                FlowEntry::Flow(FlowSample {
                    interval_start: day_start(day) + Duration::minutes(i as i64),
                    interval_length: 1,
                    volume: *v,
                })
            })
            .collect()
    }

    #[test]
    fn slice_thirty_minutes_every_five() {
        let day = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let flows = resample(&minute_flows(day, &vec![0.1; 1440]), 5).unwrap();
        let w: DayWindow = "06:00-06:30".parse().unwrap();
        let g = slice_window(&flows, w, day, 5).unwrap();
        let offsets: Vec<i64> = g
            .samples
            .iter()
            .map(|s| (s.interval_start - w.start_on(day)).num_minutes())
            .collect();
        assert_eq!(offsets, vec![0, 5, 10, 15, 20, 25, 30]);
        assert!((g.total() - 3.0).abs() < 1e-9);
        assert!(g.is_complete());
    }

    #[test]
    fn slice_fifteen_at_fifteen() {
        let day = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let flows = resample(&minute_flows(day, &vec![0.0; 1440]), 15).unwrap();
        let w = DayWindow::new(60, 15).unwrap();
        assert_eq!(slice_window(&flows, w, day, 15).unwrap().samples.len(), 2);
    }

    #[test]
    fn slice_rejects_indivisible_interval() {
        let day = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let w = DayWindow::new(0, 30).unwrap();
        assert!(matches!(
            slice_window(&[], w, day, 7),
            Err(MeteringError::IndivisibleWindow { it: 7, length: 30 })
        ));
    }

    #[test]
    fn slice_reports_coverage_gap() {
        let day = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let mut flows = minute_flows(day, &vec![0.0; 1440]);
        flows[62] = FlowEntry::Missing(MissingInterval {
            interval_start: flows[62].start(),
            interval_length: 1,
        });
        let w = DayWindow::new(60, 5).unwrap();
        assert!(matches!(
            slice_window(&flows, w, day, 1),
            Err(MeteringError::CoverageGap { offset: 2, .. })
        ));
    }

    #[test]
    fn window_parse_and_tiles() {
        let w: DayWindow = "20:00-24:00".parse().unwrap();
        assert_eq!(w.start_offset(), 1200);
        assert_eq!(w.length(), 240);
        assert_eq!(w.to_string(), "20:00-24:00");
        let tiles = DayWindow::tiles(300);
        assert_eq!(tiles.len(), 5);
        assert_eq!(tiles[4], w);
        assert!("06:30-06:00".parse::<DayWindow>().is_err());
        assert!(DayWindow::new(1430, 30).is_err());
    }

    proptest! {
        #[test]
        fn slice_count_matches_membership(t_mult in 1u32..48, it in prop::sample::select(vec![1u32, 2, 3, 5, 15, 30])) {
            let length = (it * t_mult).min(720);
            prop_assume!(length % it == 0);
            let day = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
            let flows = resample(&minute_flows(day, &vec![0.2; 2 * 1440]), it).unwrap();
            let w = DayWindow::new(0, length).unwrap();
            let g = slice_window(&flows, w, day, it).unwrap();
            prop_assert_eq!(g.samples.len() as u32, length / it + 1);
        }

        #[test]
        fn flow_sums_telescope(steps in prop::collection::vec(0u32..50, 1..200)) {
            let base = t("2024-03-01T00:00:00Z");
            let mut reading = 1000.0;
            let mut samples = vec![MeterSample { timestamp: base, reading }];
            for (i, dl) in steps.iter().enumerate() {
                reading += *dl as f64 / 10.0;
                samples.push(MeterSample { timestamp: base + Duration::minutes(i as i64 + 1), reading });
            }
            let flows = to_flow(&samples, 1).unwrap();
            let total: f64 = flows.iter().filter_map(|f| f.volume()).sum();
            let expected = samples.last().unwrap().reading - samples[0].reading;
            prop_assert!((total - expected).abs() < 1e-9);
        }

        #[test]
        fn permuted_rows_never_ingest_out_of_order(perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle()) {
            let base = t("2024-03-01T00:00:00Z");
            let rows: Vec<String> = perm.iter()
                .map(|&i| format!("{},{}", (base + Duration::minutes(i as i64)).to_rfc3339(), 10.0 + i as f64))
                .collect();
            let data = csv(&rows.join("\n"));
            if let Ok(samples) = ingest_csv(data.as_bytes()) {
                prop_assert!(samples.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
            }
        }
    }
}
