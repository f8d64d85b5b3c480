//! Flag value grammars for `simulate`.
//!
//! ```text
//! point  := "day" N "T" HH ":" MM          N counts from 1
//! leak   := RATE UNIT "@" point "-" [point]  UNIT in Lpm | Lps | Lph
//! burst  := LITERS "L@" point "+" MINUTES
//! fire   := RATE "Lpm@" point "+" MINUTES
//! range  := point "-" point
//! ```

use chrono::{DateTime, Duration, NaiveDate, Utc};
use leakwatch_core::metering::day_start;

/// An instant relative to the first simulated day.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DayPoint {
    pub day: u32,
    pub minute: u32,
}

impl DayPoint {
    pub fn at(&self, start: NaiveDate) -> DateTime<Utc> {
        day_start(start)
            + Duration::days(self.day as i64 - 1)
            + Duration::minutes(self.minute as i64)
    }

    /// Whether the point lies within a trace of `days` days (end inclusive).
    pub fn within(&self, days: u32) -> bool {
        self.day >= 1 && (self.day <= days || (self.day == days + 1 && self.minute == 0))
    }
}

fn parse_point(s: &str) -> Result<DayPoint, String> {
    let rest = s
        .strip_prefix("day")
        .ok_or_else(|| format!("`{s}`: expected dayNThh:mm"))?;
    let (d, hm) = rest
        .split_once('T')
        .ok_or_else(|| format!("`{s}`: expected dayNThh:mm"))?;
    let day: u32 = d.parse().map_err(|_| format!("`{s}`: bad day number"))?;
    if day == 0 {
        return Err(format!("`{s}`: days count from 1"));
    }
    let (h, m) = hm
        .split_once(':')
        .ok_or_else(|| format!("`{s}`: expected hh:mm"))?;
    let h: u32 = h.parse().map_err(|_| format!("`{s}`: bad hour"))?;
    let m: u32 = m.parse().map_err(|_| format!("`{s}`: bad minute"))?;
    if h > 23 || m > 59 {
        return Err(format!("`{s}`: time out of range"));
    }
    Ok(DayPoint {
        day,
        minute: h * 60 + m,
    })
}

fn parse_amount(s: &str, what: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}`: bad {what}"))?;
    if !(v.is_finite() && v > 0.0) {
        return Err(format!("`{s}`: {what} must be positive"));
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakArg {
    /// Liters per second.
    pub rate: f64,
    pub start: DayPoint,
    pub end: Option<DayPoint>,
}

pub fn parse_leak(s: &str) -> Result<LeakArg, String> {
    let (rate, when) = s
        .split_once('@')
        .ok_or_else(|| format!("`{s}`: expected RATE(Lpm|Lps|Lph)@dayNThh:mm-[dayNThh:mm]"))?;
    let (num, per_s) = if let Some(n) = rate.strip_suffix("Lpm") {
        (n, 1.0 / 60.0)
    } else if let Some(n) = rate.strip_suffix("Lps") {
        (n, 1.0)
    } else if let Some(n) = rate.strip_suffix("Lph") {
        (n, 1.0 / 3600.0)
    } else {
        return Err(format!("`{rate}`: rate needs a unit Lpm, Lps or Lph"));
    };
    let rate = parse_amount(num, "rate")? * per_s;
    let (a, b) = when
        .split_once('-')
        .ok_or_else(|| format!("`{when}`: expected START-[END]"))?;
    let start = parse_point(a)?;
    let end = if b.is_empty() {
        None
    } else {
        Some(parse_point(b)?)
    };
    if let Some(e) = end {
        if (e.day, e.minute) <= (start.day, start.minute) {
            return Err(format!("`{when}`: leak ends before it starts"));
        }
    }
    Ok(LeakArg { rate, start, end })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PulseArg {
    pub amount: f64,
    pub start: DayPoint,
    pub minutes: u32,
}

fn parse_pulse(s: &str, unit: &str) -> Result<PulseArg, String> {
    let (amt, rest) = s
        .split_once(&format!("{unit}@"))
        .ok_or_else(|| format!("`{s}`: expected AMOUNT{unit}@dayNThh:mm+MINUTES"))?;
    let (p, mins) = rest
        .split_once('+')
        .ok_or_else(|| format!("`{s}`: expected +MINUTES"))?;
    let minutes: u32 = mins.parse().map_err(|_| format!("`{mins}`: bad minutes"))?;
    if minutes == 0 {
        return Err(format!("`{s}`: duration must be positive"));
    }
    Ok(PulseArg {
        amount: parse_amount(amt, "amount")?,
        start: parse_point(p)?,
        minutes,
    })
}

/// `80L@day15T07:30+8`: liters spread over minutes.
pub fn parse_burst(s: &str) -> Result<PulseArg, String> {
    parse_pulse(s, "L")
}

/// `30Lpm@day3T12:00+20`: liters per minute for minutes.
pub fn parse_fire(s: &str) -> Result<PulseArg, String> {
    parse_pulse(s, "Lpm")
}

pub fn parse_range(s: &str) -> Result<(DayPoint, DayPoint), String> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| format!("`{s}`: expected START-END"))?;
    let (a, b) = (parse_point(a)?, parse_point(b)?);
    if (b.day, b.minute) <= (a.day, a.minute) {
        return Err(format!("`{s}`: empty range"));
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leak_grammar() {
        let l = parse_leak("1.5Lpm@day15T10:00-").unwrap();
        assert_eq!(l.rate, 1.5 / 60.0);
        assert_eq!(
            l.start,
            DayPoint {
                day: 15,
                minute: 600
            }
        );
        assert_eq!(l.end, None);
        let l = parse_leak("0.05Lps@day1T00:30-day2T01:00").unwrap();
        assert_eq!(l.rate, 0.05);
        assert_eq!(l.end, Some(DayPoint { day: 2, minute: 60 }));
        for bad in [
            "1.5@day1T10:00-",
            "1.5Lpm@day0T10:00-",
            "1.5Lpm@day1T25:00-",
            "1.5Lpm@day1T10:00",
            "-1Lpm@day1T10:00-",
            "1Lpm@day2T10:00-day1T10:00",
            "garbage",
        ] {
            assert!(parse_leak(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn pulses_and_ranges() {
        let b = parse_burst("80L@day15T07:30+8").unwrap();
        assert_eq!((b.amount, b.start.minute, b.minutes), (80.0, 450, 8));
        let f = parse_fire("30Lpm@day3T12:00+20").unwrap();
        assert_eq!((f.amount, f.start.day, f.minutes), (30.0, 3, 20));
        assert!(parse_burst("80L@day15T07:30").is_err());
        assert!(parse_fire("30Lpm@day3T12:00+0").is_err());
        let (a, b) = parse_range("day1T00:00-day1T06:00").unwrap();
        assert_eq!((a.minute, b.minute), (0, 360));
        assert!(parse_range("day1T06:00-day1T06:00").is_err());
    }

    #[test]
    fn points_resolve_against_start() {
        let d = NaiveDate::from_ymd_opt(2024, 3, 1).unwrap();
        let p = DayPoint {
            day: 15,
            minute: 600,
        };
        assert_eq!(p.at(d).to_rfc3339(), "2024-03-15T10:00:00+00:00");
        assert!(p.within(15));
        assert!(!p.within(14));
        assert!(DayPoint { day: 16, minute: 0 }.within(15));
    }
}
