//! Per-window running statistics and one-sided upper confidence limits.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::metering::DayWindow;

/// Critical values switch from Student's t to the normal quantile above this
/// sample count.
pub const LARGE_SAMPLE: u64 = 30;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("window {window}: need at least 2 samples, have {n}")]
    InsufficientSamples { window: DayWindow, n: u64 },
    #[error("unsupported significance level {0}")]
    UnsupportedAlpha(f64),
}

/// Significance level of the upper confidence limit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Significance {
    #[default]
    Alpha05,
    Alpha01,
}

impl Significance {
    pub fn value(self) -> f64 {
        match self {
            Significance::Alpha05 => 0.05,
            Significance::Alpha01 => 0.01,
        }
    }

    pub fn from_value(alpha: f64) -> Result<Self, StatsError> {
        if (alpha - 0.05).abs() < 1e-12 {
            Ok(Significance::Alpha05)
        } else if (alpha - 0.01).abs() < 1e-12 {
            Ok(Significance::Alpha01)
        } else {
            Err(StatsError::UnsupportedAlpha(alpha))
        }
    }
}

impl Serialize for Significance {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Significance {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Significance::from_value(v).map_err(serde::de::Error::custom)
    }
}

/// Running mean and spread of one window's daily consumption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "StatsRepr", try_from = "StatsRepr")]
pub struct WindowStats {
    pub window: DayWindow,
    n: u64,
    mean: f64,
    m2: f64,
    pub alpha: Significance,
}

#[derive(Serialize, Deserialize)]
struct StatsRepr {
    window: DayWindow,
    n: u64,
    mean: f64,
    std: f64,
    m2: f64,
    alpha: Significance,
}

impl From<WindowStats> for StatsRepr {
    fn from(s: WindowStats) -> Self {
        StatsRepr {
            window: s.window,
            n: s.n,
            mean: s.mean,
            std: s.std(),
            m2: s.m2,
            alpha: s.alpha,
        }
    }
}

impl TryFrom<StatsRepr> for WindowStats {
    type Error = String;

    fn try_from(r: StatsRepr) -> Result<Self, Self::Error> {
        if !(r.mean.is_finite() && r.m2.is_finite() && r.m2 >= 0.0) {
            return Err("window statistics must be finite with non-negative m2".into());
        }
        Ok(WindowStats {
            window: r.window,
            n: r.n,
            mean: r.mean,
            m2: r.m2,
            alpha: r.alpha,
        })
    }
}

impl WindowStats {
    pub fn new(window: DayWindow, alpha: Significance) -> Self {
        Self {
            window,
            n: 0,
            mean: 0.0,
            m2: 0.0,
            alpha,
        }
    }

    pub fn from_samples(window: DayWindow, alpha: Significance, xs: &[f64]) -> Self {
        xs.iter()
            .fold(Self::new(window, alpha), |s, &x| update_stats(&s, x))
    }

    /// Build from summary moments (`std` with the n - 1 denominator).
    pub fn from_moments(
        window: DayWindow,
        alpha: Significance,
        n: u64,
        mean: f64,
        std: f64,
    ) -> Self {
        let m2 = if n < 2 {
            0.0
        } else {
            std * std * (n - 1) as f64
        };
        Self {
            window,
            n,
            mean,
            m2,
            alpha,
        }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation (n - 1 denominator); 0 below two samples.
    pub fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).sqrt()
        }
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
        if self.m2 < 0.0 {
            self.m2 = 0.0;
        }
    }
}

/// Welford update returning the new state.
pub fn update_stats(stats: &WindowStats, x: f64) -> WindowStats {
    let mut next = stats.clone();
    next.push(x);
    next
}

/// Tabulated quantiles for the one-sided confidence limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalValueTable {
    /// `t_{0.95}` for df = 1..=30.
    pub t95: Vec<f64>,
    /// `t_{0.99}` for df = 1..=30.
    pub t99: Vec<f64>,
    pub z95: f64,
    pub z99: f64,
}

const T95: [f64; 30] = [
    6.314, 2.920, 2.353, 2.132, 2.015, 1.943, 1.895, 1.860, 1.833, 1.812, 1.796, 1.782, 1.771,
    1.761, 1.753, 1.746, 1.740, 1.734, 1.729, 1.725, 1.721, 1.717, 1.714, 1.711, 1.708, 1.706,
    1.703, 1.701, 1.699, 1.697,
];

#[allow(clippy::approx_constant)] // df = 11 happens to read 2.718.
const T99: [f64; 30] = [
    31.821, 6.965, 4.541, 3.747, 3.365, 3.143, 2.998, 2.896, 2.821, 2.764, 2.718, 2.681, 2.650,
    2.624, 2.602, 2.583, 2.567, 2.552, 2.539, 2.528, 2.518, 2.508, 2.500, 2.492, 2.485, 2.479,
    2.473, 2.467, 2.462, 2.457,
];

impl CriticalValueTable {
    pub fn standard() -> Self {
        Self {
            t95: T95.to_vec(),
            t99: T99.to_vec(),
            z95: 1.645,
            z99: 2.326,
        }
    }

    /// Quantile for `n` samples at `alpha`.
    pub fn quantile(&self, n: u64, alpha: Significance) -> Option<f64> {
        if n < 2 {
            return None;
        }
        if n > LARGE_SAMPLE {
            return Some(match alpha {
                Significance::Alpha05 => self.z95,
                Significance::Alpha01 => self.z99,
            });
        }
        let df = (n - 1) as usize;
        let col = match alpha {
            Significance::Alpha05 => &self.t95,
            Significance::Alpha01 => &self.t99,
        };
        col.get(df - 1).copied()
    }
}

impl Default for CriticalValueTable {
    fn default() -> Self {
        Self::standard()
    }
}

/// Upper confidence limit of the window mean:
/// `K = mean + q * std / sqrt(n)`.
pub fn critical_value(stats: &WindowStats, table: &CriticalValueTable) -> Result<f64, StatsError> {
    let q = table
        .quantile(stats.n, stats.alpha)
        .ok_or(StatsError::InsufficientSamples {
            window: stats.window,
            n: stats.n,
        })?;
    Ok(stats.mean + q * stats.std() / (stats.n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w() -> DayWindow {
        DayWindow::new(360, 30).unwrap()
    }

    #[test]
    fn k_for_small_sample() {
        let s =
            WindowStats::from_samples(w(), Significance::Alpha05, &[10.0, 12.0, 11.0, 13.0, 9.0]);
        let k = critical_value(&s, &CriticalValueTable::standard()).unwrap();
        // mean 11, sd sqrt(2.5), t(4) = 2.132
        let expected = 11.0 + 2.132 * 2.5f64.sqrt() / 5f64.sqrt();
        assert!((k - expected).abs() < 1e-9);
        assert!((k - 12.5076).abs() < 1e-3);
    }

    #[test]
    fn k_for_large_sample_uses_z() {
        let xs: Vec<f64> = (0..40)
            .map(|i| if i % 2 == 0 { 9.0 } else { 11.0 })
            .collect();
        let s = WindowStats::from_samples(w(), Significance::Alpha05, &xs);
        let k = critical_value(&s, &CriticalValueTable::standard()).unwrap();
        let sd = (40.0f64 / 39.0).sqrt();
        assert!((k - (10.0 + 1.645 * sd / 40f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn k_table_points() {
        let t = CriticalValueTable::standard();
        let s = WindowStats::from_moments(w(), Significance::Alpha05, 4, 10.0, 2.0);
        assert!((critical_value(&s, &t).unwrap() - 12.353).abs() < 1e-9);
        let s = WindowStats::from_moments(w(), Significance::Alpha05, 100, 10.0, 2.0);
        assert!((critical_value(&s, &t).unwrap() - 10.329).abs() < 1e-9);
        let s = WindowStats::from_moments(w(), Significance::Alpha05, 9, 7.5, 0.0);
        assert_eq!(critical_value(&s, &t).unwrap(), 7.5);
    }

    #[test]
    fn table_matches_student_t() {
        use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
        let t = CriticalValueTable::standard();
        for df in 1..=30u64 {
            let d = StudentsT::new(0.0, 1.0, df as f64).unwrap();
            assert!(
                (t.t95[df as usize - 1] - d.inverse_cdf(0.95)).abs() < 5e-4,
                "df {df}"
            );
            assert!(
                (t.t99[df as usize - 1] - d.inverse_cdf(0.99)).abs() < 5e-4,
                "df {df}"
            );
        }
        let z = Normal::standard();
        assert!((t.z95 - z.inverse_cdf(0.95)).abs() < 5e-4);
        assert!((t.z99 - z.inverse_cdf(0.99)).abs() < 5e-4);
    }

    #[test]
    fn welford_small_cases() {
        let s = update_stats(&WindowStats::new(w(), Significance::Alpha05), 10.0);
        assert_eq!((s.n(), s.mean(), s.std()), (1, 10.0, 0.0));
        let s = update_stats(&s, 14.0);
        assert_eq!(s.mean(), 12.0);
        assert!((s.std() - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn k_needs_two_samples() {
        let s = WindowStats::from_samples(w(), Significance::Alpha05, &[5.0]);
        assert!(matches!(
            critical_value(&s, &CriticalValueTable::standard()),
            Err(StatsError::InsufficientSamples { n: 1, .. })
        ));
    }

    #[test]
    fn serde_round_trip_is_exact() {
        let s = WindowStats::from_samples(w(), Significance::Alpha01, &[1.1, 2.7, 3.3, 0.4]);
        let a = serde_json::to_string(&s).unwrap();
        let back: WindowStats = serde_json::from_str(&a).unwrap();
        assert_eq!(back, s);
        assert_eq!(serde_json::to_string(&back).unwrap(), a);
        assert!(a.contains("\"alpha\":0.01"));
    }

    proptest! {
        #[test]
        fn k_not_below_mean(xs in prop::collection::vec(0.0f64..100.0, 2..60)) {
            let s = WindowStats::from_samples(w(), Significance::Alpha05, &xs);
            let k = critical_value(&s, &CriticalValueTable::standard()).unwrap();
            prop_assert!(k >= s.mean() - 1e-12);
        }

        #[test]
        fn incremental_matches_batch(xs in prop::collection::vec(0.0f64..500.0, 2..80)) {
            let s = WindowStats::from_samples(w(), Significance::Alpha05, &xs);
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            prop_assert!((s.mean() - mean).abs() < 1e-9);
            prop_assert!((s.std() - var.sqrt()).abs() < 1e-9);
        }

        #[test]
        fn permutation_invariant(xs in prop::collection::vec(0.0f64..100.0, 2..40).prop_shuffle()) {
            let mut sorted = xs.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let t = CriticalValueTable::standard();
            let a = critical_value(&WindowStats::from_samples(w(), Significance::Alpha05, &xs), &t).unwrap();
            let b = critical_value(&WindowStats::from_samples(w(), Significance::Alpha05, &sorted), &t).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn k_grows_with_spread(mean in 0.0f64..50.0, sd in 0.1f64..10.0, extra in 0.1f64..5.0, n in 2usize..30) {
            // Symmetric samples so that mean and std are controlled exactly.
            let build = |spread: f64| -> Vec<f64> {
                (0..n).map(|i| mean + if i % 2 == 0 { spread } else { -spread }).collect()
            };
            let t = CriticalValueTable::standard();
            let lo = critical_value(&WindowStats::from_samples(w(), Significance::Alpha05, &build(sd)), &t).unwrap();
            let hi = critical_value(&WindowStats::from_samples(w(), Significance::Alpha05, &build(sd + extra)), &t).unwrap();
            prop_assert!(hi >= lo - 1e-12);
            let a01 = critical_value(&WindowStats::from_samples(w(), Significance::Alpha01, &build(sd)), &t).unwrap();
            prop_assert!(a01 >= lo - 1e-12);
        }

        #[test]
        fn k_shrinks_with_n(mean in 0.0f64..100.0, std in 0.0f64..20.0, n in 2u64..120) {
            let t = CriticalValueTable::standard();
            let a = critical_value(&WindowStats::from_moments(w(), Significance::Alpha05, n, mean, std), &t).unwrap();
            let b = critical_value(&WindowStats::from_moments(w(), Significance::Alpha05, n + 1, mean, std), &t).unwrap();
            prop_assert!(b <= a + 1e-12);
        }

        #[test]
        fn t_to_z_switch_is_small(mean in 0.5f64..500.0, ratio in 0.0f64..1.0, n in 31u64..200) {
            let t = CriticalValueTable::standard();
            let std = ratio * mean;
            let with_z = critical_value(&WindowStats::from_moments(w(), Significance::Alpha05, n, mean, std), &t).unwrap();
            let with_t = mean + t.t95[29] * std / (n as f64).sqrt();
            prop_assert!((with_t - with_z).abs() / with_z < 0.02);
        }
    }
}
