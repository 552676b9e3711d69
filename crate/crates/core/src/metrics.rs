//! Error statistics of residual series and ensemble envelopes.

use serde::{Deserialize, Serialize};

/// Bias, centred RMSE and MSE of one residual series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesMetrics {
    pub bias: f64,
    pub ubrmse: f64,
    pub mse: f64,
}

impl SeriesMetrics {
    /// `bias = mean(e)`, `ubrmse = std(e)` with the population normalization,
    /// `mse = mean(e²)`. An empty series gives NaN everywhere.
    pub fn from_residuals(e: &[f64]) -> Self {
        if e.is_empty() {
            return Self { bias: f64::NAN, ubrmse: f64::NAN, mse: f64::NAN };
        }
        let n = e.len() as f64;
        let bias = e.iter().sum::<f64>() / n;
        let ubrmse = (e.iter().map(|v| (v - bias).powi(2)).sum::<f64>() / n).sqrt();
        let mse = e.iter().map(|v| v * v).sum::<f64>() / n;
        Self { bias, ubrmse, mse }
    }

    /// `|mse − (bias² + ubrmse²)|`.
    pub fn decomposition_error(&self) -> f64 {
        (self.mse - (self.bias * self.bias + self.ubrmse * self.ubrmse)).abs()
    }
}

/// Streaming mean and population variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    n: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    pub fn std(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }
}

/// Percentile `q ∈ [0, 100]` of `values` with linear interpolation between
/// order statistics. NaN for an empty slice.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, q)
}

fn percentile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Pointwise ensemble spread of one state component over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub lower: Vec<f64>,
    pub median: Vec<f64>,
    pub upper: Vec<f64>,
}

pub const ENVELOPE_LOWER: f64 = 2.5;
pub const ENVELOPE_UPPER: f64 = 97.5;

impl Envelope {
    /// `series[member][t]` to the 2.5 / 50 / 97.5 percentiles at each `t`.
    pub fn from_members(series: &[Vec<f64>]) -> Self {
        let len = series.iter().map(Vec::len).min().unwrap_or(0);
        let mut env = Envelope {
            lower: Vec::with_capacity(len),
            median: Vec::with_capacity(len),
            upper: Vec::with_capacity(len),
        };
        let mut column = Vec::with_capacity(series.len());
        for t in 0..len {
            column.clear();
            column.extend(series.iter().map(|s| s[t]));
            column.sort_by(f64::total_cmp);
            env.lower.push(percentile_sorted(&column, ENVELOPE_LOWER));
            env.median.push(percentile_sorted(&column, 50.0));
            env.upper.push(percentile_sorted(&column, ENVELOPE_UPPER));
        }
        env
    }

    pub fn len(&self) -> usize {
        self.median.len()
    }

    pub fn is_empty(&self) -> bool {
        self.median.is_empty()
    }
}

/// Relative improvement of `value` over `baseline`, in percent.
pub fn reduction_percent(baseline: f64, value: f64) -> f64 {
    100.0 * (baseline - value) / baseline
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn simple_series() {
        let m = SeriesMetrics::from_residuals(&[1.0, 3.0]);
        assert_eq!(m.bias, 2.0);
        assert_eq!(m.ubrmse, 1.0);
        assert_eq!(m.mse, 5.0);
        assert!(SeriesMetrics::from_residuals(&[]).bias.is_nan());
    }

    #[test]
    fn percentiles() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert_eq!(percentile(&v, 50.0), 2.5);
        assert!((percentile(&v, 2.5) - 1.075).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 97.5), 7.0);
    }

    #[test]
    fn single_member_envelope_collapses() {
        let s = vec![vec![1.0, -2.0, 5.5]];
        let env = Envelope::from_members(&s);
        assert_eq!(env.lower, s[0]);
        assert_eq!(env.upper, s[0]);
        assert_eq!(env.median, s[0]);
    }

    #[test]
    fn running_matches_batch() {
        let e = [0.3, -1.2, 2.5, 0.0, 4.1];
        let mut r = RunningStats::default();
        e.iter().for_each(|&v| r.push(v));
        let m = SeriesMetrics::from_residuals(&e);
        assert!((r.mean() - m.bias).abs() < 1e-14);
        assert!((r.std() - m.ubrmse).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn mse_decomposes(e in prop::collection::vec(-50.0f64..50.0, 1..200)) {
            let m = SeriesMetrics::from_residuals(&e);
            prop_assert!(m.decomposition_error() <= 1e-9 * m.mse.max(1.0));
        }

        #[test]
        fn envelope_ordered(series in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 5), 1..30)) {
            let env = Envelope::from_members(&series);
            for t in 0..env.len() {
                prop_assert!(env.lower[t] <= env.median[t] && env.median[t] <= env.upper[t]);
            }
        }
    }
}
