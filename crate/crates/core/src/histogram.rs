//! Probability histograms on explicit one-dimensional support grids.
//!
//! A [`ProbabilityHistogram`] is a probability vector attached to a uniformly
//! spaced [`SupportGrid`]. Histograms are built from raw draws by
//! nearest-support-point binning and carry the CDF and quantile machinery used
//! by piecewise-linear CDF matching.
//!
//! The CDF used for matching treats each support point as the centre of a bin
//! of width `spacing` with mass spread uniformly inside the bin. This makes the
//! CDF continuous and strictly increasing wherever mass is present, so the
//! quantile function is its exact inverse on that set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance on the uniformity of grid spacing.
const SPACING_RTOL: f64 = 1e-12;
/// Absolute tolerance on the total mass of a histogram.
pub const MASS_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HistogramError {
    #[error("a support grid needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("grid bounds must satisfy lo < hi (lo = {lo}, hi = {hi})")]
    InvalidBounds { lo: f64, hi: f64 },
    #[error("grid points must be strictly increasing and uniformly spaced")]
    NonUniformGrid,
    #[error("expected {expected} masses, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("mass {index} is negative or not finite ({value})")]
    InvalidMass { index: usize, value: f64 },
    #[error("masses sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("cannot bin an empty sample")]
    EmptySample,
    #[error("sample value {0} is not finite")]
    NonFiniteSample(f64),
}

/// Uniformly spaced, strictly increasing support points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportGrid {
    points: Vec<f64>,
    spacing: f64,
}

impl SupportGrid {
    /// `k` uniformly spaced points from `lo` to `hi` inclusive.
    pub fn new(lo: f64, hi: f64, k: usize) -> Result<Self, HistogramError> {
        if k < 2 {
            return Err(HistogramError::TooFewPoints(k));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(HistogramError::InvalidBounds { lo, hi });
        }
        let spacing = (hi - lo) / (k - 1) as f64;
        let mut points: Vec<f64> = (0..k).map(|i| lo + spacing * i as f64).collect();
        points[k - 1] = hi;
        Ok(Self { points, spacing })
    }

    /// Wraps explicit points, checking that they are uniformly spaced.
    pub fn from_points(points: Vec<f64>) -> Result<Self, HistogramError> {
        let k = points.len();
        if k < 2 {
            return Err(HistogramError::TooFewPoints(k));
        }
        let spacing = (points[k - 1] - points[0]) / (k - 1) as f64;
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(HistogramError::NonUniformGrid);
        }
        let scale = points[0].abs().max(points[k - 1].abs()).max(spacing);
        let uniform = points.windows(2).all(|w| {
            let step = w[1] - w[0];
            step > 0.0 && (step - spacing).abs() <= SPACING_RTOL * scale.max(1.0) * k as f64
        });
        if !uniform {
            return Err(HistogramError::NonUniformGrid);
        }
        Ok(Self { points, spacing })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; a grid holds at least two points.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lo(&self) -> f64 {
        self.points[0]
    }

    pub fn hi(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Index of the support point closest to `value`, clamped to the grid.
    pub fn nearest_index(&self, value: f64) -> usize {
        let pos = ((value - self.lo()) / self.spacing).round();
        if pos <= 0.0 {
            0
        } else {
            (pos as usize).min(self.len() - 1)
        }
    }

    /// The same grid translated by `shift`.
    pub fn shifted(&self, shift: f64) -> Self {
        Self {
            points: self.points.iter().map(|x| x + shift).collect(),
            spacing: self.spacing,
        }
    }
}

/// Raw draws awaiting binning.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSample {
    values: Vec<f64>,
}

impl EmpiricalSample {
    pub fn new(values: Vec<f64>) -> Result<Self, HistogramError> {
        if values.is_empty() {
            return Err(HistogramError::EmptySample);
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(HistogramError::NonFiniteSample(bad));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Probability masses over a support grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityHistogram {
    grid: SupportGrid,
    masses: Vec<f64>,
}

impl ProbabilityHistogram {
    pub fn new(grid: SupportGrid, masses: Vec<f64>) -> Result<Self, HistogramError> {
        if masses.len() != grid.len() {
            return Err(HistogramError::LengthMismatch {
                expected: grid.len(),
                got: masses.len(),
            });
        }
        for (index, &value) in masses.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(HistogramError::InvalidMass { index, value });
            }
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(HistogramError::NotNormalized(total));
        }
        Ok(Self { grid, masses })
    }

    /// Rescales nonnegative weights to unit mass. Tiny negative values (solver
    /// round-off) are clipped to zero first.
    pub fn from_weights(grid: SupportGrid, weights: &[f64]) -> Result<Self, HistogramError> {
        if weights.len() != grid.len() {
            return Err(HistogramError::LengthMismatch {
                expected: grid.len(),
                got: weights.len(),
            });
        }
        let clipped: Vec<f64> = weights.iter().map(|&w| if w < 0.0 && w > -1e-9 { 0.0 } else { w }).collect();
        let total: f64 = clipped.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(HistogramError::NotNormalized(total));
        }
        Self::new(grid, clipped.iter().map(|w| w / total).collect())
    }

    /// All mass on the support point nearest to `value`.
    pub fn dirac(grid: SupportGrid, value: f64) -> Self {
        let mut masses = vec![0.0; grid.len()];
        masses[grid.nearest_index(value)] = 1.0;
        Self { grid, masses }
    }

    pub fn grid(&self) -> &SupportGrid {
        &self.grid
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Expected value `Σ x_i p_i`.
    pub fn mean(&self) -> f64 {
        self.grid
            .points()
            .iter()
            .zip(&self.masses)
            .map(|(x, p)| x * p)
            .sum()
    }

    /// Variance of the discrete distribution on the support points.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.grid
            .points()
            .iter()
            .zip(&self.masses)
            .map(|(x, p)| p * (x - mean) * (x - mean))
            .sum()
    }

    /// Running sums of the masses.
    pub fn cdf_values(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.masses
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect()
    }

    /// True when a single support point carries all the mass.
    pub fn is_degenerate(&self) -> bool {
        self.masses.iter().filter(|&&p| p > 0.0).count() <= 1
    }

    /// Piecewise-linear CDF with mass spread uniformly over each bin.
    pub fn cdf_at(&self, value: f64) -> f64 {
        let h = self.grid.spacing();
        let lo_edge = self.grid.lo() - 0.5 * h;
        if value <= lo_edge {
            return 0.0;
        }
        let pos = (value - lo_edge) / h;
        let bin = pos.floor() as usize;
        if bin >= self.len() {
            return 1.0;
        }
        let below: f64 = self.masses[..bin].iter().sum();
        (below + self.masses[bin] * (pos - bin as f64)).min(1.0)
    }

    /// Inverse of [`cdf_at`](Self::cdf_at) restricted to bins holding mass.
    pub fn quantile(&self, q: f64) -> f64 {
        let h = self.grid.spacing();
        let q = q.clamp(0.0, 1.0);
        let first = self.masses.iter().position(|&p| p > 0.0).unwrap_or(0);
        let last = self.masses.iter().rposition(|&p| p > 0.0).unwrap_or(self.len() - 1);
        let mut below = 0.0;
        for (i, &p) in self.masses.iter().enumerate() {
            if p > 0.0 && q <= below + p {
                let frac = ((q - below) / p).clamp(0.0, 1.0);
                return self.grid.points()[i] - 0.5 * h + frac * h;
            }
            below += p;
        }
        if q <= 0.0 {
            self.grid.points()[first] - 0.5 * h
        } else {
            self.grid.points()[last] + 0.5 * h
        }
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }
}

/// Nearest-support-point histogram of `sample`; values outside the grid fall
/// into the boundary bins.
pub fn bin_samples(
    sample: &EmpiricalSample,
    grid: &SupportGrid,
) -> Result<ProbabilityHistogram, HistogramError> {
    if sample.count() == 0 {
        return Err(HistogramError::EmptySample);
    }
    let mut counts = vec![0usize; grid.len()];
    for &v in sample.values() {
        counts[grid.nearest_index(v)] += 1;
    }
    let n = sample.count() as f64;
    let masses = counts.iter().map(|&c| c as f64 / n).collect();
    ProbabilityHistogram::new(grid.clone(), masses)
}

/// Maps `value` onto `reference` by equating CDFs: the reference quantile at
/// the source CDF of `value`.
///
/// Values at or beyond the source grid ends go to the matching reference grid
/// end. A degenerate source carries no shape information, so every value maps
/// to the reference median.
pub fn cdf_match(
    value: f64,
    source: &ProbabilityHistogram,
    reference: &ProbabilityHistogram,
) -> f64 {
    if source.is_degenerate() {
        return reference.median();
    }
    let (ref_lo, ref_hi) = (reference.grid().lo(), reference.grid().hi());
    if value <= source.grid().lo() {
        return ref_lo;
    }
    if value >= source.grid().hi() {
        return ref_hi;
    }
    reference
        .quantile(source.cdf_at(value))
        .clamp(ref_lo, ref_hi)
}
