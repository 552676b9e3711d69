//! Twin-experiment harness: truth generation, cycling assimilation for an
//! ensemble of independent members, reference histograms, metrics and sweeps.
//!
//! Every member owns named random streams (model noise, observation noise,
//! reference samples, initial perturbation, climatology) derived from the
//! master seed, so different schemes run on the same member see identical
//! noise realizations.

use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assimilate::{
    cdf_match_then_3dvar, three_d_var, wm_vda, AnalysisInput, AssimilateError,
    GaussianErrorSpec, WmVdaProblem,
};
use crate::dynamics::{
    stream_rng, DynamicsError, DynamicsModel, LinearModel, Lorenz63Model, Stream,
};
use crate::histogram::{
    bin_samples, EmpiricalSample, HistogramError, ProbabilityHistogram, SupportGrid,
};
use crate::metrics::{reduction_percent, Envelope, RunningStats, SeriesMetrics};
use crate::parallel::{map_indexed, Execution};
use crate::transport::wasserstein;

/// Master seed used by the presets.
pub const DEFAULT_SEED: u64 = 20_200_527;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Histogram(#[from] HistogramError),
    #[error("member {member}, cycle {cycle}{}: {source}", dim.map(|d| format!(", dimension {d}")).unwrap_or_default())]
    Analysis {
        member: usize,
        cycle: usize,
        dim: Option<usize>,
        source: AssimilateError,
    },
    #[error("all {failures} members failed; first failure: {first}")]
    AllMembersFailed { failures: usize, first: String },
}

impl ExperimentError {
    /// True when the failure came from an analysis solve rather than from
    /// the configuration.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, ExperimentError::Analysis { .. } | ExperimentError::AllMembersFailed { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Linear,
    Lorenz63,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Fresh samples around the truth at every analysis time.
    PerCycle,
    /// One pooled histogram per dimension from the pre-window truth.
    Climatological,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "3dvar")]
    ThreeDVar,
    #[serde(rename = "wmvda")]
    WmVda,
    #[serde(rename = "cdf_match")]
    CdfMatch,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::ThreeDVar => "3dvar",
            Scheme::WmVda => "wmvda",
            Scheme::CdfMatch => "cdf_match",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "3dvar" => Ok(Scheme::ThreeDVar),
            "wmvda" => Ok(Scheme::WmVda),
            "cdf_match" => Ok(Scheme::CdfMatch),
            other => Err(format!("unknown scheme `{other}` (expected 3dvar, wmvda or cdf_match)")),
        }
    }
}

/// Additive Gaussian error with the same bias and variance per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub bias: f64,
    pub variance: f64,
}

impl NoiseSpec {
    pub const fn new(bias: f64, variance: f64) -> Self {
        Self { bias, variance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub kind: SystemKind,
    pub dt: f64,
    /// Model steps in the assimilation window.
    pub steps: usize,
    /// Truth steps integrated before the window (Lorenz only).
    pub spin_up: usize,
    pub x0: Vec<f64>,
    /// Scalar transition coefficient of the linear model, `M = m·I`.
    pub transition: f64,
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub model: NoiseSpec,
    pub observation: NoiseSpec,
    /// `B = b·I` used by the analysis.
    pub background_variance: f64,
    /// `R = r·I` used by the analysis.
    pub observation_variance: f64,
    /// Variance of the zero-mean perturbation of each member's initial state.
    pub initial_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub mode: ReferenceMode,
    /// Draws per analysis time in per-cycle mode.
    pub samples: usize,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub points: usize,
    /// Per-cycle grids span the truth ± `half_width` reference deviations.
    pub half_width: f64,
    /// Climatological grids extend the pooled range by this fraction on each side.
    pub padding: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    /// One value for every dimension, or one per dimension.
    pub lambda: Vec<f64>,
    /// Model steps between analyses.
    pub interval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub intervals: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub noise: NoiseConfig,
    pub reference: ReferenceConfig,
    pub grid: GridConfig,
    pub scheme: SchemeConfig,
    pub sweep: SweepConfig,
    pub ensemble_size: usize,
    pub seed: u64,
    /// Leading fraction of the window left out of the metrics.
    pub metric_spin_up: f64,
}

fn lorenz_system(steps: usize) -> SystemConfig {
    SystemConfig {
        kind: SystemKind::Lorenz63,
        dt: 0.01,
        steps,
        spin_up: 5000,
        x0: vec![3.0, -3.0, 12.0],
        transition: 0.97,
        sigma: 10.0,
        rho: 28.0,
        beta: 8.0 / 3.0,
    }
}

impl ExperimentConfig {
    /// Scalar linear system, λ = 5, observations every third step.
    pub fn linear() -> Self {
        let b = 1.5;
        Self {
            system: SystemConfig {
                kind: SystemKind::Linear,
                dt: 0.01,
                steps: 300,
                spin_up: 0,
                x0: vec![10.0],
                transition: 0.97,
                sigma: 10.0,
                rho: 28.0,
                beta: 8.0 / 3.0,
            },
            noise: NoiseConfig {
                model: NoiseSpec::new(0.5, b),
                observation: NoiseSpec::new(0.25, 0.75),
                background_variance: b,
                observation_variance: 0.75,
                initial_variance: 0.0,
            },
            reference: ReferenceConfig { mode: ReferenceMode::PerCycle, samples: 500, variance: 3.0 * b },
            grid: GridConfig { points: 50, half_width: 6.0, padding: 0.1 },
            scheme: SchemeConfig { lambda: vec![5.0], interval: 3 },
            sweep: SweepConfig { lambdas: vec![0.1, 5.0, 50.0, 1000.0], intervals: vec![2, 5, 10, 20] },
            ensemble_size: 50,
            seed: DEFAULT_SEED,
            metric_spin_up: 0.1,
        }
    }

    /// Lorenz-63 with a per-cycle reference around the truth, λ = 3.
    pub fn lorenz_setup1() -> Self {
        let b = 5f64.sqrt();
        Self {
            system: lorenz_system(2000),
            noise: NoiseConfig {
                model: NoiseSpec::new(0.25, b),
                observation: NoiseSpec::new(0.15, 2.0),
                background_variance: b,
                observation_variance: 2.0,
                initial_variance: 3f64.sqrt() * b,
            },
            reference: ReferenceConfig {
                mode: ReferenceMode::PerCycle,
                samples: 500,
                variance: 3f64.sqrt() * b,
            },
            grid: GridConfig { points: 50, half_width: 6.0, padding: 0.1 },
            scheme: SchemeConfig { lambda: vec![3.0], interval: 10 },
            sweep: SweepConfig { lambdas: vec![0.1, 1.0, 3.0, 10.0], intervals: vec![2, 5, 10, 20] },
            ensemble_size: 50,
            seed: DEFAULT_SEED,
            metric_spin_up: 0.1,
        }
    }

    /// Lorenz-63 with a climatological reference pooled over the spin-up.
    pub fn lorenz_setup2() -> Self {
        let mut c = Self::lorenz_setup1();
        c.reference.mode = ReferenceMode::Climatological;
        c.scheme.lambda = vec![0.02, 0.08, 0.07];
        c.sweep.lambdas = vec![0.01, 0.02, 0.05, 0.1];
        c
    }

    pub fn dim(&self) -> usize {
        self.system.x0.len()
    }

    pub fn lambda_for(&self, d: usize) -> f64 {
        if self.scheme.lambda.len() == 1 {
            self.scheme.lambda[0]
        } else {
            self.scheme.lambda[d]
        }
    }

    pub fn lambdas(&self) -> Vec<f64> {
        (0..self.dim()).map(|d| self.lambda_for(d)).collect()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |msg: String| Err(ExperimentError::Config(msg));
        let s = &self.system;
        if s.x0.is_empty() || s.x0.iter().any(|v| !v.is_finite()) {
            return fail("system.x0 must be a nonempty list of finite numbers".into());
        }
        if s.kind == SystemKind::Lorenz63 && s.x0.len() != 3 {
            return fail(format!("system.x0 must have 3 components for lorenz63, got {}", s.x0.len()));
        }
        if !(s.dt.is_finite() && s.dt > 0.0) {
            return fail(format!("system.dt must be positive, got {}", s.dt));
        }
        if s.steps == 0 {
            return fail("system.steps must be at least 1".into());
        }
        if ![s.transition, s.sigma, s.rho, s.beta].iter().all(|v| v.is_finite()) {
            return fail("system parameters must be finite".into());
        }
        if self.ensemble_size == 0 {
            return fail("ensemble_size must be at least 1".into());
        }
        if self.scheme.interval == 0 {
            return fail("scheme.interval must be at least 1".into());
        }
        let n = self.dim();
        if self.scheme.lambda.len() != 1 && self.scheme.lambda.len() != n {
            return fail(format!(
                "scheme.lambda needs 1 or {n} values, got {}",
                self.scheme.lambda.len()
            ));
        }
        for (name, v) in self
            .scheme
            .lambda
            .iter()
            .map(|v| ("scheme.lambda", *v))
            .chain(self.sweep.lambdas.iter().map(|v| ("sweep.lambdas", *v)))
        {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if self.sweep.intervals.contains(&0) {
            return fail("sweep.intervals must all be at least 1".into());
        }
        let e = &self.noise;
        for (name, v) in [
            ("noise.model.variance", e.model.variance),
            ("noise.observation.variance", e.observation.variance),
            ("noise.initial_variance", e.initial_variance),
            ("reference.variance", self.reference.variance),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        for (name, v) in [
            ("noise.background_variance", e.background_variance),
            ("noise.observation_variance", e.observation_variance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !e.model.bias.is_finite() || !e.observation.bias.is_finite() {
            return fail("noise biases must be finite".into());
        }
        if self.reference.samples == 0 {
            return fail("reference.samples must be at least 1".into());
        }
        if self.grid.points < 2 {
            return fail(format!("grid.points must be at least 2, got {}", self.grid.points));
        }
        if !(self.grid.half_width.is_finite() && self.grid.half_width > 0.0) {
            return fail("grid.half_width must be positive".into());
        }
        if !(self.grid.padding.is_finite() && self.grid.padding >= 0.0) {
            return fail("grid.padding must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.metric_spin_up) {
            return fail(format!("metric_spin_up must lie in [0, 1), got {}", self.metric_spin_up));
        }
        if self.reference.mode == ReferenceMode::Climatological && s.spin_up == 0 {
            return fail("a climatological reference needs system.spin_up > 0".into());
        }
        Ok(())
    }
}

/// Additive error draw; a zero variance leaves only the bias.
#[derive(Debug, Clone)]
struct Noise {
    bias: DVector<f64>,
    spec: Option<GaussianErrorSpec>,
}

impl Noise {
    fn new(spec: NoiseSpec, dim: usize) -> Result<Self, ExperimentError> {
        let gaussian = if spec.variance > 0.0 {
            Some(
                GaussianErrorSpec::isotropic(spec.bias, spec.variance, dim)
                    .map_err(|e| ExperimentError::Config(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self { bias: DVector::from_element(dim, spec.bias), spec: gaussian })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match &self.spec {
            Some(s) => s.sample(rng),
            None => self.bias.clone(),
        }
    }
}

/// Model, truth and noise shared by every member of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    config: ExperimentConfig,
    model: DynamicsModel,
    truth: Vec<DVector<f64>>,
    climatology_truth: Vec<DVector<f64>>,
    model_noise: Noise,
    obs_noise: Noise,
}

impl ExperimentSetup {
    pub fn new(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        config.validate()?;
        let s = &config.system;
        let n = config.dim();
        let model = match s.kind {
            SystemKind::Linear => DynamicsModel::Linear(LinearModel::new(
                DMatrix::from_diagonal_element(n, n, s.transition),
                s.dt,
            )?),
            SystemKind::Lorenz63 => {
                DynamicsModel::Lorenz63(Lorenz63Model::new(s.sigma, s.rho, s.beta, s.dt)?)
            }
        };
        let x0 = DVector::from_column_slice(&s.x0);
        let climatology_truth = deterministic_run(&model, x0.clone(), s.spin_up)?;
        let start = climatology_truth.last().cloned().unwrap_or(x0);
        let truth = deterministic_run(&model, start, s.steps)?;
        let model_noise = Noise::new(config.noise.model, n)?;
        let obs_noise = Noise::new(config.noise.observation, n)?;
        Ok(Self { config, model, truth, climatology_truth, model_noise, obs_noise })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &DynamicsModel {
        &self.model
    }

    /// Truth over the window: `steps + 1` states, the first at the window start.
    pub fn truth(&self) -> &[DVector<f64>] {
        &self.truth
    }

    /// Truth from `x0` to the window start (`spin_up + 1` states).
    pub fn climatology_truth(&self) -> &[DVector<f64>] {
        &self.climatology_truth
    }

    /// First step counted by the metrics.
    pub fn metric_start(&self) -> usize {
        let s = self.config.system.steps;
        ((self.config.metric_spin_up * s as f64).floor() as usize + 1).min(s)
    }
}

fn deterministic_run(
    model: &DynamicsModel,
    x0: DVector<f64>,
    steps: usize,
) -> Result<Vec<DVector<f64>>, ExperimentError> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x0);
    for step in 1..=steps {
        let next = model.propagate(&out[step - 1]).map_err(|e| match e {
            DynamicsError::BlowUp { .. } => DynamicsError::BlowUp { step },
            other => other,
        })?;
        out.push(next);
    }
    Ok(out)
}

/// `n_samples` draws from `N(truth, variance)` binned on `grid`. A zero
/// variance gives a Dirac at the truth's bin.
pub fn build_reference_setup1<R: Rng + ?Sized>(
    truth: f64,
    variance: f64,
    n_samples: usize,
    grid: &SupportGrid,
    rng: &mut R,
) -> Result<ProbabilityHistogram, HistogramError> {
    let sd = variance.max(0.0).sqrt();
    let values = (0..n_samples)
        .map(|_| truth + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    bin_samples(&EmpiricalSample::new(values)?, grid)
}

/// Every state of `truth` plus `N(0, variance)` noise, pooled per dimension.
pub fn pooled_reference_samples<R: Rng + ?Sized>(
    truth: &[DVector<f64>],
    variance: f64,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let n = truth.first().map_or(0, |x| x.len());
    let sd = variance.max(0.0).sqrt();
    let mut pooled = vec![Vec::with_capacity(truth.len()); n];
    for x in truth {
        for (d, p) in pooled.iter_mut().enumerate() {
            p.push(x[d] + sd * rng.sample::<f64, _>(StandardNormal));
        }
    }
    pooled
}

/// Uniform grid over the combined range of `samples`, widened by `padding`
/// times the range on each side. A zero range is widened to one unit.
pub fn spanning_grid(
    samples: &[&[f64]],
    points: usize,
    padding: f64,
) -> Result<SupportGrid, HistogramError> {
    let (lo, hi) = samples
        .iter()
        .flat_map(|s| s.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(HistogramError::EmptySample);
    }
    let pad = padding * (hi - lo);
    let (lo, hi) = if hi - lo < 1e-12 * lo.abs().max(1.0) {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo - pad, hi + pad)
    };
    SupportGrid::new(lo, hi, points)
}

/// Climatological reference: the pooled noisy truth binned per dimension on
/// `grids`.
pub fn build_reference_setup2<R: Rng + ?Sized>(
    truth: &[DVector<f64>],
    variance: f64,
    grids: &[SupportGrid],
    rng: &mut R,
) -> Result<Vec<ProbabilityHistogram>, HistogramError> {
    pooled_reference_samples(truth, variance, rng)
        .into_iter()
        .zip(grids)
        .map(|(values, grid)| bin_samples(&EmpiricalSample::new(values)?, grid))
        .collect()
}

/// Grid for one per-cycle analysis: the truth ± `half_width·sd`, stretched to
/// contain the background and the observation.
pub fn cycle_grid(
    truth: f64,
    x_b: f64,
    y: f64,
    sd: f64,
    half_width: f64,
    points: usize,
) -> Result<SupportGrid, HistogramError> {
    let mut lo = (truth - half_width * sd).min(x_b).min(y);
    let mut hi = (truth + half_width * sd).max(x_b).max(y);
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    SupportGrid::new(lo, hi, points)
}

/// Per-dimension histograms over the pre-window period for one member.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    pub grids: Vec<SupportGrid>,
    pub reference: Vec<ProbabilityHistogram>,
    /// Free noisy model run from `x0`.
    pub model: Vec<ProbabilityHistogram>,
    /// Observations of the truth at the assimilation interval.
    pub observation: Vec<ProbabilityHistogram>,
}

/// Draws, in order, the reference noise, the free model run and the
/// observations from the member's climatology stream, then bins all three on
/// one grid per dimension spanning their union.
pub fn build_climatology(
    setup: &ExperimentSetup,
    member: usize,
) -> Result<Climatology, ExperimentError> {
    let cfg = &setup.config;
    let mut rng = stream_rng(cfg.seed, member as u64, Stream::Climatology);
    let truth = &setup.climatology_truth;
    let n = cfg.dim();
    let reference = pooled_reference_samples(truth, cfg.reference.variance, &mut rng);

    let mut model = vec![Vec::with_capacity(truth.len()); n];
    let mut x = truth[0].clone();
    for d in 0..n {
        model[d].push(x[d]);
    }
    for step in 1..truth.len() {
        x = setup.model.propagate(&x).map_err(|e| match e {
            DynamicsError::BlowUp { .. } => DynamicsError::BlowUp { step },
            other => other,
        })? + setup.model_noise.draw(&mut rng);
        for d in 0..n {
            model[d].push(x[d]);
        }
    }

    let mut observation = vec![Vec::new(); n];
    for xt in truth.iter().step_by(cfg.scheme.interval).skip(1) {
        let y = xt + setup.obs_noise.draw(&mut rng);
        for d in 0..n {
            observation[d].push(y[d]);
        }
    }

    let mut out = Climatology {
        grids: Vec::with_capacity(n),
        reference: Vec::with_capacity(n),
        model: Vec::with_capacity(n),
        observation: Vec::with_capacity(n),
    };
    for d in 0..n {
        let grid = spanning_grid(
            &[&reference[d], &model[d], &observation[d]],
            cfg.grid.points,
            cfg.grid.padding,
        )?;
        let bin = |v: &[f64]| bin_samples(&EmpiricalSample::new(v.to_vec())?, &grid);
        out.reference.push(bin(&reference[d])?);
        out.model.push(bin(&model[d])?);
        out.observation.push(if observation[d].is_empty() {
            ProbabilityHistogram::dirac(grid.clone(), truth[0][d])
        } else {
            bin(&observation[d])?
        });
        out.grids.push(grid);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct MemberStreams {
    model: ChaCha8Rng,
    obs: ChaCha8Rng,
    reference: ChaCha8Rng,
}

/// Cycling state of one member.
#[derive(Debug, Clone)]
pub struct MemberState {
    pub member: usize,
    pub x: DVector<f64>,
    /// Model steps completed in the window.
    pub step: usize,
    /// Analyses performed.
    pub cycle: usize,
    streams: MemberStreams,
    climatology: Option<Climatology>,
}

impl MemberState {
    /// Starts `member` at the window's initial truth plus its initial
    /// perturbation.
    pub fn new(
        setup: &ExperimentSetup,
        member: usize,
        scheme: Scheme,
    ) -> Result<Self, ExperimentError> {
        let cfg = &setup.config;
        let seed = cfg.seed;
        let id = member as u64;
        let mut x = setup.truth[0].clone();
        if cfg.noise.initial_variance > 0.0 {
            let mut rng = stream_rng(seed, id, Stream::InitialPerturbation);
            let sd = cfg.noise.initial_variance.sqrt();
            for v in x.iter_mut() {
                *v += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let needs_climatology = scheme == Scheme::CdfMatch
            || (scheme == Scheme::WmVda && cfg.reference.mode == ReferenceMode::Climatological);
        let climatology = if needs_climatology {
            if cfg.system.spin_up == 0 {
                return Err(ExperimentError::Config(format!(
                    "scheme {scheme} needs a climatology period (system.spin_up > 0)"
                )));
            }
            Some(build_climatology(setup, member)?)
        } else {
            None
        };
        Ok(Self {
            member,
            x,
            step: 0,
            cycle: 0,
            streams: MemberStreams {
                model: stream_rng(seed, id, Stream::ModelNoise),
                obs: stream_rng(seed, id, Stream::ObsNoise),
                reference: stream_rng(seed, id, Stream::ReferenceSamples),
            },
            climatology,
        })
    }

    pub fn climatology(&self) -> Option<&Climatology> {
        self.climatology.as_ref()
    }
}

/// Analysis and reference histograms of one dimension at one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleHistograms {
    pub analysis: ProbabilityHistogram,
    pub reference: ProbabilityHistogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisRecord {
    pub cycle: usize,
    pub step: usize,
    pub truth: DVector<f64>,
    pub x_b: DVector<f64>,
    pub y: DVector<f64>,
    pub x_a: DVector<f64>,
    pub histograms: Option<Vec<CycleHistograms>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutput {
    /// States after each model step of the cycle; the last one is the analysis
    /// when an analysis took place.
    pub states: Vec<DVector<f64>>,
    pub analysis: Option<AnalysisRecord>,
}

/// Propagates `state` to the next observation time, analyses there and
/// restarts the model from `x_a`. Near the end of the window, where no
/// further observation falls, the model only runs forward. Returns `None`
/// once the window is exhausted.
pub fn run_cycle(
    setup: &ExperimentSetup,
    scheme: Scheme,
    lambda: &[f64],
    state: &mut MemberState,
) -> Result<Option<CycleOutput>, ExperimentError> {
    let cfg = &setup.config;
    let steps = cfg.system.steps;
    if state.step >= steps {
        return Ok(None);
    }
    let interval = cfg.scheme.interval;
    let end = (state.step + interval).min(steps);
    let mut states = Vec::with_capacity(end - state.step);
    for step in state.step + 1..=end {
        let next = setup.model.propagate(&state.x).map_err(|e| match e {
            DynamicsError::BlowUp { .. } => DynamicsError::BlowUp { step },
            other => other,
        })?;
        state.x = next + setup.model_noise.draw(&mut state.streams.model);
        if state.x.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::BlowUp { step }.into());
        }
        states.push(state.x.clone());
    }
    state.step = end;
    if !end.is_multiple_of(interval) {
        return Ok(Some(CycleOutput { states, analysis: None }));
    }

    let truth = setup.truth[end].clone();
    let y = &truth + setup.obs_noise.draw(&mut state.streams.obs);
    let x_b = state.x.clone();
    let cycle = state.cycle;
    let (x_a, histograms) = analyse(setup, scheme, lambda, &truth, &x_b, &y, state)?;
    state.x = x_a.clone();
    state.cycle += 1;
    if let Some(last) = states.last_mut() {
        *last = x_a.clone();
    }
    Ok(Some(CycleOutput {
        states,
        analysis: Some(AnalysisRecord { cycle, step: end, truth, x_b, y, x_a, histograms }),
    }))
}

fn analyse(
    setup: &ExperimentSetup,
    scheme: Scheme,
    lambda: &[f64],
    truth: &DVector<f64>,
    x_b: &DVector<f64>,
    y: &DVector<f64>,
    state: &mut MemberState,
) -> Result<(DVector<f64>, Option<Vec<CycleHistograms>>), ExperimentError> {
    let cfg = &setup.config;
    let n = cfg.dim();
    let (b, r) = (cfg.noise.background_variance, cfg.noise.observation_variance);
    let tag = |dim: Option<usize>| {
        let (member, cycle) = (state.member, state.cycle);
        move |source: AssimilateError| ExperimentError::Analysis { member, cycle, dim, source }
    };
    match scheme {
        Scheme::ThreeDVar => {
            let input = AnalysisInput::new(
                x_b.clone(),
                y.clone(),
                DMatrix::identity(n, n),
                DMatrix::from_diagonal_element(n, n, b),
                DMatrix::from_diagonal_element(n, n, r),
            )
            .map_err(tag(None))?;
            Ok((three_d_var(&input).map_err(tag(None))?.x_a, None))
        }
        Scheme::CdfMatch => {
            let clim = state.climatology.as_ref().ok_or_else(|| {
                ExperimentError::Config("cdf_match needs a climatology".into())
            })?;
            let mut x_a = DVector::zeros(n);
            for d in 0..n {
                let out = cdf_match_then_3dvar(
                    x_b[d],
                    y[d],
                    &clim.model[d],
                    &clim.observation[d],
                    &clim.reference[d],
                    1.0,
                    b,
                    r,
                )
                .map_err(tag(Some(d)))?;
                x_a[d] = out.x_a[0];
            }
            Ok((x_a, None))
        }
        Scheme::WmVda => {
            let mut x_a = DVector::zeros(n);
            let mut hists = Vec::with_capacity(n);
            for d in 0..n {
                let reference = match cfg.reference.mode {
                    ReferenceMode::PerCycle => {
                        let sd = cfg.reference.variance.sqrt();
                        let grid = cycle_grid(
                            truth[d],
                            x_b[d],
                            y[d],
                            sd,
                            cfg.grid.half_width,
                            cfg.grid.points,
                        )?;
                        build_reference_setup1(
                            truth[d],
                            cfg.reference.variance,
                            cfg.reference.samples,
                            &grid,
                            &mut state.streams.reference,
                        )?
                    }
                    ReferenceMode::Climatological => state
                        .climatology
                        .as_ref()
                        .ok_or_else(|| ExperimentError::Config("missing climatology".into()))?
                        .reference[d]
                        .clone(),
                };
                let input = AnalysisInput::scalar(x_b[d], y[d], 1.0, b, r).map_err(tag(Some(d)))?;
                let prob = WmVdaProblem::new(input, reference.clone(), lambda[d])
                    .map_err(tag(Some(d)))?;
                let out = wm_vda(&prob).map_err(tag(Some(d)))?;
                x_a[d] = out.x_a[0];
                if let Some(analysis) = out.histogram {
                    hists.push(CycleHistograms { analysis, reference });
                }
            }
            Ok((x_a, Some(hists)))
        }
    }
}

/// One row of the per-cycle CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleRecord {
    pub member: usize,
    pub cycle: usize,
    pub dim: usize,
    pub scheme: Scheme,
    pub x_truth: f64,
    pub x_b: f64,
    pub y: f64,
    pub x_a: f64,
    /// Mean error over every step from the window start to this analysis.
    pub bias_running: f64,
    /// Population standard deviation of the same errors.
    pub ubrmse_running: f64,
}

/// First-cycle histograms and their W2 distance, per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstCycle {
    pub histograms: Vec<CycleHistograms>,
    pub w2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberRun {
    pub member: usize,
    /// `steps + 1` states, the first being the initial condition.
    pub states: Vec<DVector<f64>>,
    pub cycles: Vec<CycleRecord>,
    pub metrics: Vec<SeriesMetrics>,
    pub first_cycle: Option<FirstCycle>,
}

/// Runs the whole window for one member.
pub fn run_member(
    setup: &ExperimentSetup,
    scheme: Scheme,
    lambda: &[f64],
    member: usize,
) -> Result<MemberRun, ExperimentError> {
    let cfg = &setup.config;
    let n = cfg.dim();
    if lambda.len() != n {
        return Err(ExperimentError::Config(format!(
            "expected {n} regularization weights, got {}",
            lambda.len()
        )));
    }
    let mut state = MemberState::new(setup, member, scheme)?;
    let mut states = Vec::with_capacity(cfg.system.steps + 1);
    states.push(state.x.clone());
    let mut running = vec![RunningStats::default(); n];
    let mut cycles = Vec::new();
    let mut first_cycle = None;
    while let Some(out) = run_cycle(setup, scheme, lambda, &mut state)? {
        for x in out.states {
            let t = states.len();
            for d in 0..n {
                running[d].push(x[d] - setup.truth[t][d]);
            }
            states.push(x);
        }
        let Some(rec) = out.analysis else { continue };
        #[allow(clippy::needless_range_loop)]
        for d in 0..n {
            cycles.push(CycleRecord {
                member,
                cycle: rec.cycle,
                dim: d,
                scheme,
                x_truth: rec.truth[d],
                x_b: rec.x_b[d],
                y: rec.y[d],
                x_a: rec.x_a[d],
                bias_running: running[d].mean(),
                ubrmse_running: running[d].std(),
            });
        }
        if rec.cycle == 0 {
            if let Some(histograms) = rec.histograms {
                let w2 = histograms
                    .iter()
                    .map(|h| wasserstein(&h.analysis, &h.reference, 2.0).unwrap_or(f64::NAN))
                    .collect();
                first_cycle = Some(FirstCycle { histograms, w2 });
            }
        }
    }
    let start = setup.metric_start();
    let metrics = (0..n)
        .map(|d| {
            let e: Vec<f64> = (start..states.len())
                .map(|t| states[t][d] - setup.truth[t][d])
                .collect();
            SeriesMetrics::from_residuals(&e)
        })
        .collect();
    Ok(MemberRun { member, states, cycles, metrics, first_cycle })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemberMetrics {
    pub member: usize,
    pub metrics: Vec<SeriesMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemberFailure {
    pub member: usize,
    pub error: String,
}

/// Ensemble summary of one scheme.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub scheme: Scheme,
    pub lambda: Vec<f64>,
    pub interval: usize,
    pub members: Vec<MemberMetrics>,
    pub failures: Vec<MemberFailure>,
    /// Member means of signed bias, ubrmse and mse, per dimension.
    pub expected: Vec<SeriesMetrics>,
    /// Member mean of |bias| per dimension.
    pub expected_abs_bias: Vec<f64>,
    /// Spread of the member states at every step, per dimension.
    pub envelopes: Vec<Envelope>,
    /// Member mean of the first-cycle W2 between analysis and reference.
    pub first_cycle_w2: Option<Vec<f64>>,
}

impl MetricsRecord {
    fn aggregate(
        scheme: Scheme,
        lambda: &[f64],
        interval: usize,
        runs: &[MemberRun],
        failures: Vec<MemberFailure>,
    ) -> Self {
        let n = runs.first().map_or(0, |r| r.metrics.len());
        let count = runs.len() as f64;
        let mean = |f: &dyn Fn(&SeriesMetrics) -> f64, d: usize| {
            runs.iter().map(|r| f(&r.metrics[d])).sum::<f64>() / count
        };
        let expected = (0..n)
            .map(|d| SeriesMetrics {
                bias: mean(&|m| m.bias, d),
                ubrmse: mean(&|m| m.ubrmse, d),
                mse: mean(&|m| m.mse, d),
            })
            .collect();
        let expected_abs_bias = (0..n).map(|d| mean(&|m| m.bias.abs(), d)).collect();
        let envelopes = (0..n)
            .map(|d| {
                let series: Vec<Vec<f64>> =
                    runs.iter().map(|r| r.states.iter().map(|x| x[d]).collect()).collect();
                Envelope::from_members(&series)
            })
            .collect();
        let w2: Vec<&FirstCycle> = runs.iter().filter_map(|r| r.first_cycle.as_ref()).collect();
        let first_cycle_w2 = (!w2.is_empty()).then(|| {
            (0..n)
                .map(|d| w2.iter().map(|f| f.w2[d]).sum::<f64>() / w2.len() as f64)
                .collect()
        });
        Self {
            scheme,
            lambda: lambda.to_vec(),
            interval,
            members: runs
                .iter()
                .map(|r| MemberMetrics { member: r.member, metrics: r.metrics.clone() })
                .collect(),
            failures,
            expected,
            expected_abs_bias,
            envelopes,
            first_cycle_w2,
        }
    }

    pub fn dims(&self) -> usize {
        self.expected.len()
    }

    /// Percent reduction of expected |bias| and ubrmse relative to
    /// `baseline`, per dimension.
    pub fn reduction_vs(&self, baseline: &MetricsRecord) -> Vec<Reduction> {
        (0..self.dims())
            .map(|d| Reduction {
                bias: reduction_percent(baseline.expected_abs_bias[d], self.expected_abs_bias[d]),
                signed_bias: reduction_percent(
                    baseline.expected[d].bias.abs(),
                    self.expected[d].bias.abs(),
                ),
                ubrmse: reduction_percent(baseline.expected[d].ubrmse, self.expected[d].ubrmse),
            })
            .collect()
    }
}

/// Percent improvements of one scheme over another (positive is better).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Reduction {
    /// From the member mean of |bias|.
    pub bias: f64,
    /// From |member mean of signed bias|.
    pub signed_bias: f64,
    pub ubrmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRun {
    pub record: MetricsRecord,
    pub members: Vec<MemberRun>,
}

/// Runs every member with `lambda` (one value per dimension). Failed members
/// are recorded and left out of the aggregates.
pub fn run_ensemble(
    setup: &ExperimentSetup,
    scheme: Scheme,
    lambda: &[f64],
    mode: Execution,
) -> Result<EnsembleRun, ExperimentError> {
    let cfg = &setup.config;
    let started = Instant::now();
    let results = map_indexed(cfg.ensemble_size, mode, |m| run_member(setup, scheme, lambda, m));
    let mut members = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    let mut first_error = None;
    for (m, r) in results.into_iter().enumerate() {
        match r {
            Ok(run) => members.push(run),
            Err(e) if e.is_solver_failure() || matches!(e, ExperimentError::Dynamics(_)) => {
                warn!("member {m} failed: {e}");
                failures.push(MemberFailure { member: m, error: e.to_string() });
                first_error.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    if members.is_empty() {
        return Err(ExperimentError::AllMembersFailed {
            failures: failures.len(),
            first: first_error.map(|e| e.to_string()).unwrap_or_default(),
        });
    }
    info!(
        "{scheme}: {} members ({} failed) in {:.2?}",
        members.len(),
        failures.len(),
        started.elapsed()
    );
    let record =
        MetricsRecord::aggregate(scheme, lambda, cfg.scheme.interval, &members, failures);
    Ok(EnsembleRun { record, members })
}

/// Builds the setup from `config` and runs `scheme` with the configured
/// regularization weights.
pub fn run_configured(
    config: &ExperimentConfig,
    scheme: Scheme,
    mode: Execution,
) -> Result<EnsembleRun, ExperimentError> {
    let setup = ExperimentSetup::new(config.clone())?;
    run_ensemble(&setup, scheme, &config.lambdas(), mode)
}

/// Grid points and masses of a histogram, for output files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramSnapshot {
    pub points: Vec<f64>,
    pub masses: Vec<f64>,
}

impl From<&ProbabilityHistogram> for HistogramSnapshot {
    fn from(h: &ProbabilityHistogram) -> Self {
        Self { points: h.grid().points().to_vec(), masses: h.masses().to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub expected: Vec<SeriesMetrics>,
    pub expected_abs_bias: Vec<f64>,
    pub first_cycle_w2: Vec<f64>,
    pub failures: usize,
    /// First-cycle analysis and reference histograms of member 0.
    pub analysis_histograms: Vec<HistogramSnapshot>,
    pub reference_histograms: Vec<HistogramSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaSweep {
    pub rows: Vec<LambdaRow>,
}

/// WM-VDA ensembles for each λ, applied to every dimension.
pub fn lambda_sweep(
    setup: &ExperimentSetup,
    lambdas: &[f64],
    mode: Execution,
) -> Result<LambdaSweep, ExperimentError> {
    if lambdas.is_empty() {
        return Err(ExperimentError::Config("lambda sweep needs at least one value".into()));
    }
    let n = setup.config.dim();
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(ExperimentError::Config(format!(
                "sweep lambda must be finite and nonnegative, got {lambda}"
            )));
        }
        debug!("lambda sweep: {lambda}");
        let run = run_ensemble(setup, Scheme::WmVda, &vec![lambda; n], mode)?;
        let first = run.members.first().and_then(|m| m.first_cycle.as_ref());
        rows.push(LambdaRow {
            lambda,
            expected: run.record.expected.clone(),
            expected_abs_bias: run.record.expected_abs_bias.clone(),
            first_cycle_w2: run.record.first_cycle_w2.clone().unwrap_or_default(),
            failures: run.record.failures.len(),
            analysis_histograms: first
                .map(|f| f.histograms.iter().map(|h| (&h.analysis).into()).collect())
                .unwrap_or_default(),
            reference_histograms: first
                .map(|f| f.histograms.iter().map(|h| (&h.reference).into()).collect())
                .unwrap_or_default(),
        });
    }
    Ok(LambdaSweep { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalRow {
    pub interval: usize,
    pub scheme: Scheme,
    pub expected: Vec<SeriesMetrics>,
    pub expected_abs_bias: Vec<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalSweep {
    pub rows: Vec<IntervalRow>,
}

impl IntervalSweep {
    pub fn row(&self, interval: usize, scheme: Scheme) -> Option<&IntervalRow> {
        self.rows.iter().find(|r| r.interval == interval && r.scheme == scheme)
    }
}

/// Terminal metrics per assimilation interval for each scheme.
pub fn interval_sweep(
    config: &ExperimentConfig,
    intervals: &[usize],
    schemes: &[Scheme],
    mode: Execution,
) -> Result<IntervalSweep, ExperimentError> {
    let mut rows = Vec::new();
    for &interval in intervals {
        let mut cfg = config.clone();
        cfg.scheme.interval = interval;
        let setup = ExperimentSetup::new(cfg)?;
        for &scheme in schemes {
            debug!("interval sweep: {interval} steps, {scheme}");
            let run = run_ensemble(&setup, scheme, &config.lambdas(), mode)?;
            rows.push(IntervalRow {
                interval,
                scheme,
                expected: run.record.expected.clone(),
                expected_abs_bias: run.record.expected_abs_bias.clone(),
                failures: run.record.failures.len(),
            });
        }
    }
    Ok(IntervalSweep { rows })
}

/// The CDF-matching baseline next to 3D-Var and WM-VDA on one
/// climatological-reference configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineComparison {
    pub three_d_var: EnsembleRun,
    pub wm_vda: EnsembleRun,
    pub cdf_match: EnsembleRun,
}

impl BaselineComparison {
    pub fn cdf_reduction(&self) -> Vec<Reduction> {
        self.cdf_match.record.reduction_vs(&self.three_d_var.record)
    }

    pub fn wmvda_reduction(&self) -> Vec<Reduction> {
        self.wm_vda.record.reduction_vs(&self.three_d_var.record)
    }
}

pub fn cdf_baseline_experiment(
    config: &ExperimentConfig,
    mode: Execution,
) -> Result<BaselineComparison, ExperimentError> {
    if config.reference.mode != ReferenceMode::Climatological {
        return Err(ExperimentError::Config(
            "the CDF baseline needs reference.mode = climatological".into(),
        ));
    }
    let setup = ExperimentSetup::new(config.clone())?;
    let lambda = config.lambdas();
    Ok(BaselineComparison {
        three_d_var: run_ensemble(&setup, Scheme::ThreeDVar, &lambda, mode)?,
        wm_vda: run_ensemble(&setup, Scheme::WmVda, &lambda, mode)?,
        cdf_match: run_ensemble(&setup, Scheme::CdfMatch, &lambda, mode)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::stream_rng;

    fn small_linear() -> ExperimentConfig {
        let mut c = ExperimentConfig::linear();
        c.ensemble_size = 4;
        c.system.steps = 60;
        c
    }

    fn noiseless(mut c: ExperimentConfig) -> ExperimentConfig {
        c.noise.model = NoiseSpec::new(0.0, 0.0);
        c.noise.observation = NoiseSpec::new(0.0, 0.0);
        c.noise.initial_variance = 0.0;
        c
    }

    #[test]
    fn presets_validate() {
        for c in [
            ExperimentConfig::linear(),
            ExperimentConfig::lorenz_setup1(),
            ExperimentConfig::lorenz_setup2(),
        ] {
            c.validate().unwrap();
        }
        assert_eq!(ExperimentConfig::lorenz_setup2().lambdas(), vec![0.02, 0.08, 0.07]);
        assert_eq!(ExperimentConfig::lorenz_setup1().lambdas(), vec![3.0; 3]);
        let mut bad = ExperimentConfig::linear();
        bad.scheme.lambda = vec![-1.0];
        assert!(matches!(bad.validate(), Err(ExperimentError::Config(m)) if m.contains("scheme.lambda")));
        let mut bad = ExperimentConfig::linear();
        bad.ensemble_size = 0;
        assert!(bad.validate().is_err());
        let mut bad = ExperimentConfig::linear();
        bad.scheme.interval = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn setup1_reference_examples() {
        let grid = SupportGrid::new(-5.0, 25.0, 61).unwrap();
        let mut rng = stream_rng(1, 0, Stream::ReferenceSamples);
        let dirac = build_reference_setup1(10.2, 0.0, 500, &grid, &mut rng).unwrap();
        assert_eq!(dirac.masses()[grid.nearest_index(10.2)], 1.0);

        let mut fails = 0;
        for member in 0..20 {
            let mut rng = stream_rng(9, member, Stream::ReferenceSamples);
            let h = build_reference_setup1(10.0, 4.5, 500, &grid, &mut rng).unwrap();
            if (h.mean() - 10.0).abs() > 3.0 * 4.5f64.sqrt() / 500f64.sqrt() {
                fails += 1;
            }
        }
        assert!(fails <= 1);

        let mut a = stream_rng(1, 0, Stream::ReferenceSamples);
        let mut b = stream_rng(2, 0, Stream::ReferenceSamples);
        let ha = build_reference_setup1(10.0, 4.5, 500, &grid, &mut a).unwrap();
        let hb = build_reference_setup1(10.0, 4.5, 500, &grid, &mut b).unwrap();
        assert_ne!(ha.masses(), hb.masses());
        assert_eq!(ha.grid(), hb.grid());
    }

    #[test]
    fn setup2_reference_examples() {
        let constant = vec![DVector::from_vec(vec![1.0, 2.0, 3.0]); 50];
        let mut rng = stream_rng(0, 0, Stream::Climatology);
        let pooled = pooled_reference_samples(&constant, 0.0, &mut rng);
        let grids: Vec<SupportGrid> =
            pooled.iter().map(|p| spanning_grid(&[p], 20, 0.1).unwrap()).collect();
        let mut rng = stream_rng(0, 0, Stream::Climatology);
        let hs = build_reference_setup2(&constant, 0.0, &grids, &mut rng).unwrap();
        for (h, want) in hs.iter().zip([1.0, 2.0, 3.0]) {
            assert_eq!(h.masses().iter().filter(|&&m| m > 0.0).count(), 1);
            assert!((h.mean() - want).abs() <= h.grid().spacing() / 2.0);
        }

        let setup = ExperimentSetup::new(ExperimentConfig::lorenz_setup2()).unwrap();
        let clim = build_climatology(&setup, 0).unwrap();
        let truth = setup.climatology_truth();
        for d in 0..3 {
            let mean = truth.iter().map(|x| x[d]).sum::<f64>() / truth.len() as f64;
            let h = &clim.reference[d];
            assert!((h.mean() - mean).abs() < 0.5, "dim {d}: {} vs {mean}", h.mean());
            // pooled spread of the attractor plus the added noise
            assert!(h.variance() > 40.0 && h.variance() < 110.0, "dim {d}: {}", h.variance());
        }
    }

    #[test]
    fn noiseless_three_d_var_tracks_truth() {
        let cfg = noiseless(small_linear());
        let setup = ExperimentSetup::new(cfg).unwrap();
        let run = run_member(&setup, Scheme::ThreeDVar, &[5.0], 0).unwrap();
        for (x, t) in run.states.iter().zip(setup.truth()) {
            assert!((x[0] - t[0]).abs() < 1e-6);
        }
        for c in &run.cycles {
            assert!((c.x_a - c.x_truth).abs() < 1e-6);
        }

        let mut cfg = noiseless(ExperimentConfig::lorenz_setup1());
        cfg.system.steps = 200;
        cfg.ensemble_size = 1;
        let setup = ExperimentSetup::new(cfg).unwrap();
        let run = run_member(&setup, Scheme::ThreeDVar, &[3.0; 3], 0).unwrap();
        for c in &run.cycles {
            assert!((c.x_a - c.x_truth).abs() < 1e-6);
        }
    }

    #[test]
    fn one_linear_cycle_matches_closed_form() {
        let setup = ExperimentSetup::new(small_linear()).unwrap();
        let mut state = MemberState::new(&setup, 0, Scheme::ThreeDVar).unwrap();
        let out = run_cycle(&setup, Scheme::ThreeDVar, &[5.0], &mut state).unwrap().unwrap();
        let rec = out.analysis.unwrap();
        assert_eq!(rec.step, 3);
        let (xb, y) = (rec.x_b[0], rec.y[0]);
        let expect = (xb / 1.5 + y / 0.75) / (1.0 / 1.5 + 1.0 / 0.75);
        assert!((rec.x_a[0] - expect).abs() < 1e-12);
        assert_eq!(out.states.len(), 3);
        assert_eq!(out.states[2][0], rec.x_a[0]);
        assert_eq!(state.x[0], rec.x_a[0]);
    }

    #[test]
    fn zero_lambda_wmvda_follows_three_d_var_per_cycle() {
        let setup = ExperimentSetup::new(small_linear()).unwrap();
        let mut s_var = MemberState::new(&setup, 1, Scheme::ThreeDVar).unwrap();
        let mut s_wm = MemberState::new(&setup, 1, Scheme::WmVda).unwrap();
        for _ in 0..5 {
            let a = run_cycle(&setup, Scheme::ThreeDVar, &[0.0], &mut s_var).unwrap().unwrap();
            let b = run_cycle(&setup, Scheme::WmVda, &[0.0], &mut s_wm).unwrap().unwrap();
            let (a, b) = (a.analysis.unwrap(), b.analysis.unwrap());
            let spacing = b.histograms.as_ref().unwrap()[0].reference.grid().spacing();
            // same inputs for both, so compare the analysis step itself
            let var = three_d_var(&AnalysisInput::scalar(b.x_b[0], b.y[0], 1.0, 1.5, 0.75).unwrap())
                .unwrap()
                .x_a[0];
            assert!((b.x_a[0] - var).abs() <= spacing);
            assert!(a.x_a[0].is_finite());
        }
    }

    #[test]
    fn single_member_envelope() {
        let mut cfg = small_linear();
        cfg.ensemble_size = 1;
        let setup = ExperimentSetup::new(cfg).unwrap();
        let run = run_ensemble(&setup, Scheme::ThreeDVar, &[5.0], Execution::Auto).unwrap();
        let env = &run.record.envelopes[0];
        let states: Vec<f64> = run.members[0].states.iter().map(|x| x[0]).collect();
        assert_eq!(env.lower, states);
        assert_eq!(env.upper, states);
    }

    #[test]
    fn ensembles_are_deterministic() {
        let setup = ExperimentSetup::new(small_linear()).unwrap();
        let a = run_ensemble(&setup, Scheme::WmVda, &[5.0], Execution::Auto).unwrap();
        let b = run_ensemble(&setup, Scheme::WmVda, &[5.0], Execution::Sequential).unwrap();
        assert_eq!(a, b);
        for m in &a.record.members {
            for s in &m.metrics {
                assert!(s.decomposition_error() <= 1e-9 * s.mse.max(1.0));
            }
        }
    }

    #[test]
    fn unit_interval_without_noise_has_zero_bias() {
        let mut cfg = noiseless(small_linear());
        cfg.scheme.interval = 1;
        // a Dirac reference on a grid whose midpoint is the truth
        cfg.reference.variance = 0.0;
        cfg.grid.points = 51;
        let setup = ExperimentSetup::new(cfg).unwrap();
        for scheme in [Scheme::ThreeDVar, Scheme::WmVda] {
            let run = run_ensemble(&setup, scheme, &[5.0], Execution::Auto).unwrap();
            assert!(run.record.expected[0].bias.abs() < 1e-9, "{scheme}: {}", run.record.expected[0].bias);
        }
    }

    #[test]
    fn window_tail_without_observation() {
        let mut cfg = small_linear();
        cfg.system.steps = 10;
        let setup = ExperimentSetup::new(cfg).unwrap();
        let run = run_member(&setup, Scheme::ThreeDVar, &[5.0], 0).unwrap();
        assert_eq!(run.states.len(), 11);
        assert_eq!(run.cycles.len(), 3);
    }

    #[test]
    fn single_lambda_sweep_matches_ensemble() {
        let setup = ExperimentSetup::new(small_linear()).unwrap();
        let sweep = lambda_sweep(&setup, &[5.0], Execution::Auto).unwrap();
        let run = run_ensemble(&setup, Scheme::WmVda, &[5.0], Execution::Auto).unwrap();
        assert_eq!(sweep.rows.len(), 1);
        assert_eq!(sweep.rows[0].expected, run.record.expected);
        assert_eq!(sweep.rows[0].analysis_histograms.len(), 1);
        assert!(lambda_sweep(&setup, &[], Execution::Auto).is_err());
    }

    #[test]
    fn noiseless_cdf_baseline_tracks_truth() {
        // model, reference and observation climatologies all come from the
        // truth, so the CDF maps are close to the identity
        let mut cfg = noiseless(ExperimentConfig::lorenz_setup2());
        cfg.reference.variance = 0.0;
        cfg.ensemble_size = 2;
        cfg.system.steps = 400;
        let cmp = cdf_baseline_experiment(&cfg, Execution::Auto).unwrap();
        let member = &cmp.cdf_match.members[0];
        let clim = MemberState::new(&ExperimentSetup::new(cfg).unwrap(), 0, Scheme::CdfMatch).unwrap();
        for d in 0..3 {
            let spacing = clim.climatology().unwrap().grids[d].spacing();
            let worst = member.cycles.iter().filter(|c| c.dim == d).map(|c| (c.x_a - c.x_truth).abs()).fold(0.0, f64::max);
            assert!(worst < 2.0 * spacing, "dim {d}: {worst} vs spacing {spacing}");
        }
        assert!(cmp.three_d_var.record.expected.iter().all(|m| m.mse < 1e-12));
    }

    #[test]
    fn scheme_labels_round_trip() {
        for s in [Scheme::ThreeDVar, Scheme::WmVda, Scheme::CdfMatch] {
            assert_eq!(s.label().parse::<Scheme>().unwrap(), s);
        }
        assert!("kalman".parse::<Scheme>().is_err());
    }
}
