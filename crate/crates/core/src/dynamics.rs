//! Test systems: a first-order linear model `x ← Mx + ω` and Lorenz-63
//! integrated with classical RK4, plus trajectory and observation generation
//! under biased Gaussian noise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assimilate::GaussianErrorSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error("state became non-finite at step {step}")]
    BlowUp { step: usize },
}

/// Independent random sources for one ensemble member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    ModelNoise,
    ObsNoise,
    ReferenceSamples,
    InitialPerturbation,
    /// Draws for climatological histograms built before the assimilation
    /// window.
    Climatology,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::ModelNoise => 1,
            Stream::ObsNoise => 2,
            Stream::ReferenceSamples => 3,
            Stream::InitialPerturbation => 4,
            Stream::Climatology => 5,
        }
    }
}

/// Generator for `stream` of `member` under master `seed`. The key holds the
/// seed and member, and the stream selects a disjoint ChaCha sequence.
pub fn stream_rng(seed: u64, member: u64, stream: Stream) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&member.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream.id());
    rng
}

fn check_dt(dt: f64) -> Result<(), DynamicsError> {
    if dt.is_finite() && dt > 0.0 {
        Ok(())
    } else {
        Err(DynamicsError::Invalid(format!("time step must be positive, got {dt}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    m: DMatrix<f64>,
    dt: f64,
}

impl LinearModel {
    pub fn new(m: DMatrix<f64>, dt: f64) -> Result<Self, DynamicsError> {
        check_dt(dt)?;
        if !m.is_square() || m.is_empty() {
            return Err(DynamicsError::Dimension(format!(
                "transition matrix is {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self { m, dt })
    }

    pub fn scalar(m: f64, dt: f64) -> Result<Self, DynamicsError> {
        Self::new(DMatrix::from_element(1, 1, m), dt)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn spectral_radius(&self) -> f64 {
        self.m
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    /// The free response decays iff every eigenvalue lies inside the unit
    /// circle.
    pub fn is_stationary(&self) -> bool {
        self.spectral_radius() < 1.0
    }

    pub fn step(&self, x: &DVector<f64>, noise: Option<&DVector<f64>>) -> DVector<f64> {
        let next = &self.m * x;
        match noise {
            Some(w) => next + w,
            None => next,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lorenz63Model {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
}

impl Lorenz63Model {
    pub fn new(sigma: f64, rho: f64, beta: f64, dt: f64) -> Result<Self, DynamicsError> {
        check_dt(dt)?;
        if ![sigma, rho, beta].iter().all(|v| v.is_finite()) {
            return Err(DynamicsError::Invalid("non-finite Lorenz parameter".into()));
        }
        Ok(Self { sigma, rho, beta, dt })
    }

    /// σ = 10, ρ = 28, β = 8/3.
    pub fn standard(dt: f64) -> Result<Self, DynamicsError> {
        Self::new(10.0, 28.0, 8.0 / 3.0, dt)
    }

    pub fn is_chaotic_regime(&self) -> bool {
        self.sigma == 10.0 && self.rho == 28.0 && (self.beta - 8.0 / 3.0).abs() < 1e-15
    }

    /// The two non-trivial equilibria `(±√(β(ρ−1)), ±√(β(ρ−1)), ρ−1)`.
    pub fn equilibria(&self) -> [[f64; 3]; 2] {
        let c = (self.beta * (self.rho - 1.0)).sqrt();
        [[c, c, self.rho - 1.0], [-c, -c, self.rho - 1.0]]
    }

    pub fn tendency(&self, x: &[f64; 3]) -> [f64; 3] {
        [
            self.sigma * (x[1] - x[0]),
            x[0] * (self.rho - x[2]) - x[1],
            x[0] * x[1] - self.beta * x[2],
        ]
    }

    fn rk4(&self, x: &[f64; 3], h: f64) -> [f64; 3] {
        let add = |a: &[f64; 3], b: &[f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
        let k1 = self.tendency(x);
        let k2 = self.tendency(&add(x, &k1, 0.5 * h));
        let k3 = self.tendency(&add(x, &k2, 0.5 * h));
        let k4 = self.tendency(&add(x, &k3, h));
        std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
    }

    /// One RK4 step of length `dt`.
    pub fn rk4_step(&self, x: &[f64; 3]) -> Result<[f64; 3], DynamicsError> {
        let next = self.rk4(x, self.dt);
        if next.iter().all(|v| v.is_finite()) {
            Ok(next)
        } else {
            Err(DynamicsError::BlowUp { step: 0 })
        }
    }
}

/// A propagator for either test system.
#[derive(Debug, Clone, PartialEq)]
pub enum DynamicsModel {
    Linear(LinearModel),
    Lorenz63(Lorenz63Model),
}

impl DynamicsModel {
    pub fn dim(&self) -> usize {
        match self {
            DynamicsModel::Linear(m) => m.m.nrows(),
            DynamicsModel::Lorenz63(_) => 3,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            DynamicsModel::Linear(m) => m.dt,
            DynamicsModel::Lorenz63(m) => m.dt,
        }
    }

    /// Deterministic one-step map.
    pub fn propagate(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        if x.len() != self.dim() {
            return Err(DynamicsError::Dimension(format!(
                "state has {} components, model has {}",
                x.len(),
                self.dim()
            )));
        }
        match self {
            DynamicsModel::Linear(m) => Ok(m.step(x, None)),
            DynamicsModel::Lorenz63(m) => {
                let next = m.rk4_step(&[x[0], x[1], x[2]])?;
                Ok(DVector::from_column_slice(&next))
            }
        }
    }

    /// Deterministic step followed by an additive noise draw.
    pub fn propagate_noisy<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        noise: Option<&GaussianErrorSpec>,
        rng: &mut R,
    ) -> Result<DVector<f64>, DynamicsError> {
        let next = self.propagate(x)?;
        Ok(match noise {
            Some(spec) => next + spec.sample(rng),
            None => next,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub x0: DVector<f64>,
    pub steps: usize,
    pub model_noise: Option<GaussianErrorSpec>,
    pub seed: u64,
    /// Steps integrated and discarded before the recorded window.
    pub spin_up: usize,
}

impl TrajectorySpec {
    pub fn new(x0: DVector<f64>, steps: usize, seed: u64) -> Self {
        Self { x0, steps, model_noise: None, seed, spin_up: 0 }
    }

    pub fn with_noise(mut self, noise: GaussianErrorSpec) -> Self {
        self.model_noise = Some(noise);
        self
    }

    pub fn with_spin_up(mut self, spin_up: usize) -> Self {
        self.spin_up = spin_up;
        self
    }

    fn validate(&self, model: &DynamicsModel) -> Result<(), DynamicsError> {
        if self.steps == 0 {
            return Err(DynamicsError::Invalid("trajectory needs at least one step".into()));
        }
        if self.x0.len() != model.dim() {
            return Err(DynamicsError::Dimension(format!(
                "initial state has {} components, model has {}",
                self.x0.len(),
                model.dim()
            )));
        }
        if let Some(noise) = &self.model_noise {
            if noise.dim() != model.dim() {
                return Err(DynamicsError::Dimension(format!(
                    "model noise has dimension {}, model has {}",
                    noise.dim(),
                    model.dim()
                )));
            }
        }
        Ok(())
    }
}

fn integrate(
    spec: &TrajectorySpec,
    model: &DynamicsModel,
    noise: Option<&GaussianErrorSpec>,
) -> Result<Vec<DVector<f64>>, DynamicsError> {
    spec.validate(model)?;
    let mut rng = stream_rng(spec.seed, 0, Stream::ModelNoise);
    let mut x = spec.x0.clone();
    let total = spec.spin_up + spec.steps;
    let mut out = Vec::with_capacity(spec.steps + 1);
    if spec.spin_up == 0 {
        out.push(x.clone());
    }
    for step in 1..=total {
        x = model
            .propagate_noisy(&x, noise, &mut rng)
            .map_err(|e| match e {
                DynamicsError::BlowUp { .. } => DynamicsError::BlowUp { step },
                other => other,
            })?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::BlowUp { step });
        }
        if step >= spec.spin_up {
            out.push(x.clone());
        }
    }
    Ok(out)
}

/// Noise-free trajectory: `steps + 1` states starting at the end of the
/// spin-up. Any model noise in `spec` is ignored.
pub fn generate_truth(
    spec: &TrajectorySpec,
    model: &DynamicsModel,
) -> Result<Vec<DVector<f64>>, DynamicsError> {
    integrate(spec, model, None)
}

/// Like [`generate_truth`] but with the spec's model noise added after every
/// step, drawn from the model-noise stream of `spec.seed`.
pub fn generate_trajectory(
    spec: &TrajectorySpec,
    model: &DynamicsModel,
) -> Result<Vec<DVector<f64>>, DynamicsError> {
    integrate(spec, model, spec.model_noise.as_ref())
}

/// `Hx + v` with `v` drawn from `noise`, or `Hx` without noise.
pub fn observe<R: Rng + ?Sized>(
    x_true: &DVector<f64>,
    h: &DMatrix<f64>,
    noise: Option<&GaussianErrorSpec>,
    rng: &mut R,
) -> Result<DVector<f64>, DynamicsError> {
    if h.ncols() != x_true.len() {
        return Err(DynamicsError::Dimension(format!(
            "H has {} columns, state has {} components",
            h.ncols(),
            x_true.len()
        )));
    }
    let hx = h * x_true;
    match noise {
        Some(spec) if spec.dim() != hx.len() => Err(DynamicsError::Dimension(format!(
            "observation noise has dimension {}, H has {} rows",
            spec.dim(),
            hx.len()
        ))),
        Some(spec) => Ok(hx + spec.sample(rng)),
        None => Ok(hx),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn lorenz(dt: f64) -> Lorenz63Model {
        Lorenz63Model::standard(dt).unwrap()
    }

    #[test]
    fn linear_step_examples() {
        let m = LinearModel::scalar(0.97, 0.01).unwrap();
        let x = DVector::from_element(1, 10.0);
        assert!((m.step(&x, None)[0] - 9.7).abs() < 1e-12);
        let id = LinearModel::new(DMatrix::identity(3, 3), 0.01).unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        assert_eq!(id.step(&v, Some(&DVector::zeros(3))), v);
    }

    #[test]
    fn injected_noise_mean() {
        let model = DynamicsModel::Linear(LinearModel::scalar(1.0, 0.01).unwrap());
        let noise = GaussianErrorSpec::scalar(0.5, 1.5).unwrap();
        let mut rng = stream_rng(1, 0, Stream::ModelNoise);
        let n = 100_000;
        let x = DVector::zeros(1);
        let mean = (0..n)
            .map(|_| model.propagate_noisy(&x, Some(&noise), &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (1.5f64 / n as f64).sqrt());
    }

    #[test]
    fn stationarity_matches_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let (a, b, c, d) = (
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            );
            let m = LinearModel::new(DMatrix::from_row_slice(2, 2, &[a, b, c, d]), 0.01).unwrap();
            // roots of t² − (a+d)t + (ad − bc)
            let (tr, det) = (a + d, a * d - b * c);
            let disc = tr * tr - 4.0 * det;
            let radius = if disc >= 0.0 {
                ((tr + disc.sqrt()) / 2.0).abs().max(((tr - disc.sqrt()) / 2.0).abs())
            } else {
                det.sqrt()
            };
            assert!((m.spectral_radius() - radius).abs() < 1e-9);
            if (radius - 1.0).abs() > 1e-9 {
                assert_eq!(m.is_stationary(), radius < 1.0);
            }
        }
    }

    #[test]
    fn fixed_points() {
        let l = lorenz(0.01);
        assert!(l.is_chaotic_regime());
        for eq in l.equilibria() {
            let next = l.rk4_step(&eq).unwrap();
            for i in 0..3 {
                assert!((next[i] - eq[i]).abs() <= 1e-9);
            }
        }
        assert!((l.equilibria()[0][0] - 72f64.sqrt()).abs() < 1e-12);
        assert_eq!(l.rk4_step(&[0.0; 3]).unwrap(), [0.0; 3]);
    }

    #[test]
    fn step_halving() {
        let x = [3.0, -3.0, 12.0];
        let full = lorenz(0.01).rk4_step(&x).unwrap();
        let half = lorenz(0.005);
        let two = half.rk4_step(&half.rk4_step(&x).unwrap()).unwrap();
        let err = (0..3).map(|i| (full[i] - two[i]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "{err}");
        // Richardson: over a fixed interval the discrepancy between one and two
        // steps shrinks by (1 − 1/16)/(1/16 − 1/256) = 16 when dt halves
        let fine = lorenz(0.0025);
        let four = (0..4).fold(x, |s, _| fine.rk4_step(&s).unwrap());
        let two_vs_four = (0..3).map(|i| (two[i] - four[i]).abs()).fold(0.0, f64::max);
        let ratio = err / two_vs_four;
        assert!(ratio > 14.0 && ratio < 20.0, "{ratio}");
    }

    fn endpoint(dt: f64, t: f64) -> [f64; 3] {
        let l = lorenz(dt);
        let steps = (t / dt).round() as usize;
        (0..steps).fold([3.0, -3.0, 12.0], |s, _| l.rk4_step(&s).unwrap())
    }

    #[test]
    fn global_fourth_order() {
        let t = 0.4;
        let reference = endpoint(0.01 / 16.0, t);
        let err = |dt: f64| {
            let e = endpoint(dt, t);
            (0..3).map(|i| (e[i] - reference[i]).abs()).fold(0.0, f64::max)
        };
        let ratio = err(0.01) / err(0.005);
        assert!(ratio > 13.0 && ratio < 19.0, "{ratio}");
    }

    #[test]
    fn blow_up_detected() {
        let l = Lorenz63Model::new(10.0, 28.0, 8.0 / 3.0, 10.0).unwrap();
        let model = DynamicsModel::Lorenz63(l);
        let spec = TrajectorySpec::new(DVector::from_vec(vec![3.0, -3.0, 12.0]), 50, 0);
        assert!(matches!(generate_truth(&spec, &model), Err(DynamicsError::BlowUp { .. })));
    }

    #[test]
    fn linear_truth_decays_geometrically() {
        let model = DynamicsModel::Linear(LinearModel::scalar(0.97, 0.01).unwrap());
        let spec = TrajectorySpec::new(DVector::from_element(1, 10.0), 300, 0);
        let truth = generate_truth(&spec, &model).unwrap();
        assert_eq!(truth.len(), 301);
        for (i, x) in truth.iter().enumerate() {
            assert!((x[0] - 10.0 * 0.97f64.powi(i as i32)).abs() < 1e-10);
        }
        let zero = TrajectorySpec::new(DVector::from_element(1, 10.0), 0, 0);
        assert!(generate_truth(&zero, &model).is_err());
    }

    #[test]
    fn lorenz_truth_bounded() {
        let model = DynamicsModel::Lorenz63(lorenz(0.01));
        let spec = TrajectorySpec::new(DVector::from_vec(vec![3.0, -3.0, 12.0]), 5000, 0);
        let truth = generate_truth(&spec, &model).unwrap();
        assert!(truth.iter().all(|x| x[2].abs() < 60.0));
        let after = generate_truth(&spec.clone().with_spin_up(100), &model).unwrap();
        assert_eq!(after.len(), 5001);
        assert_eq!(after[0], truth[100]);
    }

    #[test]
    fn trajectories_are_deterministic() {
        let model = DynamicsModel::Lorenz63(lorenz(0.01));
        let spec = TrajectorySpec::new(DVector::from_vec(vec![3.0, -3.0, 12.0]), 500, 42)
            .with_noise(GaussianErrorSpec::isotropic(0.25, 5f64.sqrt(), 3).unwrap());
        let a = generate_trajectory(&spec, &model).unwrap();
        let b = generate_trajectory(&spec, &model).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits())));
        let mut other = spec.clone();
        other.seed = 43;
        assert_ne!(generate_trajectory(&other, &model).unwrap(), a);
    }

    #[test]
    fn observation_examples() {
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let h = DMatrix::identity(3, 3);
        let mut rng = stream_rng(0, 0, Stream::ObsNoise);
        assert_eq!(observe(&x, &h, None, &mut rng).unwrap(), x);

        let one = DVector::from_element(1, 4.0);
        let linear = GaussianErrorSpec::scalar(0.25, 0.75).unwrap();
        let n = 10_000;
        let mean = (0..n)
            .map(|_| observe(&one, &DMatrix::identity(1, 1), Some(&linear), &mut rng).unwrap()[0] - 4.0)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.25).abs() < 4.0 * (0.75f64 / n as f64).sqrt());

        let lorenz_obs = GaussianErrorSpec::isotropic(0.15, 2.0, 3).unwrap();
        let mut acc = DVector::zeros(3);
        for _ in 0..n {
            acc += observe(&x, &h, Some(&lorenz_obs), &mut rng).unwrap() - &x;
        }
        acc /= n as f64;
        assert!(acc.iter().all(|b| (b - 0.15).abs() < 4.0 * (2.0f64 / n as f64).sqrt()));
    }

    #[test]
    fn streams_are_independent() {
        let n = 100_000;
        let pairs = [
            (Stream::ModelNoise, Stream::ObsNoise),
            (Stream::ModelNoise, Stream::ReferenceSamples),
            (Stream::ObsNoise, Stream::InitialPerturbation),
        ];
        for (s1, s2) in pairs {
            let mut a = stream_rng(7, 3, s1);
            let mut b = stream_rng(7, 3, s2);
            let xs: Vec<f64> = (0..n).map(|_| a.sample(StandardNormal)).collect();
            let ys: Vec<f64> = (0..n).map(|_| b.sample(StandardNormal)).collect();
            let (mx, my) = (xs.iter().sum::<f64>() / n as f64, ys.iter().sum::<f64>() / n as f64);
            let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
            assert!((cov / (vx * vy).sqrt()).abs() < 0.01);
        }
        let mut m0 = stream_rng(7, 0, Stream::ModelNoise);
        let mut m1 = stream_rng(7, 1, Stream::ModelNoise);
        assert_ne!(m0.random::<u64>(), m1.random::<u64>());
    }
}
