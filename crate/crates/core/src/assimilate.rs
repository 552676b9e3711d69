//! Analysis step: closed-form 3D-Var, the Wasserstein-regularized QP over
//! transport plans, and CDF matching followed by 3D-Var.
//!
//! The regularized cost over a plan `ũ` (analysis index `i`, reference index
//! `j`, stored at `j·K + i`) is
//!
//! ```text
//!     J(ũ) = ‖XΩũ − x_b‖²_{B⁻¹} + ‖HXΩũ − y‖²_{R⁻¹} + λ c̃ᵀũ,   Λũ = p_xr,  ũ ≥ 0
//! ```
//!
//! where `Ω` sums over the reference index (the analysis histogram) and `Λ`
//! sums over the analysis index. Both are applied as index maps.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::histogram::{cdf_match, HistogramError, MASS_TOL, ProbabilityHistogram, SupportGrid};
use crate::qpsolve::{
    solve_qp, EqualityConstraints, Hessian, QpError, QpOptions, QuadraticProgram,
};
use crate::transport::TransportPlan;

/// Largest joint support (`k^m`) accepted by the joint formulation.
pub const MAX_JOINT_SUPPORT: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssimilateError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0} covariance is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("regularization weight must be finite and nonnegative, got {0}")]
    InvalidLambda(f64),
    #[error("joint support of {0} points exceeds the limit of {MAX_JOINT_SUPPORT}")]
    JointTooLarge(usize),
    #[error("normal matrix is singular")]
    Singular,
    #[error(transparent)]
    Histogram(#[from] HistogramError),
    #[error("analysis solve failed: {0}")]
    Solver(#[from] QpError),
}

fn symmetric_cholesky(
    m: &DMatrix<f64>,
    which: &'static str,
) -> Result<Cholesky<f64, Dyn>, AssimilateError> {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return Err(AssimilateError::NotPositiveDefinite(which));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(AssimilateError::NotPositiveDefinite(which));
    }
    Cholesky::new(m.clone()).ok_or(AssimilateError::NotPositiveDefinite(which))
}

/// Multivariate normal error model `N(bias, covariance)`.
#[derive(Debug, Clone)]
pub struct GaussianErrorSpec {
    bias: DVector<f64>,
    covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl PartialEq for GaussianErrorSpec {
    fn eq(&self, other: &Self) -> bool {
        self.bias == other.bias && self.covariance == other.covariance
    }
}

impl GaussianErrorSpec {
    pub fn new(bias: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, AssimilateError> {
        if covariance.nrows() != bias.len() {
            return Err(AssimilateError::Dimension(format!(
                "bias has {} entries, covariance is {}x{}",
                bias.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if bias.iter().any(|v| !v.is_finite()) {
            return Err(AssimilateError::Dimension("non-finite bias".into()));
        }
        let factor = symmetric_cholesky(&covariance, "noise")?.l();
        Ok(Self { bias, covariance, factor })
    }

    pub fn scalar(bias: f64, variance: f64) -> Result<Self, AssimilateError> {
        Self::isotropic(bias, variance, 1)
    }

    /// Same bias in every component and covariance `variance · I`.
    pub fn isotropic(bias: f64, variance: f64, dim: usize) -> Result<Self, AssimilateError> {
        Self::new(
            DVector::from_element(dim, bias),
            DMatrix::from_diagonal_element(dim, dim, variance),
        )
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// `bias + L z` with `L Lᵀ = covariance` and `z` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        &self.bias + &self.factor * z
    }
}

/// Background, observation and their error covariances for one analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisInput {
    x_b: DVector<f64>,
    y: DVector<f64>,
    h: DMatrix<f64>,
    b: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl AnalysisInput {
    pub fn new(
        x_b: DVector<f64>,
        y: DVector<f64>,
        h: DMatrix<f64>,
        b: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self, AssimilateError> {
        let (n, p) = (x_b.len(), y.len());
        if h.shape() != (p, n) {
            return Err(AssimilateError::Dimension(format!(
                "H is {}x{}, expected {p}x{n}",
                h.nrows(),
                h.ncols()
            )));
        }
        if b.shape() != (n, n) || r.shape() != (p, p) {
            return Err(AssimilateError::Dimension(format!(
                "B is {}x{} and R is {}x{} for state {n} and observation {p}",
                b.nrows(),
                b.ncols(),
                r.nrows(),
                r.ncols()
            )));
        }
        if x_b.iter().chain(y.iter()).chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(AssimilateError::Dimension("non-finite input".into()));
        }
        symmetric_cholesky(&b, "background")?;
        symmetric_cholesky(&r, "observation")?;
        Ok(Self { x_b, y, h, b, r })
    }

    /// One state variable, one observation.
    pub fn scalar(x_b: f64, y: f64, h: f64, b: f64, r: f64) -> Result<Self, AssimilateError> {
        Self::new(
            DVector::from_element(1, x_b),
            DVector::from_element(1, y),
            DMatrix::from_element(1, 1, h),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, r),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.x_b.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.y.len()
    }

    pub fn background(&self) -> &DVector<f64> {
        &self.x_b
    }

    pub fn observation(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn observation_operator(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn background_covariance(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn observation_covariance(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Inverse weights `B⁻¹` and `R⁻¹` through Cholesky solves.
    fn weights(&self) -> Weights {
        let b_inv = Cholesky::new(self.b.clone()).expect("checked at construction").inverse();
        let r_inv = Cholesky::new(self.r.clone()).expect("checked at construction").inverse();
        Weights { b_inv, r_inv }
    }

    /// 3D-Var cost `‖x − x_b‖²_{B⁻¹} + ‖Hx − y‖²_{R⁻¹}`.
    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        let w = self.weights();
        let db = x - &self.x_b;
        let dy = &self.h * x - &self.y;
        db.dot(&(&w.b_inv * &db)) + dy.dot(&(&w.r_inv * &dy))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Weights {
    pub(crate) b_inv: DMatrix<f64>,
    pub(crate) r_inv: DMatrix<f64>,
}

/// Solver metadata attached to a transport-plan analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub objective: f64,
    pub duality_gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Max-norm violation of the reference marginal after clipping.
    pub reference_marginal_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisResult {
    pub x_a: DVector<f64>,
    /// Analysis error covariance (3D-Var only).
    pub covariance: Option<DMatrix<f64>>,
    /// Analysis histogram (transport-plan analysis only).
    pub histogram: Option<ProbabilityHistogram>,
    /// Derived diagnostic: the variance of the analysis histogram. It is not
    /// an error covariance.
    pub histogram_variance: Option<f64>,
    pub plan: Option<TransportPlan>,
    pub diagnostics: Option<SolverDiagnostics>,
}

/// `x_a = (HᵀR⁻¹H + B⁻¹)⁻¹(HᵀR⁻¹y + B⁻¹x_b)` and `P_a = (HᵀR⁻¹H + B⁻¹)⁻¹`.
pub fn three_d_var(input: &AnalysisInput) -> Result<AnalysisResult, AssimilateError> {
    let w = input.weights();
    let ht_rinv = input.h.transpose() * &w.r_inv;
    let normal = &ht_rinv * &input.h + &w.b_inv;
    let rhs = &ht_rinv * &input.y + &w.b_inv * &input.x_b;
    let chol = Cholesky::new(normal).ok_or(AssimilateError::Singular)?;
    let x_a = chol.solve(&rhs);
    Ok(AnalysisResult {
        x_a,
        covariance: Some(chol.inverse()),
        histogram: None,
        histogram_variance: None,
        plan: None,
        diagnostics: None,
    })
}

fn check_lambda(lambda: f64) -> Result<(), AssimilateError> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(AssimilateError::InvalidLambda(lambda))
    }
}

/// Scalar-state problem: the reference histogram's grid is the support of
/// both plan marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct WmVdaProblem {
    input: AnalysisInput,
    reference: ProbabilityHistogram,
    lambda: f64,
}

impl WmVdaProblem {
    pub fn new(
        input: AnalysisInput,
        reference: ProbabilityHistogram,
        lambda: f64,
    ) -> Result<Self, AssimilateError> {
        check_lambda(lambda)?;
        if input.state_dim() != 1 {
            return Err(AssimilateError::Dimension(format!(
                "marginal problem needs a scalar state, got dimension {}",
                input.state_dim()
            )));
        }
        Ok(Self { input, reference, lambda })
    }

    pub fn input(&self) -> &AnalysisInput {
        &self.input
    }

    pub fn reference(&self) -> &ProbabilityHistogram {
        &self.reference
    }

    pub fn grid(&self) -> &SupportGrid {
        self.reference.grid()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn support(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, self.grid().len(), self.grid().points())
    }
}

/// Joint problem over the product grid `grid^m`, for small supports only.
#[derive(Debug, Clone, PartialEq)]
pub struct JointWmVdaProblem {
    input: AnalysisInput,
    grid: SupportGrid,
    support: DMatrix<f64>,
    reference: Vec<f64>,
    lambda: f64,
}

impl JointWmVdaProblem {
    /// `reference` holds masses over the product grid, with the first
    /// dimension varying fastest.
    pub fn new(
        input: AnalysisInput,
        grid: SupportGrid,
        reference: Vec<f64>,
        lambda: f64,
    ) -> Result<Self, AssimilateError> {
        check_lambda(lambda)?;
        let (m, k) = (input.state_dim(), grid.len());
        let size = (0..m).try_fold(1usize, |acc, _| acc.checked_mul(k)).unwrap_or(usize::MAX);
        if size > MAX_JOINT_SUPPORT {
            return Err(AssimilateError::JointTooLarge(size));
        }
        if reference.len() != size {
            return Err(AssimilateError::Dimension(format!(
                "reference has {} masses, product grid has {size} points",
                reference.len()
            )));
        }
        let total: f64 = reference.iter().sum();
        if reference.iter().any(|&v| v.is_nan() || v < 0.0) || (total - 1.0).abs() > MASS_TOL {
            return Err(AssimilateError::Dimension(
                "joint reference masses must be nonnegative and sum to one".into(),
            ));
        }
        let support = DMatrix::from_fn(m, size, |d, idx| {
            grid.points()[(idx / k.pow(d as u32)) % k]
        });
        Ok(Self { input, grid, support, reference, lambda })
    }

    pub fn support(&self) -> &DMatrix<f64> {
        &self.support
    }

    pub fn grid(&self) -> &SupportGrid {
        &self.grid
    }
}

/// Builds the plan QP for support `x` (`m × K`), reference masses, weights and
/// regularization weight.
pub(crate) fn assemble_with_weights(
    input: &AnalysisInput,
    weights: &Weights,
    x: &DMatrix<f64>,
    reference: &[f64],
    lambda: f64,
) -> Result<QuadraticProgram, AssimilateError> {
    let (m, k) = x.shape();
    let n = k * k;
    let h = &input.h;
    let ht_rinv = h.transpose() * &weights.r_inv;
    let curvature = &ht_rinv * h + &weights.b_inv;
    let pull = &weights.b_inv * &input.x_b + &ht_rinv * &input.y;

    // F = sqrt(2M) · X Ω, column j·K + i equal to sqrt(2M) · x_i
    let eig = SymmetricEigen::new(&curvature * 2.0);
    let roots: Vec<(f64, DVector<f64>)> = eig
        .eigenvalues
        .iter()
        .zip(eig.eigenvectors.column_iter())
        .filter(|(d, _)| **d > 0.0)
        .map(|(d, v)| (d.sqrt(), v.into_owned()))
        .collect();
    let hessian = if roots.is_empty() {
        Hessian::Zero
    } else {
        let mut per_point = DMatrix::zeros(roots.len(), k);
        for (r, (s, v)) in roots.iter().enumerate() {
            for i in 0..k {
                per_point[(r, i)] = s * v.dot(&x.column(i));
            }
        }
        Hessian::LowRank(DMatrix::from_fn(roots.len(), n, |r, idx| per_point[(r, idx % k)]))
    };

    let point_pull: Vec<f64> = (0..k).map(|i| 2.0 * pull.dot(&x.column(i))).collect();
    let linear = (0..n)
        .map(|idx| {
            let (i, j) = (idx % k, idx / k);
            let cost = if i == j {
                0.0
            } else {
                (x.column(i) - x.column(j)).norm_squared()
            };
            lambda * cost - point_pull[i]
        })
        .collect();
    debug_assert_eq!(m, input.state_dim());
    let cons = EqualityConstraints::target_marginal(k, reference);
    Ok(QuadraticProgram::new(hessian, linear, cons)?)
}

/// The plan QP `min ½ũᵀQũ + cᵀũ` with `Λũ = p_xr`, `ũ ≥ 0`, where
/// `Q = 2ΩᵀXᵀ(B⁻¹ + HᵀR⁻¹H)XΩ` and `c = λc̃ − 2ΩᵀXᵀ(B⁻¹x_b + HᵀR⁻¹y)`.
pub fn assemble_wmvda_qp(prob: &WmVdaProblem) -> Result<QuadraticProgram, AssimilateError> {
    assemble_with_weights(
        &prob.input,
        &prob.input.weights(),
        &prob.support(),
        prob.reference.masses(),
        prob.lambda,
    )
}

pub fn assemble_joint_qp(prob: &JointWmVdaProblem) -> Result<QuadraticProgram, AssimilateError> {
    assemble_with_weights(
        &prob.input,
        &prob.input.weights(),
        &prob.support,
        &prob.reference,
        prob.lambda,
    )
}

/// Full regularized cost of a plan, constants included.
pub fn wmvda_cost(prob: &WmVdaProblem, u: &[f64]) -> Result<f64, AssimilateError> {
    let qp = assemble_wmvda_qp(prob)?;
    let w = prob.input.weights();
    let constant = prob.input.x_b.dot(&(&w.b_inv * &prob.input.x_b))
        + prob.input.y.dot(&(&w.r_inv * &prob.input.y));
    Ok(qp.objective(u) + constant)
}

struct PlanSolve {
    u: Vec<f64>,
    analysis: Vec<f64>,
    diagnostics: SolverDiagnostics,
}

fn solve_plan(
    qp: &QuadraticProgram,
    k: usize,
    reference: &[f64],
    opts: &QpOptions,
) -> Result<PlanSolve, AssimilateError> {
    let sol = solve_qp(qp, opts)?.into_converged()?;
    let u: Vec<f64> = sol.u.iter().map(|v| v.max(0.0)).collect();
    let mut analysis = vec![0.0; k];
    let mut marginal = vec![0.0; k];
    for (idx, &v) in u.iter().enumerate() {
        analysis[idx % k] += v;
        marginal[idx / k] += v;
    }
    let reference_marginal_error = marginal
        .iter()
        .zip(reference)
        .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
    Ok(PlanSolve {
        u,
        analysis,
        diagnostics: SolverDiagnostics {
            iterations: sol.iterations,
            objective: sol.objective,
            duality_gap: sol.duality_gap,
            primal_residual: sol.primal_residual,
            dual_residual: sol.dual_residual,
            reference_marginal_error,
        },
    })
}

pub fn wm_vda(prob: &WmVdaProblem) -> Result<AnalysisResult, AssimilateError> {
    wm_vda_with(prob, &QpOptions::default())
}

/// Solves the plan QP. The analysis histogram is the plan's row sums and
/// `x_a` is its mean.
pub fn wm_vda_with(
    prob: &WmVdaProblem,
    opts: &QpOptions,
) -> Result<AnalysisResult, AssimilateError> {
    let qp = assemble_wmvda_qp(prob)?;
    let grid = prob.grid().clone();
    let solved = solve_plan(&qp, grid.len(), prob.reference.masses(), opts)?;
    let histogram = ProbabilityHistogram::from_weights(grid.clone(), &solved.analysis)?;
    let x_a = DVector::from_element(1, histogram.mean());
    Ok(AnalysisResult {
        x_a,
        covariance: None,
        histogram_variance: Some(histogram.variance()),
        histogram: Some(histogram),
        plan: Some(TransportPlan::from_plan_vector(grid.clone(), grid, &solved.u)),
        diagnostics: Some(solved.diagnostics),
    })
}

/// Joint-support analysis: masses over the product grid and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAnalysis {
    pub x_a: DVector<f64>,
    pub masses: Vec<f64>,
    pub plan: Vec<f64>,
    pub diagnostics: SolverDiagnostics,
}

pub fn wm_vda_joint(prob: &JointWmVdaProblem) -> Result<JointAnalysis, AssimilateError> {
    let qp = assemble_joint_qp(prob)?;
    let k = prob.support.ncols();
    let solved = solve_plan(&qp, k, &prob.reference, &QpOptions::default())?;
    let total: f64 = solved.analysis.iter().sum();
    let masses: Vec<f64> = solved.analysis.iter().map(|v| v / total).collect();
    let x_a = &prob.support * DVector::from_column_slice(&masses);
    Ok(JointAnalysis { x_a, masses, plan: solved.u, diagnostics: solved.diagnostics })
}

/// Maps the background through the model histogram and the observation
/// through the observation histogram onto the reference, by CDF matching.
pub fn cdf_map_inputs(
    x_b: f64,
    y: f64,
    model_hist: &ProbabilityHistogram,
    obs_hist: &ProbabilityHistogram,
    reference: &ProbabilityHistogram,
) -> (f64, f64) {
    (cdf_match(x_b, model_hist, reference), cdf_match(y, obs_hist, reference))
}

/// CDF-matches `x_b` and `y` onto `reference`, then runs scalar 3D-Var.
#[allow(clippy::too_many_arguments)]
pub fn cdf_match_then_3dvar(
    x_b: f64,
    y: f64,
    model_hist: &ProbabilityHistogram,
    obs_hist: &ProbabilityHistogram,
    reference: &ProbabilityHistogram,
    h: f64,
    b: f64,
    r: f64,
) -> Result<AnalysisResult, AssimilateError> {
    let (xb_m, y_m) = cdf_map_inputs(x_b, y, model_hist, obs_hist, reference);
    three_d_var(&AnalysisInput::scalar(xb_m, y_m, h, b, r)?)
}
