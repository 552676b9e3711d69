//! Convex quadratic programs with equality constraints and nonnegativity
//! bounds,
//!
//! ```text
//!     minimize    ½ uᵀ Q u + cᵀ u
//!     subject to  A u = b,  u ≥ 0,
//! ```
//!
//! solved with a Mehrotra predictor-corrector primal-dual interior-point
//! method.
//!
//! The Hessian is either absent, dense, or a thin factorization `Q = FᵀF`; the
//! last form keeps the Newton systems of large transport-plan problems cheap
//! through the Woodbury identity. Constraints are stored as sparse rows with an
//! optional structure hint. For transportation polytopes the solver drops the
//! one linearly dependent row and starts from the product coupling; for
//! single-marginal (partition) constraints it starts from the uniform coupling;
//! otherwise rank is determined by elimination and a phase-1 program supplies
//! the starting point.

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("hessian is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("constraint {row} cannot be satisfied with u >= 0")]
    Infeasible { row: usize },
    #[error(
        "no convergence after {iterations} iterations \
         (gap {gap:e}, primal residual {primal_residual:e}, dual residual {dual_residual:e})"
    )]
    MaxIterations {
        iterations: usize,
        gap: f64,
        primal_residual: f64,
        dual_residual: f64,
    },
    #[error("newton system could not be factorized at iteration {0}")]
    Breakdown(usize),
}

/// Quadratic term of the objective.
#[derive(Debug, Clone, PartialEq)]
pub enum Hessian {
    Zero,
    Dense(DMatrix<f64>),
    /// `Q = FᵀF`, with `F` of shape `r × n`.
    LowRank(DMatrix<f64>),
}

impl Hessian {
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        match self {
            Hessian::Zero => vec![0.0; u.len()],
            Hessian::Dense(q) => (q * DVector::from_column_slice(u)).as_slice().to_vec(),
            Hessian::LowRank(f) => {
                let fu = f * DVector::from_column_slice(u);
                (f.transpose() * fu).as_slice().to_vec()
            }
        }
    }

    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        match self {
            Hessian::Zero => DMatrix::zeros(n, n),
            Hessian::Dense(q) => q.clone(),
            Hessian::LowRank(f) => f.transpose() * f,
        }
    }

    fn restrict(&self, keep: &[usize]) -> Hessian {
        match self {
            Hessian::Zero => Hessian::Zero,
            Hessian::Dense(q) => Hessian::Dense(q.select_rows(keep).select_columns(keep)),
            Hessian::LowRank(f) => Hessian::LowRank(f.select_columns(keep)),
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, Hessian::Zero)
    }
}

/// Layout hint for the equality block. It is verified before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintStructure {
    General,
    /// Every variable appears in exactly one row.
    Partition,
    /// Rows `0..source_rows` and the remaining rows each partition the
    /// variables, all coefficients equal to one.
    Transportation { source_rows: usize },
}

/// Sparse equality block `A u = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualityConstraints {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
    structure: ConstraintStructure,
}

impl EqualityConstraints {
    pub fn new(
        n: usize,
        rows: Vec<Vec<(usize, f64)>>,
        rhs: Vec<f64>,
    ) -> Result<Self, QpError> {
        Self::with_structure(n, rows, rhs, ConstraintStructure::General)
    }

    pub fn with_structure(
        n: usize,
        rows: Vec<Vec<(usize, f64)>>,
        rhs: Vec<f64>,
        structure: ConstraintStructure,
    ) -> Result<Self, QpError> {
        if rows.len() != rhs.len() {
            return Err(QpError::Dimension(format!(
                "{} constraint rows but {} right-hand sides",
                rows.len(),
                rhs.len()
            )));
        }
        if let Some((r, &(j, _))) = rows
            .iter()
            .enumerate()
            .find_map(|(r, row)| row.iter().find(|(j, _)| *j >= n).map(|e| (r, e)))
        {
            return Err(QpError::Dimension(format!(
                "row {r} references variable {j} of {n}"
            )));
        }
        if rhs.iter().any(|b| !b.is_finite()) {
            return Err(QpError::Dimension("non-finite right-hand side".into()));
        }
        Ok(Self { n, rows, rhs, structure })
    }

    pub fn from_dense(a: &DMatrix<f64>, b: &[f64]) -> Result<Self, QpError> {
        let rows = (0..a.nrows())
            .map(|r| {
                (0..a.ncols())
                    .filter(|&c| a[(r, c)] != 0.0)
                    .map(|c| (c, a[(r, c)]))
                    .collect()
            })
            .collect();
        Self::new(a.ncols(), rows, b.to_vec())
    }

    /// Row- and column-sum constraints of a `k × l` plan stored column-major
    /// (`index = j·k + i`).
    pub fn transportation(source: &[f64], target: &[f64]) -> Self {
        let (k, l) = (source.len(), target.len());
        let mut rows = Vec::with_capacity(k + l);
        for i in 0..k {
            rows.push((0..l).map(|j| (j * k + i, 1.0)).collect());
        }
        for j in 0..l {
            rows.push((0..k).map(|i| (j * k + i, 1.0)).collect());
        }
        let rhs = source.iter().chain(target).copied().collect();
        Self {
            n: k * l,
            rows,
            rhs,
            structure: ConstraintStructure::Transportation { source_rows: k },
        }
    }

    /// Column sums only: the target marginal of a `k × l` plan is pinned while
    /// the source marginal is free.
    pub fn target_marginal(k: usize, target: &[f64]) -> Self {
        let rows = (0..target.len())
            .map(|j| (0..k).map(|i| (j * k + i, 1.0)).collect())
            .collect();
        Self {
            n: k * target.len(),
            rows,
            rhs: target.to_vec(),
            structure: ConstraintStructure::Partition,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn structure(&self) -> ConstraintStructure {
        self.structure
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, a)| a * u[j]).sum())
            .collect()
    }

    fn apply_transpose(&self, y: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (row, &yr) in self.rows.iter().zip(y) {
            for &(j, a) in row {
                out[j] += a * yr;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.rows.len(), self.n);
        for (r, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                a[(r, j)] += v;
            }
        }
        a
    }

    /// Largest absolute violation `‖A u − b‖∞`.
    pub fn residual_norm(&self, u: &[f64]) -> f64 {
        self.apply(u)
            .iter()
            .zip(&self.rhs)
            .map(|(au, b)| (au - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    hessian: Hessian,
    linear: Vec<f64>,
    constraints: EqualityConstraints,
}

impl QuadraticProgram {
    pub fn new(
        hessian: Hessian,
        linear: Vec<f64>,
        constraints: EqualityConstraints,
    ) -> Result<Self, QpError> {
        let n = linear.len();
        if constraints.n() != n {
            return Err(QpError::Dimension(format!(
                "{} linear terms but constraints over {} variables",
                n,
                constraints.n()
            )));
        }
        match &hessian {
            Hessian::Zero => {}
            Hessian::Dense(q) => {
                if q.nrows() != n || q.ncols() != n {
                    return Err(QpError::Dimension(format!(
                        "hessian is {}x{}, expected {n}x{n}",
                        q.nrows(),
                        q.ncols()
                    )));
                }
                let scale = q.amax().max(1.0);
                let asym = (q - q.transpose()).amax();
                if asym > 1e-9 * scale {
                    return Err(QpError::NotSymmetric(asym));
                }
            }
            Hessian::LowRank(f) => {
                if f.ncols() != n {
                    return Err(QpError::Dimension(format!(
                        "hessian factor has {} columns, expected {n}",
                        f.ncols()
                    )));
                }
            }
        }
        if linear.iter().any(|c| !c.is_finite()) {
            return Err(QpError::Dimension("non-finite linear term".into()));
        }
        Ok(Self { hessian, linear, constraints })
    }

    pub fn n(&self) -> usize {
        self.linear.len()
    }

    pub fn hessian(&self) -> &Hessian {
        &self.hessian
    }

    pub fn linear(&self) -> &[f64] {
        &self.linear
    }

    pub fn constraints(&self) -> &EqualityConstraints {
        &self.constraints
    }

    pub fn objective(&self, u: &[f64]) -> f64 {
        let qu = self.hessian.apply(u);
        u.iter()
            .zip(&qu)
            .zip(&self.linear)
            .map(|((ui, qi), ci)| ui * (0.5 * qi + ci))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub max_iterations: usize,
    /// Relative tolerance on the duality gap.
    pub tolerance: f64,
    /// Relative tolerance on the primal and dual residuals.
    pub feasibility_tolerance: f64,
    /// Diagonal shift added to the Newton systems.
    pub regularization: f64,
    /// Fraction-to-boundary factor.
    pub step_fraction: f64,
    pub record_trace: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-10,
            feasibility_tolerance: 1e-10,
            regularization: 1e-10,
            step_fraction: 0.995,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: Vec<f64>,
    pub objective: f64,
    pub duality_gap: f64,
    pub iterations: usize,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Constraint row blamed when `status` is `Infeasible`.
    pub infeasible_row: Option<usize>,
    pub trace: Vec<IterationRecord>,
}

impl QpSolution {
    /// Turns a non-converged status into an error carrying the diagnostics.
    pub fn into_converged(self) -> Result<Self, QpError> {
        match self.status {
            QpStatus::Converged => Ok(self),
            QpStatus::Infeasible => Err(QpError::Infeasible {
                row: self.infeasible_row.unwrap_or(0),
            }),
            QpStatus::MaxIter => Err(QpError::MaxIterations {
                iterations: self.iterations,
                gap: self.duality_gap,
                primal_residual: self.primal_residual,
                dual_residual: self.dual_residual,
            }),
        }
    }
}

/// Variables forced to zero by rows of one sign with a zero right-hand side,
/// plus the rows that remain informative.
struct Presolve {
    free: Vec<usize>,
    kept_rows: Vec<usize>,
}

fn presolve(cons: &EqualityConstraints) -> Result<Presolve, QpError> {
    let n = cons.n;
    let mut fixed = vec![false; n];
    for (r, row) in cons.rows.iter().enumerate() {
        let b = cons.rhs[r];
        let nonzero: Vec<&(usize, f64)> = row.iter().filter(|(_, a)| *a != 0.0).collect();
        if nonzero.is_empty() {
            if b != 0.0 {
                return Err(QpError::Infeasible { row: r });
            }
            continue;
        }
        let all_pos = nonzero.iter().all(|(_, a)| *a > 0.0);
        let all_neg = nonzero.iter().all(|(_, a)| *a < 0.0);
        if (all_pos && b < 0.0) || (all_neg && b > 0.0) {
            return Err(QpError::Infeasible { row: r });
        }
        if (all_pos || all_neg) && b == 0.0 {
            for &&(j, _) in &nonzero {
                fixed[j] = true;
            }
        }
    }
    let mut kept_rows = Vec::new();
    for (r, row) in cons.rows.iter().enumerate() {
        let live = row.iter().any(|&(j, a)| a != 0.0 && !fixed[j]);
        if live {
            kept_rows.push(r);
        } else if cons.rhs[r] != 0.0 {
            return Err(QpError::Infeasible { row: r });
        }
    }
    let free = (0..n).filter(|&j| !fixed[j]).collect();
    Ok(Presolve { free, kept_rows })
}

/// The reduced problem handed to the interior-point loop.
struct Reduced {
    hessian: Hessian,
    linear: Vec<f64>,
    cons: EqualityConstraints,
    /// Original indices of the reduced variables.
    free: Vec<usize>,
    /// Original indices of the reduced rows.
    rows: Vec<usize>,
}

fn restrict_constraints(
    cons: &EqualityConstraints,
    free: &[usize],
    kept_rows: &[usize],
) -> EqualityConstraints {
    let mut position = vec![usize::MAX; cons.n];
    for (new, &old) in free.iter().enumerate() {
        position[old] = new;
    }
    let rows = kept_rows
        .iter()
        .map(|&r| {
            cons.rows[r]
                .iter()
                .filter(|&&(j, a)| a != 0.0 && position[j] != usize::MAX)
                .map(|&(j, a)| (position[j], a))
                .collect()
        })
        .collect();
    let rhs = kept_rows.iter().map(|&r| cons.rhs[r]).collect();
    let structure = match cons.structure {
        ConstraintStructure::Transportation { source_rows } => {
            ConstraintStructure::Transportation {
                source_rows: kept_rows.iter().filter(|&&r| r < source_rows).count(),
            }
        }
        s => s,
    };
    EqualityConstraints { n: free.len(), rows, rhs, structure }
}

/// For each variable, the rows in which it appears.
fn column_lists(cons: &EqualityConstraints) -> Vec<Vec<(usize, f64)>> {
    let mut cols = vec![Vec::new(); cons.n];
    for (r, row) in cons.rows.iter().enumerate() {
        for &(j, a) in row {
            cols[j].push((r, a));
        }
    }
    cols
}

fn verify_partition(cons: &EqualityConstraints) -> bool {
    column_lists(cons)
        .iter()
        .all(|c| c.len() == 1 && c[0].1 > 0.0)
}

fn verify_transportation(cons: &EqualityConstraints, source_rows: usize) -> bool {
    column_lists(cons).iter().all(|c| {
        c.len() == 2
            && c.iter().all(|&(_, a)| a == 1.0)
            && (c[0].0 < source_rows) != (c[1].0 < source_rows)
    })
}

/// Drops dependent rows found by Gaussian elimination with full pivoting.
/// Returns the positions (within `cons`) of independent rows, or the first
/// inconsistent row.
fn independent_rows(cons: &EqualityConstraints) -> Result<Vec<usize>, usize> {
    let m = cons.rows.len();
    let n = cons.n;
    let mut a = cons.to_dense();
    let mut b = DVector::from_column_slice(&cons.rhs);
    let scale = a.amax().max(1.0);
    let tol = 1e-10 * scale * (m.max(n) as f64);
    let mut row_order: Vec<usize> = (0..m).collect();
    let mut used_cols = vec![false; n];
    let mut rank = 0;
    while rank < m {
        let mut best = (0.0, 0, 0);
        for r in rank..m {
            for c in 0..n {
                if !used_cols[c] && a[(r, c)].abs() > best.0 {
                    best = (a[(r, c)].abs(), r, c);
                }
            }
        }
        if best.0 <= tol {
            break;
        }
        let (_, pr, pc) = best;
        a.swap_rows(rank, pr);
        b.swap_rows(rank, pr);
        row_order.swap(rank, pr);
        used_cols[pc] = true;
        let pivot = a[(rank, pc)];
        for r in 0..m {
            if r != rank {
                let factor = a[(r, pc)] / pivot;
                if factor != 0.0 {
                    for c in 0..n {
                        a[(r, c)] -= factor * a[(rank, c)];
                    }
                    b[r] -= factor * b[rank];
                }
            }
        }
        rank += 1;
    }
    let b_tol = 1e-9 * b.amax().max(1.0);
    for r in rank..m {
        if b[r].abs() > b_tol {
            return Err(row_order[r]);
        }
    }
    let mut kept: Vec<usize> = row_order[..rank].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Feasible starting point for structured constraints, computed in closed form.
fn structured_start(cons: &EqualityConstraints) -> Option<Vec<f64>> {
    match cons.structure {
        ConstraintStructure::Partition if verify_partition(cons) => {
            let mut u = vec![0.0; cons.n];
            for (row, &b) in cons.rows.iter().zip(&cons.rhs) {
                let len = row.len() as f64;
                for &(j, a) in row {
                    u[j] = b / (len * a);
                }
            }
            Some(u)
        }
        ConstraintStructure::Transportation { source_rows }
            if verify_transportation(cons, source_rows) =>
        {
            let total: f64 = cons.rhs[..source_rows].iter().sum();
            let cols = column_lists(cons);
            Some(
                cols.iter()
                    .map(|c| cons.rhs[c[0].0] * cons.rhs[c[1].0] / total)
                    .collect(),
            )
        }
        _ => None,
    }
}

/// Returns a nonnegative point satisfying `A u = b`, strictly positive on every
/// variable not forced to zero when one exists, or the index of a violated
/// constraint.
///
/// Transportation constraints get the product coupling analytically; general
/// constraints go through a phase-1 linear program.
pub fn feasibility_check(cons: &EqualityConstraints) -> Result<Vec<f64>, QpError> {
    let reduced = reduce(cons)?;
    let start = reduced_start(&reduced)?;
    let mut u = vec![0.0; cons.n];
    for (k, &j) in reduced.free.iter().enumerate() {
        u[j] = start[k];
    }
    Ok(u)
}

/// Presolve plus redundant-row removal, without the objective.
struct ReducedConstraints {
    cons: EqualityConstraints,
    free: Vec<usize>,
    rows: Vec<usize>,
    start: Option<Vec<f64>>,
}

fn reduce(cons: &EqualityConstraints) -> Result<ReducedConstraints, QpError> {
    let pre = presolve(cons)?;
    let mut reduced = restrict_constraints(cons, &pre.free, &pre.kept_rows);
    let mut rows = pre.kept_rows;
    let mut start = None;
    match reduced.structure {
        ConstraintStructure::Transportation { source_rows }
            if verify_transportation(&reduced, source_rows) =>
        {
            let src: f64 = reduced.rhs[..source_rows].iter().sum();
            let tgt: f64 = reduced.rhs[source_rows..].iter().sum();
            if (src - tgt).abs() > 1e-9 * src.abs().max(tgt.abs()).max(1.0) {
                return Err(QpError::Infeasible { row: *rows.last().unwrap() });
            }
            start = structured_start(&reduced);
            // complete bipartite support: exactly one row is dependent
            if reduced.rows.len() > 1 {
                reduced.rows.pop();
                reduced.rhs.pop();
                rows.pop();
            }
        }
        ConstraintStructure::Partition if verify_partition(&reduced) => {
            start = structured_start(&reduced);
        }
        _ => {
            reduced.structure = ConstraintStructure::General;
            let keep = independent_rows(&reduced)
                .map_err(|r| QpError::Infeasible { row: rows[r] })?;
            if keep.len() < reduced.rows.len() {
                reduced = EqualityConstraints {
                    n: reduced.n,
                    rows: keep.iter().map(|&r| reduced.rows[r].clone()).collect(),
                    rhs: keep.iter().map(|&r| reduced.rhs[r]).collect(),
                    structure: ConstraintStructure::General,
                };
                rows = keep.iter().map(|&r| rows[r]).collect();
            }
        }
    }
    Ok(ReducedConstraints {
        cons: reduced,
        free: pre.free,
        rows,
        start,
    })
}

fn reduced_start(rc: &ReducedConstraints) -> Result<Vec<f64>, QpError> {
    if let Some(u) = &rc.start {
        return Ok(u.clone());
    }
    phase_one(&rc.cons)
        .map_err(|r| QpError::Infeasible { row: rc.rows.get(r).copied().unwrap_or(r) })
}

/// Phase 1: minimize the total artificial slack `Σ t` subject to
/// `A u + S t = b`, `u, t ≥ 0`, with `S` the sign pattern of `b`.
fn phase_one(cons: &EqualityConstraints) -> Result<Vec<f64>, usize> {
    let (n, m) = (cons.n, cons.rows.len());
    if m == 0 {
        return Ok(vec![1.0; n]);
    }
    let mut rows = cons.rows.clone();
    for (r, row) in rows.iter_mut().enumerate() {
        let sign = if cons.rhs[r] < 0.0 { -1.0 } else { 1.0 };
        row.push((n + r, sign));
    }
    let aug = EqualityConstraints {
        n: n + m,
        rows,
        rhs: cons.rhs.clone(),
        structure: ConstraintStructure::General,
    };
    let mut linear = vec![0.0; n + m];
    linear[n..].iter_mut().for_each(|c| *c = 1.0);
    let u0 = vec![1.0; n + m];
    let opts = QpOptions {
        tolerance: 1e-12,
        ..QpOptions::default()
    };
    let out = interior_point(&Hessian::Zero, &linear, &aug, u0, &opts);
    let scale = cons.rhs.iter().fold(1.0f64, |acc, b| acc.max(b.abs()));
    let (worst, worst_t) = out.u[n..]
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (r, &t)| if t > acc.1 { (r, t) } else { acc });
    if worst_t > 1e-7 * scale {
        return Err(worst);
    }
    Ok(out.u[..n].iter().map(|&v| v.max(1e-8 * scale)).collect())
}

/// Solves `qp`. Malformed input is an error; infeasibility and exhausted
/// iteration budgets are reported through [`QpSolution::status`].
pub fn solve_qp(qp: &QuadraticProgram, opts: &QpOptions) -> Result<QpSolution, QpError> {
    let n = qp.n();
    let infeasible = |row: usize| QpSolution {
        u: vec![0.0; n],
        objective: f64::NAN,
        duality_gap: f64::INFINITY,
        iterations: 0,
        status: QpStatus::Infeasible,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
        infeasible_row: Some(row),
        trace: Vec::new(),
    };
    let rc = match reduce(&qp.constraints) {
        Ok(rc) => rc,
        Err(QpError::Infeasible { row }) => return Ok(infeasible(row)),
        Err(e) => return Err(e),
    };
    let start = match reduced_start(&rc) {
        Ok(u) => u,
        Err(QpError::Infeasible { row }) => return Ok(infeasible(row)),
        Err(e) => return Err(e),
    };
    let reduced = Reduced {
        hessian: qp.hessian.restrict(&rc.free),
        linear: rc.free.iter().map(|&j| qp.linear[j]).collect(),
        cons: rc.cons,
        free: rc.free,
        rows: rc.rows,
    };
    debug!(
        "qp: {} of {} variables free, {} of {} rows kept",
        reduced.free.len(),
        n,
        reduced.rows.len(),
        qp.constraints.n_rows()
    );
    let inner = interior_point(&reduced.hessian, &reduced.linear, &reduced.cons, start, opts);
    let mut u = vec![0.0; n];
    for (k, &j) in reduced.free.iter().enumerate() {
        u[j] = inner.u[k];
    }
    let primal_residual = qp.constraints.residual_norm(&u);
    Ok(QpSolution {
        objective: qp.objective(&u),
        u,
        duality_gap: inner.gap,
        iterations: inner.iterations,
        status: if inner.converged {
            QpStatus::Converged
        } else {
            QpStatus::MaxIter
        },
        primal_residual,
        dual_residual: inner.dual_residual,
        infeasible_row: None,
        trace: inner.trace,
    })
}

struct InnerResult {
    u: Vec<f64>,
    gap: f64,
    dual_residual: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<IterationRecord>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Largest `α ∈ (0, 1]` keeping `v + α dv ≥ 0`, before the boundary factor.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0, f64::min)
}

fn cholesky_with_shift(mut s: DMatrix<f64>, base: f64) -> Option<Cholesky<f64, Dyn>> {
    let diag_scale = (0..s.nrows()).map(|i| s[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut shift = base * diag_scale;
    for _ in 0..12 {
        if let Some(ch) = Cholesky::new(s.clone()) {
            return Some(ch);
        }
        for i in 0..s.nrows() {
            s[(i, i)] += shift;
        }
        shift *= 100.0;
    }
    None
}

/// Factorized Newton system for one iterate: `K = Q + D` with `D` diagonal,
/// and the Schur complement `S = A K⁻¹ Aᵀ`.
struct Newton<'a> {
    cons: &'a EqualityConstraints,
    d_inv: Vec<f64>,
    kernel: KernelSolve,
    schur: Option<Cholesky<f64, Dyn>>,
}

enum KernelSolve {
    Diagonal,
    Dense(Cholesky<f64, Dyn>),
    /// Woodbury form: factor `F` and Cholesky of `I + F D⁻¹ Fᵀ`.
    LowRank(DMatrix<f64>, Cholesky<f64, Dyn>),
}

impl<'a> Newton<'a> {
    fn build(
        hessian: &Hessian,
        cons: &'a EqualityConstraints,
        cols: &[Vec<(usize, f64)>],
        d: &[f64],
        reg: f64,
    ) -> Option<Self> {
        let n = d.len();
        let m = cons.rows.len();
        let d_inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
        let kernel = match hessian {
            Hessian::Zero => KernelSolve::Diagonal,
            Hessian::Dense(q) => {
                let mut k = q.clone();
                for i in 0..n {
                    k[(i, i)] += d[i];
                }
                KernelSolve::Dense(cholesky_with_shift(k, reg)?)
            }
            Hessian::LowRank(f) => {
                let r = f.nrows();
                let mut c = DMatrix::identity(r, r);
                for a in 0..r {
                    for b in a..r {
                        let v: f64 = (0..n).map(|j| f[(a, j)] * d_inv[j] * f[(b, j)]).sum();
                        c[(a, b)] += v;
                        if a != b {
                            c[(b, a)] += v;
                        }
                    }
                }
                KernelSolve::LowRank(f.clone(), cholesky_with_shift(c, reg)?)
            }
        };
        let mut newton = Newton { cons, d_inv, kernel, schur: None };
        if m > 0 {
            let s = newton.schur_matrix(cols);
            newton.schur = Some(cholesky_with_shift(s, reg)?);
        }
        Some(newton)
    }

    fn schur_matrix(&self, cols: &[Vec<(usize, f64)>]) -> DMatrix<f64> {
        let m = self.cons.rows.len();
        match &self.kernel {
            KernelSolve::Dense(ch) => {
                let n = self.d_inv.len();
                let mut at = DMatrix::zeros(n, m);
                for (r, row) in self.cons.rows.iter().enumerate() {
                    for &(j, a) in row {
                        at[(j, r)] += a;
                    }
                }
                let w = ch.solve(&at);
                at.transpose() * w
            }
            KernelSolve::Diagonal | KernelSolve::LowRank(..) => {
                let mut s = DMatrix::zeros(m, m);
                for (j, col) in cols.iter().enumerate() {
                    let dj = self.d_inv[j];
                    for &(r1, a1) in col {
                        for &(r2, a2) in col {
                            s[(r1, r2)] += a1 * a2 * dj;
                        }
                    }
                }
                if let KernelSolve::LowRank(f, ch) = &self.kernel {
                    let r = f.nrows();
                    let mut g = DMatrix::zeros(m, r);
                    for (row_idx, row) in self.cons.rows.iter().enumerate() {
                        for &(j, a) in row {
                            let w = a * self.d_inv[j];
                            for k in 0..r {
                                g[(row_idx, k)] += w * f[(k, j)];
                            }
                        }
                    }
                    let cg = ch.solve(&g.transpose());
                    s -= &g * cg;
                }
                s
            }
        }
    }

    /// `K⁻¹ v`.
    fn kernel_solve(&self, v: &[f64]) -> Vec<f64> {
        match &self.kernel {
            KernelSolve::Diagonal => v.iter().zip(&self.d_inv).map(|(a, b)| a * b).collect(),
            KernelSolve::Dense(ch) => ch.solve(&DVector::from_column_slice(v)).as_slice().to_vec(),
            KernelSolve::LowRank(f, ch) => {
                let dv: Vec<f64> = v.iter().zip(&self.d_inv).map(|(a, b)| a * b).collect();
                let t = ch.solve(&(f * DVector::from_column_slice(&dv)));
                let ft = f.transpose() * t;
                dv.iter()
                    .zip(ft.iter())
                    .zip(&self.d_inv)
                    .map(|((a, b), di)| a - di * b)
                    .collect()
            }
        }
    }

    /// Solves `K du − Aᵀ dy = g`, `A du = h`.
    fn solve(&self, g: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = g.len();
        let kg = self.kernel_solve(g);
        let dy = match &self.schur {
            Some(ch) => {
                let akg = self.cons.apply(&kg);
                let rhs: Vec<f64> = h.iter().zip(&akg).map(|(a, b)| a - b).collect();
                ch.solve(&DVector::from_vec(rhs)).as_slice().to_vec()
            }
            None => Vec::new(),
        };
        let aty = self.cons.apply_transpose(&dy, n);
        let rhs: Vec<f64> = g.iter().zip(&aty).map(|(a, b)| a + b).collect();
        (self.kernel_solve(&rhs), dy)
    }
}

fn interior_point(
    hessian: &Hessian,
    linear: &[f64],
    cons: &EqualityConstraints,
    u0: Vec<f64>,
    opts: &QpOptions,
) -> InnerResult {
    let n = linear.len();
    let m = cons.rows.len();
    let cols = column_lists(cons);
    let lp = hessian.is_zero();
    let b_norm = inf_norm(&cons.rhs);
    let c_norm = inf_norm(linear);

    let mut u = u0;
    let floor = 1e-12 * u.iter().fold(0.0f64, |a, v| a.max(*v)).max(1e-300);
    u.iter_mut().for_each(|v| *v = v.max(floor));

    // Dual start: least-squares multipliers, shifted to positivity and
    // balanced against the primal point.
    let qu = hessian.apply(&u);
    let grad: Vec<f64> = qu.iter().zip(linear).map(|(a, b)| a + b).collect();
    let mut y = vec![0.0; m];
    if m > 0 {
        let ones = vec![1.0; n];
        if let Some(nw) = Newton::build(&Hessian::Zero, cons, &cols, &ones, 1e-12) {
            y = nw.schur.as_ref().map_or(vec![0.0; m], |ch| {
                ch.solve(&DVector::from_vec(cons.apply(&grad))).as_slice().to_vec()
            });
        }
    }
    let aty = cons.apply_transpose(&y, n);
    let mut z: Vec<f64> = grad.iter().zip(&aty).map(|(g, a)| g - a).collect();
    let zmin = z.iter().fold(f64::INFINITY, |a, v| a.min(*v));
    let shift = (-1.5 * zmin).max(0.0);
    z.iter_mut().for_each(|v| *v += shift);
    let uz = dot(&u, &z);
    let usum: f64 = u.iter().sum();
    let centre = if uz > 0.0 { 0.5 * uz / usum } else { 0.0 };
    let base = 1e-3 * (c_norm + inf_norm(&qu)).max(1.0);
    z.iter_mut().for_each(|v| *v += centre + base);

    let mut trace = Vec::new();
    let mut gap = dot(&u, &z);
    let mut dual_residual = f64::INFINITY;

    for iter in 0..=opts.max_iterations {
        let qu = hessian.apply(&u);
        let au = cons.apply(&u);
        let rp: Vec<f64> = au.iter().zip(&cons.rhs).map(|(a, b)| a - b).collect();
        let aty = cons.apply_transpose(&y, n);
        let rd: Vec<f64> = (0..n).map(|j| qu[j] + linear[j] - aty[j] - z[j]).collect();
        gap = dot(&u, &z);
        let obj = dot(&u, &qu) * 0.5 + dot(&u, linear);
        let p_res = inf_norm(&rp) / (1.0 + b_norm);
        let d_res = inf_norm(&rd) / (1.0 + c_norm + inf_norm(&qu));
        dual_residual = inf_norm(&rd);
        let g_rel = gap / (1.0 + obj.abs());
        debug!("ipm iter {iter}: gap {gap:.3e} primal {p_res:.3e} dual {d_res:.3e}");
        if p_res <= opts.feasibility_tolerance
            && d_res <= opts.feasibility_tolerance
            && g_rel <= opts.tolerance
        {
            return InnerResult { u, gap, dual_residual, iterations: iter, converged: true, trace };
        }
        if iter == opts.max_iterations {
            break;
        }
        let mu = gap / n as f64;

        let d: Vec<f64> = (0..n).map(|j| z[j] / u[j] + opts.regularization).collect();
        let Some(newton) = Newton::build(hessian, cons, &cols, &d, opts.regularization) else {
            debug!("ipm: factorization failed at iteration {iter}");
            break;
        };
        let h: Vec<f64> = rp.iter().map(|v| -v).collect();
        let direction = |rc: &[f64]| {
            let g: Vec<f64> = (0..n).map(|j| -rd[j] - rc[j] / u[j]).collect();
            let (du, dy) = newton.solve(&g, &h);
            let dz: Vec<f64> = (0..n).map(|j| -(rc[j] + z[j] * du[j]) / u[j]).collect();
            (du, dy, dz)
        };

        // predictor
        let rc_aff: Vec<f64> = (0..n).map(|j| u[j] * z[j]).collect();
        let (du_a, _, dz_a) = direction(&rc_aff);
        let (ap, ad) = (max_step(&u, &du_a), max_step(&z, &dz_a));
        let (ap, ad) = if lp { (ap, ad) } else { (ap.min(ad), ap.min(ad)) };
        let mu_aff = (0..n)
            .map(|j| (u[j] + ap * du_a[j]) * (z[j] + ad * dz_a[j]))
            .sum::<f64>()
            / n as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // corrector
        let rc: Vec<f64> = (0..n)
            .map(|j| u[j] * z[j] + du_a[j] * dz_a[j] - sigma * mu)
            .collect();
        let (mut du, mut dy, mut dz) = direction(&rc);
        let mut steps = step_lengths(&u, &z, &du, &dz, opts.step_fraction, lp);
        let new_gap = |s: (f64, f64), du: &[f64], dz: &[f64]| {
            (0..n).map(|j| (u[j] + s.0 * du[j]) * (z[j] + s.1 * dz[j])).sum::<f64>()
        };
        if new_gap(steps, &du, &dz) > gap {
            // fall back to a pure centering direction and backtrack until the
            // gap decreases
            let rc_c: Vec<f64> = (0..n).map(|j| u[j] * z[j] - 0.1 * mu).collect();
            let (du_c, dy_c, dz_c) = direction(&rc_c);
            du = du_c;
            dy = dy_c;
            dz = dz_c;
            steps = step_lengths(&u, &z, &du, &dz, opts.step_fraction, lp);
            let mut tries = 0;
            while new_gap(steps, &du, &dz) > gap && tries < 40 {
                steps = (steps.0 * 0.5, steps.1 * 0.5);
                tries += 1;
            }
        }
        for j in 0..n {
            u[j] += steps.0 * du[j];
            z[j] += steps.1 * dz[j];
        }
        for (yr, dyr) in y.iter_mut().zip(&dy) {
            *yr += steps.1 * dyr;
        }
        if opts.record_trace {
            trace.push(IterationRecord {
                iteration: iter,
                gap,
                primal_residual: p_res,
                dual_residual: d_res,
                step: steps.0.min(steps.1),
            });
        }
    }
    InnerResult {
        u,
        gap,
        dual_residual,
        iterations: opts.max_iterations,
        converged: false,
        trace,
    }
}

fn step_lengths(u: &[f64], z: &[f64], du: &[f64], dz: &[f64], fraction: f64, lp: bool) -> (f64, f64) {
    let ap = (fraction * max_step(u, du)).min(1.0);
    let ad = (fraction * max_step(z, dz)).min(1.0);
    if lp {
        (ap, ad)
    } else {
        let a = ap.min(ad);
        (a, a)
    }
}
