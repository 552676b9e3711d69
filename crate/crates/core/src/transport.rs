//! Ground costs, discrete Kantorovich transport and p-Wasserstein distances.
//!
//! Plans are `k × l` matrices whose entry `(i, j)` is the mass moved from
//! source point `x_i` to target point `z_j`. The linear program
//!
//! ```text
//!     minimize  Σ c_ij u_ij   subject to  U 1 = p_x,  Uᵀ 1 = p_z,  U ≥ 0
//! ```
//!
//! goes through the same interior-point engine as the assimilation QP with a
//! zero Hessian.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::histogram::{ProbabilityHistogram, SupportGrid};
use crate::qpsolve::{solve_qp, EqualityConstraints, Hessian, QpError, QpOptions, QuadraticProgram};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("ground cost exponent must be positive, got {0}")]
    InvalidExponent(f64),
    #[error("cost matrix is {rows}x{cols} but histograms have {k} and {l} bins")]
    DimensionMismatch { rows: usize, cols: usize, k: usize, l: usize },
    #[error("transport solver failed: {0}")]
    Solver(#[from] QpError),
}

/// `c_ij = |x_i − z_j|^p` between two grids.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundCostMatrix {
    costs: DMatrix<f64>,
    p: f64,
}

impl GroundCostMatrix {
    pub fn costs(&self) -> &DMatrix<f64> {
        &self.costs
    }

    pub fn exponent(&self) -> f64 {
        self.p
    }

    pub fn shape(&self) -> (usize, usize) {
        self.costs.shape()
    }

    /// Costs in plan vector order (`index = j·k + i`).
    pub fn to_plan_vector(&self) -> Vec<f64> {
        self.costs.as_slice().to_vec()
    }
}

pub fn cost_matrix(
    src: &SupportGrid,
    tgt: &SupportGrid,
    p: f64,
) -> Result<GroundCostMatrix, TransportError> {
    if !(p.is_finite() && p > 0.0) {
        return Err(TransportError::InvalidExponent(p));
    }
    let costs = DMatrix::from_fn(src.len(), tgt.len(), |i, j| {
        let d = (src.points()[i] - tgt.points()[j]).abs();
        if p == 2.0 {
            d * d
        } else {
            d.powf(p)
        }
    });
    Ok(GroundCostMatrix { costs, p })
}

/// Nonnegative mass flows between two support grids.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    flows: DMatrix<f64>,
    source_grid: SupportGrid,
    target_grid: SupportGrid,
}

impl TransportPlan {
    /// Builds a plan from a vector in column-major plan order, clipping
    /// round-off negatives to zero.
    pub fn from_plan_vector(
        source_grid: SupportGrid,
        target_grid: SupportGrid,
        u: &[f64],
    ) -> Self {
        let flows = DMatrix::from_iterator(
            source_grid.len(),
            target_grid.len(),
            u.iter().map(|v| v.max(0.0)),
        );
        Self { flows, source_grid, target_grid }
    }

    pub fn flows(&self) -> &DMatrix<f64> {
        &self.flows
    }

    pub fn source_grid(&self) -> &SupportGrid {
        &self.source_grid
    }

    pub fn target_grid(&self) -> &SupportGrid {
        &self.target_grid
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.flows.row_iter().map(|r| r.sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.flows.column_iter().map(|c| c.sum()).collect()
    }

    /// `tr(Cᵀ U)`.
    pub fn cost(&self, cost: &GroundCostMatrix) -> f64 {
        self.flows.dot(&cost.costs)
    }
}

// distances are p-th roots of the cost, so the gap is held much tighter than
// the residuals
fn kantorovich_options() -> QpOptions {
    QpOptions {
        tolerance: 1e-13,
        ..QpOptions::default()
    }
}

/// Optimal plan between `px` and `pz` under `cost`.
pub fn solve_kantorovich(
    px: &ProbabilityHistogram,
    pz: &ProbabilityHistogram,
    cost: &GroundCostMatrix,
) -> Result<TransportPlan, TransportError> {
    let (rows, cols) = cost.shape();
    if rows != px.len() || cols != pz.len() {
        return Err(TransportError::DimensionMismatch { rows, cols, k: px.len(), l: pz.len() });
    }
    let cons = EqualityConstraints::transportation(px.masses(), pz.masses());
    let qp = QuadraticProgram::new(Hessian::Zero, cost.to_plan_vector(), cons)?;
    let sol = solve_qp(&qp, &kantorovich_options())?.into_converged()?;
    Ok(TransportPlan::from_plan_vector(
        px.grid().clone(),
        pz.grid().clone(),
        &sol.u,
    ))
}

/// North-west corner coupling of two histograms on sorted grids: mass is
/// moved in increasing order on both sides. Optimal for any convex ground
/// cost of `x − z`, in particular `|x − z|^p` with `p ≥ 1`.
pub fn monotone_plan(px: &ProbabilityHistogram, pz: &ProbabilityHistogram) -> TransportPlan {
    let (a, b) = (px.masses(), pz.masses());
    let mut flows = DMatrix::zeros(a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0], b[0]);
    while i < a.len() && j < b.len() {
        let m = ra.min(rb);
        flows[(i, j)] += m;
        ra -= m;
        rb -= m;
        // advance whichever side ran out; the last cells absorb round-off
        if ra <= rb && i + 1 < a.len() {
            i += 1;
            ra += a[i];
        } else if j + 1 < b.len() {
            j += 1;
            rb += b[j];
        } else if i + 1 < a.len() {
            i += 1;
            ra += a[i];
        } else {
            break;
        }
    }
    TransportPlan { flows, source_grid: px.grid().clone(), target_grid: pz.grid().clone() }
}

/// `W_p(px, pz)`, the p-th root of the optimal transport cost under
/// `|x − z|^p`. For `p ≥ 1` the monotone coupling is used directly;
/// otherwise the Kantorovich LP is solved.
pub fn wasserstein(
    px: &ProbabilityHistogram,
    pz: &ProbabilityHistogram,
    p: f64,
) -> Result<f64, TransportError> {
    let cost = cost_matrix(px.grid(), pz.grid(), p)?;
    let plan = if p >= 1.0 { monotone_plan(px, pz) } else { solve_kantorovich(px, pz, &cost)? };
    Ok(plan.cost(&cost).max(0.0).powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(points: &[f64], masses: &[f64]) -> ProbabilityHistogram {
        ProbabilityHistogram::new(SupportGrid::from_points(points.to_vec()).unwrap(), masses.to_vec()).unwrap()
    }

    #[test]
    fn cost_matrix_examples() {
        let a = SupportGrid::from_points(vec![0.0, 1.0]).unwrap();
        let b = SupportGrid::from_points(vec![0.0, 2.0]).unwrap();
        let c = cost_matrix(&a, &b, 2.0).unwrap();
        assert_eq!(c.costs(), &DMatrix::from_row_slice(2, 2, &[0.0, 4.0, 1.0, 1.0]));

        let g = SupportGrid::new(-1.0, 2.0, 4).unwrap();
        for p in [0.5, 1.0, 2.0, 3.0] {
            let c = cost_matrix(&g, &g, p).unwrap();
            assert!((0..4).all(|i| c.costs()[(i, i)] == 0.0));
            assert!(c.costs().iter().all(|&v| v >= 0.0));
        }

        assert!(matches!(cost_matrix(&a, &b, 0.0), Err(TransportError::InvalidExponent(_))));
        assert!(matches!(cost_matrix(&a, &b, -1.0), Err(TransportError::InvalidExponent(_))));
    }

    #[test]
    fn single_point_cost() {
        // grids need two points, so pad with a zero-mass neighbour
        let a = hist(&[0.0, 1.0], &[1.0, 0.0]);
        let b = hist(&[3.0, 4.0], &[1.0, 0.0]);
        assert!((wasserstein(&a, &b, 1.0).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn identity_transport() {
        let a = hist(&[0.0, 1.0, 2.0, 3.0], &[0.1, 0.4, 0.3, 0.2]);
        let cost = cost_matrix(a.grid(), a.grid(), 2.0).unwrap();
        let plan = solve_kantorovich(&a, &a, &cost).unwrap();
        assert!(plan.cost(&cost) < 1e-9);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(plan.flows()[(i, j)] < 1e-9);
                }
            }
        }
        assert!(wasserstein(&a, &a, 2.0).unwrap() <= 1e-6);
    }

    #[test]
    fn pure_translation() {
        let a = hist(&[0.0, 1.0], &[0.5, 0.5]);
        let b = hist(&[1.0, 2.0], &[0.5, 0.5]);
        let cost = cost_matrix(a.grid(), b.grid(), 2.0).unwrap();
        let plan = solve_kantorovich(&a, &b, &cost).unwrap();
        assert!((plan.cost(&cost) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn forced_plan() {
        // a single target point forces every unit of mass onto it
        let a = hist(&[0.0, 1.0], &[0.5, 0.5]);
        let b = hist(&[2.0, 3.0], &[1.0, 0.0]);
        let cost = cost_matrix(a.grid(), b.grid(), 2.0).unwrap();
        let plan = solve_kantorovich(&a, &b, &cost).unwrap();
        assert!((plan.cost(&cost) - 2.5).abs() < 1e-8);
    }

    #[test]
    fn dirac_distance() {
        let g = SupportGrid::new(0.0, 3.0, 4).unwrap();
        let a = ProbabilityHistogram::dirac(g.clone(), 0.0);
        let b = ProbabilityHistogram::dirac(g, 3.0);
        assert!((wasserstein(&a, &b, 2.0).unwrap() - 3.0).abs() < 1e-8);
    }

    #[test]
    fn monotone_matches_lp() {
        let a = hist(&[0.0, 1.0, 2.0, 3.0], &[0.1, 0.4, 0.3, 0.2]);
        let b = hist(&[-1.0, 0.5, 2.0], &[0.6, 0.0, 0.4]);
        for p in [1.0, 2.0, 3.0] {
            let cost = cost_matrix(a.grid(), b.grid(), p).unwrap();
            let lp = solve_kantorovich(&a, &b, &cost).unwrap().cost(&cost);
            let nw = monotone_plan(&a, &b);
            assert!((nw.cost(&cost) - lp).abs() < 1e-8, "p = {p}");
            for (s, m) in nw.row_sums().iter().zip(a.masses()) {
                assert!((s - m).abs() < 1e-12);
            }
            for (s, m) in nw.column_sums().iter().zip(b.masses()) {
                assert!((s - m).abs() < 1e-12);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn monotone_is_optimal(
            wa in proptest::collection::vec(0.0f64..1.0, 5),
            wb in proptest::collection::vec(0.0f64..1.0, 4),
            shift in -3.0f64..3.0,
        ) {
            proptest::prop_assume!(wa.iter().sum::<f64>() > 0.1 && wb.iter().sum::<f64>() > 0.1);
            let a = ProbabilityHistogram::from_weights(SupportGrid::new(0.0, 4.0, 5).unwrap(), &wa).unwrap();
            let b = ProbabilityHistogram::from_weights(SupportGrid::new(shift, shift + 2.0, 4).unwrap(), &wb).unwrap();
            let cost = cost_matrix(a.grid(), b.grid(), 2.0).unwrap();
            let lp = solve_kantorovich(&a, &b, &cost).unwrap().cost(&cost);
            proptest::prop_assert!((monotone_plan(&a, &b).cost(&cost) - lp).abs() < 1e-7 * lp.max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let a = hist(&[0.0, 1.0], &[0.5, 0.5]);
        let b = hist(&[0.0, 1.0, 2.0], &[0.2, 0.3, 0.5]);
        let cost = cost_matrix(a.grid(), a.grid(), 2.0).unwrap();
        assert!(matches!(
            solve_kantorovich(&a, &b, &cost),
            Err(TransportError::DimensionMismatch { .. })
        ));
    }
}
