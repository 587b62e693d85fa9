//! Finite-difference Markov-chain approximation of the controlled generator.
//!
//! The second-order part `λ_i ∂_ii` uses central differences. The drift part
//! uses central differences on axes where the scheme stays monotone for every
//! admissible control, and one-sided upwind differences elsewhere. On the box
//! boundary the outward transitions are dropped, which reflects the chain.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use super::grid::Grid;
use crate::error::{check_dim, Error, Result};
use crate::linalg::CsrMatrix;
use crate::model::{neg, ModelParams};

/// Drift discretization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StencilMode {
    /// Central drift wherever it keeps the scheme monotone, upwind elsewhere.
    #[default]
    CentralWhereMonotone,
    /// Upwind drift everywhere.
    Upwind,
}

/// Treatment of the truncation boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Reflecting,
}

/// How the drift along one axis is differenced at one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum AxisKind {
    Central,
    Upwind,
    /// Lower boundary: only the forward neighbour exists.
    Lower,
    /// Upper boundary: only the backward neighbour exists.
    Upper,
}

/// Per-node, per-axis stencil choice, fixed for a solve because the monotone
/// bound holds uniformly over the control set.
#[derive(Clone, Debug)]
pub(crate) struct StencilPlan {
    kinds: Vec<AxisKind>,
    d: usize,
}

impl StencilPlan {
    pub fn new(params: &ModelParams, grid: &Grid, mode: StencilMode) -> Self {
        let d = grid.d();
        let h = grid.spacing();
        let last = grid.per_axis() - 1;
        let mut kinds = Vec::with_capacity(grid.len() * d);
        let mut x = vec![0.0; d];
        let mut b0 = vec![0.0; d];
        let zero = vec![0.0; d * d];
        for node in 0..grid.len() {
            grid.coords_into(node, &mut x);
            params.rates().drift_into(&x, &zero, &mut b0);
            for a in 0..d {
                let idx = grid.axis_index(node, a);
                let kind = if idx == 0 {
                    AxisKind::Lower
                } else if idx == last {
                    AxisKind::Upper
                } else if mode == StencilMode::Upwind {
                    AxisKind::Upwind
                } else {
                    let spread: f64 = (0..d).filter(|&j| j != a).map(|j| (params.gamma()[a] - params.mu(a, j)).abs() * neg(x[j])).sum();
                    let a_ii = 2.0 * params.lambda()[a];
                    if (b0[a].abs() + spread) * h <= a_ii {
                        AxisKind::Central
                    } else {
                        AxisKind::Upwind
                    }
                };
                kinds.push(kind);
            }
        }
        Self { kinds, d }
    }

    #[inline]
    pub fn kind(&self, node: usize, axis: usize) -> AxisKind {
        self.kinds[node * self.d + axis]
    }

    pub fn central_fraction(&self) -> f64 {
        self.kinds.iter().filter(|&&k| k == AxisKind::Central).count() as f64 / self.kinds.len() as f64
    }
}

pub(crate) type Rates = SmallVec<[(usize, f64); 16]>;

/// Transition rates out of `node` given the drift `b` there.
#[inline]
pub(crate) fn node_rates(params: &ModelParams, grid: &Grid, plan: &StencilPlan, node: usize, b: &[f64], out: &mut Rates) {
    out.clear();
    let h = grid.spacing();
    let h2 = h * h;
    for a in 0..grid.d() {
        let s = grid.stride(a);
        let diff = params.lambda()[a] / h2;
        let (fwd, bwd) = match plan.kind(node, a) {
            AxisKind::Central => (diff + b[a] / (2.0 * h), diff - b[a] / (2.0 * h)),
            AxisKind::Upwind => (diff + b[a].max(0.0) / h, diff + (-b[a]).max(0.0) / h),
            AxisKind::Lower => (diff + b[a].max(0.0) / h, 0.0),
            AxisKind::Upper => (0.0, diff + (-b[a]).max(0.0) / h),
        };
        if fwd != 0.0 {
            out.push((node + s, fwd));
        }
        if bwd != 0.0 {
            out.push((node - s, bwd));
        }
    }
}

/// Generator applied to `v` at `node` for the given rates.
#[inline]
pub(crate) fn apply_rates(rates: &Rates, v: &[f64], node: usize) -> f64 {
    let vx = v[node];
    rates.iter().map(|&(y, r)| r * (v[y] - vx)).sum()
}

/// Assembles the generator for a feasible control field (`d²` entries per
/// node, row-major) and verifies that every row is a valid rate row.
pub fn discretize_generator(params: &ModelParams, grid: &Grid, u_field: &[f64], mode: StencilMode) -> Result<CsrMatrix> {
    let plan = StencilPlan::new(params, grid, mode);
    assemble(params, grid, &plan, u_field)
}

pub(crate) fn assemble(params: &ModelParams, grid: &Grid, plan: &StencilPlan, u_field: &[f64]) -> Result<CsrMatrix> {
    let d = grid.d();
    let n = grid.len();
    check_dim("control field", u_field.len(), n * d * d)?;
    let mut x = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut rates = Rates::new();
    let mut rows = Vec::with_capacity(n);
    for node in 0..n {
        grid.coords_into(node, &mut x);
        params.rates().drift_into(&x, &u_field[node * d * d..(node + 1) * d * d], &mut b);
        node_rates(params, grid, plan, node, &b, &mut rates);
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(rates.len() + 1);
        let mut total = 0.0;
        for &(y, r) in &rates {
            if !(r >= 0.0) {
                return Err(Error::Internal(format!("non-monotone generator row at node {node}: rate {r} to node {y}")));
            }
            row.push((y, r));
            total += r;
        }
        row.push((node, -total));
        rows.push(row);
    }
    let g = CsrMatrix::from_rows(n, rows);
    verify_generator(&g)?;
    Ok(g)
}

/// Checks nonnegative off-diagonals and zero row sums.
pub fn verify_generator(g: &CsrMatrix) -> Result<()> {
    for i in 0..g.n() {
        let mut sum = 0.0;
        let mut scale: f64 = 0.0;
        for (j, v) in g.row(i) {
            if j != i && v < 0.0 {
                return Err(Error::Internal(format!("negative off-diagonal rate {v} at ({i}, {j})")));
            }
            sum += v;
            scale = scale.max(v.abs());
        }
        if sum.abs() > 1e-12 * scale.max(1.0) {
            return Err(Error::Internal(format!("generator row {i} sums to {sum}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(ell: f64) -> ModelParams {
        ModelParams::new(vec![1.0], vec![vec![1.0]], vec![1.0], vec![ell], None).unwrap()
    }

    #[test]
    fn constants_are_annihilated() {
        let p = ModelParams::reference();
        let g = Grid::new(2, 2.0, 0.25).unwrap();
        let mut u = vec![0.0; g.len() * 4];
        for node in 0..g.len() {
            let x = g.coords(node);
            // Help wherever feasible, to exercise the control-dependent drift.
            if x[0] > 0.0 && x[1] < 0.0 {
                u[node * 4 + 1] = (x[0] / -x[1]).min(1.0);
            }
        }
        let gen = discretize_generator(&p, &g, &u, StencilMode::CentralWhereMonotone).unwrap();
        let ones = vec![1.0; g.len()];
        let mut out = vec![0.0; g.len()];
        gen.mul_vec(&ones, &mut out);
        assert!(out.iter().all(|&v| v.abs() < 1e-12));
        let up = discretize_generator(&p, &g, &u, StencilMode::Upwind).unwrap();
        up.mul_vec(&ones, &mut out);
        assert!(out.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn second_moment_taylor_check() {
        // b ≡ 0 needs ℓ = 0 and x = 0; V(x) = x² has L V = 2λ + 2 x b.
        let p = one_d(0.0);
        let g = Grid::new(1, 1.0, 1e-3).unwrap();
        let gen = discretize_generator(&p, &g, &vec![0.0; g.len()], StencilMode::CentralWhereMonotone).unwrap();
        let v: Vec<f64> = (0..g.len()).map(|n| g.coords(n)[0].powi(2)).collect();
        let mut out = vec![0.0; g.len()];
        gen.mul_vec(&v, &mut out);
        assert!((out[g.origin()] - 2.0).abs() < 1e-6, "{}", out[g.origin()]);
        // Away from the origin the central stencil is exact for quadratics.
        let node = g.origin() + 300;
        let x = g.coords(node)[0];
        assert!((out[node] - (2.0 - 2.0 * x * x)).abs() < 1e-6);
    }

    #[test]
    fn upwind_is_used_where_central_would_lose_monotonicity() {
        let p = ModelParams::reference();
        let g = Grid::new(2, 6.0, 1.0).unwrap();
        let plan = StencilPlan::new(&p, &g, StencilMode::CentralWhereMonotone);
        assert!(plan.central_fraction() < 1.0);
        let gen = assemble(&p, &g, &plan, &vec![0.0; g.len() * 4]).unwrap();
        verify_generator(&gen).unwrap();
    }
}
