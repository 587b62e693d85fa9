//! The state-dependent control set `M(x)`, feasibility repair, and the
//! per-state Hamiltonian minimization.

mod reduced;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::cost::CostSpec;
use crate::error::{check_dim, Error, Result};
use crate::model::{neg, pos, ControlMatrix, ModelParams};

pub(crate) use reduced::{Objective, Reduced, Vars};

/// Objective-value tolerance below which a solve is considered exact.
pub const DEFAULT_TOL_OBJECTIVE: f64 = 1e-11;

/// A state together with the derived positive/negative parts and the routing mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityContext {
    x: Vec<f64>,
    xplus: Vec<f64>,
    xminus: Vec<f64>,
    mask: Vec<bool>,
}

impl FeasibilityContext {
    pub fn new(params: &ModelParams, x: &[f64]) -> Result<Self> {
        check_dim("state", x.len(), params.d())?;
        Self::with_mask(x, params.mask().to_vec())
    }

    pub fn with_mask(x: &[f64], mask: Vec<bool>) -> Result<Self> {
        check_dim("routing mask", mask.len(), x.len() * x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("state has non-finite components".into()));
        }
        Ok(Self { x: x.to_vec(), xplus: x.iter().map(|&v| pos(v)).collect(), xminus: x.iter().map(|&v| neg(v)).collect(), mask })
    }

    pub fn d(&self) -> usize {
        self.x.len()
    }
    pub fn x(&self) -> &[f64] {
        &self.x
    }
    pub fn xplus(&self) -> &[f64] {
        &self.xplus
    }
    pub fn xminus(&self) -> &[f64] {
        &self.xminus
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

/// Settings of the per-state minimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArgminConfig {
    pub epsilon: f64,
    pub tol_objective: f64,
    pub max_iters: usize,
    pub restarts: usize,
    /// Use the iterative solver even where a closed form exists.
    #[serde(default)]
    pub force_iterative: bool,
}

impl ArgminConfig {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon, tol_objective: DEFAULT_TOL_OBJECTIVE, max_iters: 20_000, restarts: 2, force_iterative: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Argument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.tol_objective > 0.0) {
            return Err(Error::Argument("tol_objective must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Argument("max_iters must be > 0".into()));
        }
        if self.restarts == 0 || (self.epsilon > 0.0 && self.restarts < 2) {
            return Err(Error::Argument("restarts must be >= 2 when epsilon > 0".into()));
        }
        Ok(())
    }
}

/// Membership of `u` in `M(x)` up to `slack`.
pub fn contains(ctx: &FeasibilityContext, u: &ControlMatrix, slack: f64) -> Result<bool> {
    if !(slack >= 0.0) {
        return Err(Error::Argument(format!("slack must be >= 0, got {slack}")));
    }
    check_dim("control", u.d(), ctx.d())?;
    Ok(contains_flat(ctx.x(), ctx.mask(), u.as_slice(), slack))
}

/// Unchecked membership test on a flat row-major control.
pub(crate) fn contains_flat(x: &[f64], mask: &[bool], u: &[f64], slack: f64) -> bool {
    let d = x.len();
    for i in 0..d {
        let mut col = 0.0;
        let mut row = 0.0;
        for k in 0..d {
            let v = u[k * d + i];
            if k == i {
                if v != 0.0 {
                    return false;
                }
            } else {
                if !(v >= -slack && v <= 1.0 + slack) || (!mask[k * d + i] && v > slack) {
                    return false;
                }
                col += v;
            }
            if k != i {
                row += u[i * d + k] * neg(x[k]);
            }
        }
        if col > 1.0 + slack || row > pos(x[i]) + slack {
            return false;
        }
    }
    true
}

/// `p·b(x, u) + r(q(x, u)⁺) + ε‖u‖²` evaluated directly from the model formulas.
pub fn hamiltonian_objective(params: &ModelParams, cost: &CostSpec, x: &[f64], p: &[f64], u: &ControlMatrix, epsilon: f64) -> Result<f64> {
    let d = params.d();
    check_dim("state", x.len(), d)?;
    check_dim("gradient", p.len(), d)?;
    check_dim("control", u.d(), d)?;
    Ok(objective_flat(params, cost, x, p, u.as_slice(), epsilon))
}

pub(crate) fn objective_flat(params: &ModelParams, cost: &CostSpec, x: &[f64], p: &[f64], u: &[f64], epsilon: f64) -> f64 {
    let d = x.len();
    let mut b: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
    params.rates().drift_into(x, u, &mut b);
    let mut q: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
    let rq = cost.control_cost_flat(x, u, &mut q);
    let pb: f64 = p.iter().zip(&b).map(|(a, c)| a * c).sum();
    pb + rq + epsilon * u.iter().map(|v| v * v).sum::<f64>()
}

/// Shrink-and-zero repair of a control feasible at `y` into one feasible at `x`.
///
/// With `δ = |x − y|^{1/2}`, rows whose large entries (those above `θδ`) touch
/// at most `δ` of negative mass are zeroed, and the remaining large entries are
/// shrunk by `θδ`. Small entries are dropped. A final scaling step guarantees
/// membership in `M(x)` when `x` and `y` are far apart.
pub fn repair_to(ctx_target: &FeasibilityContext, u: &ControlMatrix, y: &[f64], theta: f64) -> Result<ControlMatrix> {
    let d = ctx_target.d();
    check_dim("source state", y.len(), d)?;
    check_dim("control", u.d(), d)?;
    if !(theta > d as f64) {
        return Err(Error::Argument(format!("theta must exceed d = {d}, got {theta}")));
    }
    let ctx_y = FeasibilityContext::with_mask(y, ctx_target.mask().to_vec())?;
    if !contains(&ctx_y, u, 1e-9)? {
        return Err(Error::Precondition("control is not feasible at the source state".into()));
    }
    let x = ctx_target.x();
    let dist = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    if dist == 0.0 {
        return Ok(u.clone());
    }
    let delta = dist.sqrt();
    let cut = theta * delta;
    let mut out = ControlMatrix::zeros(d);
    for i in 0..d {
        let heavy: f64 = (0..d).filter(|&j| j != i && u.get(i, j) > cut).map(|j| neg(y[j])).sum();
        if heavy <= delta {
            continue;
        }
        for j in 0..d {
            if j != i && u.get(i, j) > cut {
                out.set(i, j, u.get(i, j) - cut);
            }
        }
    }
    if !contains_flat(x, ctx_target.mask(), out.as_slice(), 0.0) {
        scale_into_set(x, out.as_mut_slice());
    }
    Ok(out)
}

/// Makes a nonnegative zero-diagonal control feasible at `x` by clamping and
/// scaling columns, then rows, down.
pub(crate) fn scale_into_set(x: &[f64], u: &mut [f64]) {
    let d = x.len();
    for v in u.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    for i in 0..d {
        u[i * d + i] = 0.0;
    }
    for j in 0..d {
        let s: f64 = (0..d).map(|k| u[k * d + j]).sum();
        if s > 1.0 {
            (0..d).for_each(|k| u[k * d + j] /= s);
        }
    }
    for i in 0..d {
        let s: f64 = (0..d).map(|j| u[i * d + j] * neg(x[j])).sum();
        let cap = pos(x[i]);
        if s > cap {
            let f = if s > 0.0 { cap / s } else { 0.0 };
            (0..d).for_each(|j| u[i * d + j] *= f);
        }
    }
}

/// Reusable per-state minimizer of `p·b(x, u) + r̃_ε(x, u)` over `M(x)`.
#[derive(Clone, Debug)]
pub struct HamiltonianMinimizer<'a> {
    params: &'a ModelParams,
    cost: &'a CostSpec,
    cfg: ArgminConfig,
}

/// Outcome of one minimization.
#[derive(Clone, Debug, PartialEq)]
pub struct ArgminReport {
    pub value: f64,
    pub iterations: usize,
    pub gap: f64,
}

impl<'a> HamiltonianMinimizer<'a> {
    pub fn new(params: &'a ModelParams, cost: &'a CostSpec, cfg: ArgminConfig) -> Result<Self> {
        cfg.validate()?;
        check_dim("cost", cost.d(), params.d())?;
        Ok(Self { params, cost, cfg })
    }

    pub fn config(&self) -> &ArgminConfig {
        &self.cfg
    }

    /// Writes the minimizer at `(x, p)` into the flat control `out` and returns
    /// the objective. At `ε = 0` the lexicographically smallest optimal vertex
    /// is returned for linear costs.
    pub fn argmin_into(&self, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<ArgminReport> {
        let red = Reduced::new(x, self.params.mask());
        self.argmin_reduced(&red, x, p, None, out)
    }

    /// As [`Self::argmin_into`], starting the iterative solver from `start`.
    pub fn argmin_from(&self, x: &[f64], p: &[f64], start: &[f64], out: &mut [f64]) -> Result<ArgminReport> {
        let red = Reduced::new(x, self.params.mask());
        self.argmin_reduced(&red, x, p, Some(start), out)
    }

    pub(crate) fn argmin_reduced(
        &self,
        red: &Reduced,
        x: &[f64],
        p: &[f64],
        start: Option<&[f64]>,
        out: &mut [f64],
    ) -> Result<ArgminReport> {
        let eps = self.cfg.epsilon;
        let obj = Objective::new(self.params, self.cost, red, x, p, eps);
        let n = red.n();
        let mut v: Vars = SmallVec::from_elem(0.0, n);
        let mut report = ArgminReport { value: 0.0, iterations: 0, gap: 0.0 };
        if n > 0 {
            let linear = self.cost.is_linear();
            if !self.cfg.force_iterative && linear && eps > 0.0 && red.singleton {
                obj.solve_linear_quadratic(&mut v);
            } else if !self.cfg.force_iterative && red.singleton && (eps > 0.0 || !linear) {
                obj.solve_separable(&mut v);
            } else if !self.cfg.force_iterative && linear && eps == 0.0 {
                obj.solve_lp(red.vertices().as_deref(), &mut v)?;
            } else {
                let verts = red.vertices();
                let s: Vars = match start {
                    Some(u) => red.gather(u),
                    None => SmallVec::from_elem(0.0, n),
                };
                let (it, gap) = obj.solve_fista(&s, verts.as_deref(), self.cfg.tol_objective, self.cfg.max_iters, &mut v)?;
                report.iterations = it;
                report.gap = gap;
            }
        }
        red.scatter(&v, out);
        report.value = obj.value(&v);
        Ok(report)
    }
}

fn check_point(params: &ModelParams, ctx: &FeasibilityContext, p: &[f64]) -> Result<()> {
    check_dim("state", ctx.d(), params.d())?;
    check_dim("gradient", p.len(), params.d())?;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("gradient has non-finite components".into()));
    }
    Ok(())
}

/// Deterministic, spread-out starting points for the uniqueness cross-check.
fn restart_points(red: &Reduced, count: usize) -> Vec<Vars> {
    let n = red.n();
    let mut out = Vec::with_capacity(count);
    for r in 0..count {
        let v: Vars = (0..n)
            .map(|k| match r {
                0 => 0.0,
                1 => red.cap[k],
                _ => {
                    // Weyl sequence in [0, 1).
                    let a = (r as f64 * 0.618_033_988_749_895 + k as f64 * 0.414_213_562_373_095).fract();
                    a * red.cap[k]
                }
            })
            .collect();
        out.push(v);
    }
    out
}

/// The unique minimizer of `p·b(x, u) + r̃_ε(x, u)` over `M(x)` for `ε > 0`.
///
/// The iterative solver is run from `cfg.restarts` starting points and the
/// results must agree to 1e-6.
pub fn argmin_hamiltonian(
    params: &ModelParams,
    cost: &CostSpec,
    ctx: &FeasibilityContext,
    p: &[f64],
    cfg: &ArgminConfig,
) -> Result<ControlMatrix> {
    check_point(params, ctx, p)?;
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Precondition("argmin_hamiltonian needs epsilon > 0; use hamiltonian_h for the unperturbed value".into()));
    }
    let minimizer = HamiltonianMinimizer::new(params, cost, cfg.clone())?;
    let red = Reduced::new(ctx.x(), ctx.mask());
    let d = params.d();
    let mut best = ControlMatrix::zeros(d);
    let first = minimizer.argmin_reduced(&red, ctx.x(), p, None, best.as_mut_slice())?;
    let iterative = cfg.force_iterative || !red.singleton;
    if iterative && red.n() > 0 {
        let mut best_value = first.value;
        let mut u = ControlMatrix::zeros(d);
        let mut start = vec![0.0; d * d];
        for s in restart_points(&red, cfg.restarts).iter().skip(1) {
            red.scatter(s, &mut start);
            let rep = minimizer.argmin_reduced(&red, ctx.x(), p, Some(&start), u.as_mut_slice())?;
            let spread = u.max_abs_diff(&best);
            if spread > 1e-6 {
                return Err(Error::Solver {
                    message: format!("restarts disagree by {spread:.3e}"),
                    iterations: rep.iterations,
                    gap: rep.gap,
                    last_iterate: u.as_slice().to_vec(),
                });
            }
            if rep.value < best_value {
                best_value = rep.value;
                best = u.clone();
            }
        }
    }
    Ok(best)
}

/// `H_ε(x, p) = min_{u ∈ M(x)} p·b(x, u) + r̃_ε(x, u)` for `ε > 0`.
pub fn hamiltonian_h_eps(params: &ModelParams, cost: &CostSpec, ctx: &FeasibilityContext, p: &[f64], epsilon: f64) -> Result<f64> {
    let u = argmin_hamiltonian(params, cost, ctx, p, &ArgminConfig::new(epsilon))?;
    hamiltonian_objective(params, cost, ctx.x(), p, &u, epsilon)
}

/// Perturbation ladder used for the unperturbed Hamiltonian of nonlinear costs.
pub const EPSILON_LADDER: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// `H(x, p) = inf_{u ∈ M(x)} p·b(x, u) + r̃(x, u)`.
///
/// Exact vertex enumeration for linear costs; otherwise a Richardson
/// extrapolation of `H_ε` along [`EPSILON_LADDER`], clamped to the bracket
/// `[H_ε − ε·d, H_ε]` at the smallest ε.
pub fn hamiltonian_h(params: &ModelParams, cost: &CostSpec, ctx: &FeasibilityContext, p: &[f64]) -> Result<f64> {
    check_point(params, ctx, p)?;
    let red = Reduced::new(ctx.x(), ctx.mask());
    if cost.is_linear() {
        let verts = if red.singleton { None } else { red.vertices() };
        if red.singleton || verts.is_some() {
            let obj = Objective::new(params, cost, &red, ctx.x(), p, 0.0);
            let mut v: Vars = SmallVec::from_elem(0.0, red.n());
            obj.solve_lp(verts.as_deref(), &mut v)?;
            return Ok(obj.value(&v));
        }
    }
    let vals: Vec<f64> = EPSILON_LADDER.iter().map(|&e| hamiltonian_h_eps(params, cost, ctx, p, e)).collect::<Result<_>>()?;
    let (e1, e2) = (EPSILON_LADDER[1], EPSILON_LADDER[2]);
    let (h1, h2) = (vals[1], vals[2]);
    let extrapolated = (e1 * h2 - e2 * h1) / (e1 - e2);
    let lo = h2 - e2 * params.d() as f64;
    Ok(extrapolated.clamp(lo, h2))
}

/// Hard limit on the brute-force candidate count.
pub const BRUTE_FORCE_CAP: u64 = 100_000_000;

/// Exhaustive search over the uniform grid on `[0, 1]^{d(d−1)}`, keeping feasible
/// points only. Returns the first minimizer in enumeration order.
pub fn brute_force_argmin(
    params: &ModelParams,
    cost: &CostSpec,
    ctx: &FeasibilityContext,
    p: &[f64],
    epsilon: f64,
    grid_points: usize,
) -> Result<(ControlMatrix, f64)> {
    check_point(params, ctx, p)?;
    if grid_points < 3 {
        return Err(Error::Argument("grid_points must be >= 3".into()));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Argument("epsilon must be >= 0".into()));
    }
    let d = params.d();
    // Masked entries must be 0 in every feasible point, so they are not enumerated.
    let free: Vec<usize> = (0..d * d).filter(|&f| f / d != f % d && ctx.mask()[f]).collect();
    let total = (grid_points as f64).powi(free.len() as i32);
    if total > BRUTE_FORCE_CAP as f64 {
        return Err(Error::Capacity(format!("{grid_points}^{} = {total:.3e} candidates exceeds the cap of {BRUTE_FORCE_CAP}", free.len())));
    }
    let step = 1.0 / (grid_points - 1) as f64;
    let mut digits = vec![0usize; free.len()];
    let mut u = vec![0.0; d * d];
    let mut best = (vec![0.0; d * d], f64::INFINITY);
    loop {
        for (slot, &f) in free.iter().enumerate() {
            u[f] = digits[slot] as f64 * step;
        }
        if contains_flat(ctx.x(), ctx.mask(), &u, 0.0) {
            let val = objective_flat(params, cost, ctx.x(), p, &u, epsilon);
            if val < best.1 {
                best = (u.clone(), val);
            }
        }
        let mut pos = 0;
        loop {
            if pos == digits.len() {
                return Ok((ControlMatrix::from_flat(d, &best.0)?, best.1));
            }
            digits[pos] += 1;
            if digits[pos] < grid_points {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
    }
}

/// Upper bound on how much a grid search with `grid_points` per axis can
/// overshoot the true minimum, given the exact minimizer `u`: the first-order
/// change of the objective from the grid point below `u` up to `u`.
pub fn grid_resolution_bound(
    params: &ModelParams,
    cost: &CostSpec,
    x: &[f64],
    p: &[f64],
    u: &ControlMatrix,
    epsilon: f64,
    grid_points: usize,
) -> Result<f64> {
    let d = params.d();
    check_dim("state", x.len(), d)?;
    check_dim("gradient", p.len(), d)?;
    let step = 1.0 / (grid_points.max(2) - 1) as f64;
    let mut floor = u.clone();
    for i in 0..d {
        for j in 0..d {
            if i != j {
                floor.set(i, j, (u.get(i, j) / step + 1e-9).floor() * step);
            }
        }
    }
    let mut q = vec![0.0; d];
    crate::model::queue_map_into(x, floor.as_slice(), &mut q);
    let qp: Vec<f64> = q.iter().map(|&v| pos(v)).collect();
    let mut rq = vec![0.0; d];
    cost.grad_into(&qp, &mut rq);
    let gamma = params.gamma();
    let mut bound = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let xm = neg(x[j]);
            let g = p[i] * (gamma[i] - params.mu(i, j)) * xm - rq[i] * xm + 2.0 * epsilon * floor.get(i, j);
            bound += g.abs() * step;
        }
    }
    Ok(bound)
}
