//! Policy iteration for the discounted and ergodic HJB equations on the grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use super::generator::{apply_rates, assemble, node_rates, AxisKind, Boundary, Rates, StencilMode, StencilPlan};
use super::grid::Grid;
use crate::cost::CostSpec;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{bicgstab, CsrMatrix, Ilu0, KrylovConfig};
use crate::model::{ControlMatrix, ModelParams};
use crate::policy::MarkovPolicy;
use crate::polytope::{ArgminConfig, HamiltonianMinimizer, Reduced, Vars};

/// Starting policy for policy iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialPolicy {
    /// Never help.
    #[default]
    Zero,
    /// Help as much as the control set allows, entry by entry.
    FullHelp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub tol_pde: f64,
    pub tol_policy: f64,
    pub max_outer: usize,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default)]
    pub stencil: StencilMode,
    #[serde(default)]
    pub initial_policy: InitialPolicy,
    /// Backward-error target of the policy-evaluation linear solves.
    #[serde(default = "default_linear_tol")]
    pub linear_tol: f64,
}

fn default_linear_tol() -> f64 {
    1e-14
}

impl SolverConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            alpha: None,
            tol_pde: 1e-6,
            tol_policy: 1e-9,
            max_outer: 100,
            boundary: Boundary::Reflecting,
            stencil: StencilMode::CentralWhereMonotone,
            initial_policy: InitialPolicy::Zero,
            linear_tol: default_linear_tol(),
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_initial(mut self, initial: InitialPolicy) -> Self {
        self.initial_policy = initial;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Argument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Argument(format!("alpha must lie in (0, 1), got {a}")));
            }
        }
        if !(self.tol_pde > 0.0 && self.tol_policy > 0.0 && self.linear_tol > 0.0) {
            return Err(Error::Argument("tolerances must be > 0".into()));
        }
        if self.max_outer == 0 {
            return Err(Error::Argument("max_outer must be >= 1".into()));
        }
        Ok(())
    }
}

/// Solver bookkeeping stored with a solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveMeta {
    pub epsilon: f64,
    pub alpha: Option<f64>,
    pub iterations: usize,
    pub max_residual: f64,
    pub residual_history: Vec<f64>,
    /// Value at the origin removed by the normalization (discounted solves).
    pub value_offset: f64,
    pub linear_iterations: usize,
    pub stencil: StencilMode,
    pub central_fraction: f64,
}

/// Grid solution of an HJB equation.
#[derive(Clone, Debug)]
pub struct HjbSolution {
    pub grid: Grid,
    pub params: ModelParams,
    pub cost: CostSpec,
    /// Relative value with `v[origin] = 0`.
    pub v: Vec<f64>,
    /// Ergodic gain, or `α V^α(0)` for a discounted solve.
    pub rho: f64,
    /// `d²` control entries per node, row-major.
    pub policy: Vec<f64>,
    /// `d` gradient components per node that produced `policy`.
    pub gradient: Vec<f64>,
    /// `min_u (Lᵘ V + r̃_ε) − ρ` per node (discounted: `− α V`).
    pub residual: Vec<f64>,
    pub meta: SolveMeta,
}

impl HjbSolution {
    pub fn d(&self) -> usize {
        self.grid.d()
    }

    pub fn policy_at(&self, node: usize) -> ControlMatrix {
        let dd = self.d() * self.d();
        ControlMatrix::from_flat(self.d(), &self.policy[node * dd..(node + 1) * dd]).expect("stored policy has zero diagonal")
    }

    pub fn max_residual(&self) -> f64 {
        self.meta.max_residual
    }

    /// Discounted value `V^α` before normalization.
    pub fn raw_value(&self) -> Vec<f64> {
        self.v.iter().map(|v| v + self.meta.value_offset).collect()
    }

    /// Interpolated relative value.
    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.grid.interpolate(&self.v, x)
    }

    /// `sup |V − V'|` over nodes in the inner half-box.
    pub fn inner_sup_distance(&self, other: &HjbSolution) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::Argument("solutions live on different grids".into()));
        }
        Ok(self.grid.inner_half_box().map(|n| (self.v[n] - other.v[n]).abs()).fold(0.0, f64::max))
    }
}

fn check_inputs(params: &ModelParams, cost: &CostSpec, grid: &Grid, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    check_dim("cost", cost.d(), params.d())?;
    check_dim("grid", grid.d(), params.d())?;
    Ok(())
}

/// Initial control field for policy iteration.
pub fn initial_policy_field(params: &ModelParams, grid: &Grid, initial: InitialPolicy) -> Vec<f64> {
    let d = grid.d();
    let mut u = vec![0.0; grid.len() * d * d];
    if initial == InitialPolicy::FullHelp {
        let mut x = vec![0.0; d];
        for node in 0..grid.len() {
            grid.coords_into(node, &mut x);
            let red = Reduced::new(&x, params.mask());
            let mut v: Vars = red.cap.clone();
            red.make_feasible(&mut v);
            red.scatter(&v, &mut u[node * d * d..(node + 1) * d * d]);
        }
    }
    u
}

struct Context<'a> {
    params: &'a ModelParams,
    cost: &'a CostSpec,
    grid: &'a Grid,
    plan: StencilPlan,
    minimizer: HamiltonianMinimizer<'a>,
    epsilon: f64,
}

struct NodeOutcome {
    u: SmallVec<[f64; 16]>,
    p: SmallVec<[f64; 8]>,
    phi_best: f64,
    phi_current: f64,
}

impl Context<'_> {
    fn running(&self, x: &[f64], u: &[f64]) -> f64 {
        let mut q: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, x.len());
        self.cost.control_cost_flat(x, u, &mut q) + self.epsilon * u.iter().map(|v| v * v).sum::<f64>()
    }

    /// `Lᵘ V(x) + r̃_ε(x, u)` with the discrete generator.
    fn phi(&self, node: usize, x: &[f64], u: &[f64], v: &[f64], rates: &mut Rates) -> f64 {
        let mut b: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, x.len());
        self.params.rates().drift_into(x, u, &mut b);
        node_rates(self.params, self.grid, &self.plan, node, &b, rates);
        apply_rates(rates, v, node) + self.running(x, u)
    }

    /// Minimizes the discrete node objective. Central axes contribute a linear
    /// drift term with the central difference as coefficient; upwind axes are
    /// piecewise linear, so every choice of one-sided difference per upwind
    /// axis is tried and the true node objective decides.
    fn improve(&self, node: usize, v: &[f64], u_current: &[f64]) -> Result<NodeOutcome> {
        let d = self.grid.d();
        let h = self.grid.spacing();
        let mut x: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
        self.grid.coords_into(node, &mut x);
        let mut base: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
        let mut fwd: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
        let mut bwd: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, d);
        let mut upwind_axes: SmallVec<[usize; 8]> = SmallVec::new();
        for a in 0..d {
            let s = self.grid.stride(a);
            let kind = self.plan.kind(node, a);
            let dp = if kind == AxisKind::Upper { 0.0 } else { (v[node + s] - v[node]) / h };
            let dm = if kind == AxisKind::Lower { 0.0 } else { (v[node] - v[node - s]) / h };
            fwd[a] = dp;
            bwd[a] = dm;
            if kind == AxisKind::Central {
                base[a] = 0.5 * (dp + dm);
            } else {
                upwind_axes.push(a);
            }
        }
        let mut rates = Rates::new();
        let mut best: Option<NodeOutcome> = None;
        let mut u = [0.0f64; 64];
        let dd = d * d;
        let patterns = 1usize << upwind_axes.len();
        let mut tried: SmallVec<[SmallVec<[f64; 8]>; 4]> = SmallVec::new();
        for pattern in 0..patterns {
            let mut p = base.clone();
            for (bit, &a) in upwind_axes.iter().enumerate() {
                p[a] = if (pattern >> bit) & 1 == 0 { fwd[a] } else { bwd[a] };
            }
            if tried.contains(&p) {
                continue;
            }
            self.minimizer.argmin_into(&x, &p, &mut u[..dd])?;
            let phi = self.phi(node, &x, &u[..dd], v, &mut rates);
            if best.as_ref().is_none_or(|b| phi < b.phi_best) {
                best = Some(NodeOutcome { u: u[..dd].iter().copied().collect(), p: p.clone(), phi_best: phi, phi_current: 0.0 });
            }
            tried.push(p);
        }
        let mut out = best.expect("at least one candidate");
        out.phi_current = self.phi(node, &x, u_current, v, &mut rates);
        Ok(out)
    }

    fn running_field(&self, u: &[f64]) -> Vec<f64> {
        let d = self.grid.d();
        let dd = d * d;
        let mut x = vec![0.0; d];
        (0..self.grid.len())
            .map(|node| {
                self.grid.coords_into(node, &mut x);
                self.running(&x, &u[node * dd..(node + 1) * dd])
            })
            .collect()
    }
}

/// Warm-start state for the policy-evaluation solves.
#[derive(Default)]
struct Warm {
    w: Vec<f64>,
    s: Vec<f64>,
    iterations: usize,
}

fn krylov(cfg: &SolverConfig) -> KrylovConfig {
    KrylovConfig { rel_tol: cfg.linear_tol, max_iters: 50_000 }
}

/// Ergodic evaluation of a fixed generator: kills the chain at the origin,
/// solves `M w = r`, `M s = 1` with `M = −G` restricted to the other nodes,
/// and recovers `ρ` from the origin row. Returns `(V, ρ)` with `V(0) = 0`.
fn evaluate_ergodic(grid: &Grid, g: &CsrMatrix, r: &[f64], warm: &mut Warm, kc: KrylovConfig) -> Result<(Vec<f64>, f64)> {
    let n = g.n();
    let o = grid.origin();
    let map = |y: usize| if y < o { y } else { y - 1 };
    let rows = (0..n).filter(|&x| x != o).map(|x| g.row(x).filter(|&(y, _)| y != o).map(|(y, val)| (map(y), -val)).collect::<Vec<_>>());
    let m = CsrMatrix::from_rows(n - 1, rows);
    let pre = Ilu0::new(&m)?;
    let rhs: Vec<f64> = (0..n).filter(|&x| x != o).map(|x| r[x]).collect();
    let ones = vec![1.0; n - 1];
    if warm.w.len() != n - 1 {
        warm.w = vec![0.0; n - 1];
        warm.s = vec![0.0; n - 1];
    }
    let st = bicgstab(&m, &pre, &rhs, &mut warm.w, kc)?;
    let ss = bicgstab(&m, &pre, &ones, &mut warm.s, kc)?;
    warm.iterations += st.iterations + ss.iterations;
    let (mut num, mut den) = (r[o], 1.0);
    for (y, val) in g.row(o) {
        if y != o {
            num += val * warm.w[map(y)];
            den += val * warm.s[map(y)];
        }
    }
    if !(den > 0.0) || !num.is_finite() {
        return Err(Error::Numerical(format!("degenerate gain recovery (denominator {den})")));
    }
    let rho = num / den;
    let mut v = vec![0.0; n];
    for x in 0..n {
        if x != o {
            v[x] = warm.w[map(x)] - rho * warm.s[map(x)];
        }
    }
    Ok((v, rho))
}

/// Discounted evaluation `(αI − G) V = r`.
fn evaluate_discounted(g: &CsrMatrix, r: &[f64], alpha: f64, warm: &mut Warm, kc: KrylovConfig) -> Result<Vec<f64>> {
    let n = g.n();
    let rows = (0..n).map(|x| g.row(x).map(|(y, val)| (y, if y == x { alpha - val } else { -val })).collect::<Vec<_>>());
    let a = CsrMatrix::from_rows(n, rows);
    let pre = Ilu0::new(&a)?;
    if warm.w.len() != n {
        warm.w = vec![0.0; n];
    }
    let st = bicgstab(&a, &pre, r, &mut warm.w, kc)?;
    warm.iterations += st.iterations;
    Ok(warm.w.clone())
}

fn policy_iteration(params: &ModelParams, cost: &CostSpec, grid: &Grid, cfg: &SolverConfig, initial: Vec<f64>) -> Result<HjbSolution> {
    check_inputs(params, cost, grid, cfg)?;
    let d = grid.d();
    let dd = d * d;
    let n = grid.len();
    check_dim("initial policy", initial.len(), n * dd)?;
    let mut acfg = ArgminConfig::new(cfg.epsilon);
    acfg.restarts = 2;
    let ctx = Context {
        params,
        cost,
        grid,
        plan: StencilPlan::new(params, grid, cfg.stencil),
        minimizer: HamiltonianMinimizer::new(params, cost, acfg)?,
        epsilon: cfg.epsilon,
    };
    let kc = krylov(cfg);
    let o = grid.origin();
    let mut u = initial;
    let mut warm = Warm::default();
    let mut history = Vec::new();
    for outer in 1..=cfg.max_outer {
        let g = assemble(params, grid, &ctx.plan, &u)?;
        let r = ctx.running_field(&u);
        let (v, rho, offset, raw) = match cfg.alpha {
            None => {
                let (v, rho) = evaluate_ergodic(grid, &g, &r, &mut warm, kc)?;
                (v, rho, 0.0, None)
            }
            Some(alpha) => {
                let raw = evaluate_discounted(&g, &r, alpha, &mut warm, kc)?;
                let off = raw[o];
                (raw.iter().map(|x| x - off).collect(), alpha * off, off, Some(raw))
            }
        };
        let outcomes: Vec<NodeOutcome> =
            (0..n).into_par_iter().map(|node| ctx.improve(node, &v, &u[node * dd..(node + 1) * dd])).collect::<Result<_>>()?;
        let target = |node: usize| match (&raw, cfg.alpha) {
            (Some(raw), Some(alpha)) => alpha * raw[node],
            _ => rho,
        };
        let residual: Vec<f64> = outcomes.iter().enumerate().map(|(node, o)| o.phi_best.min(o.phi_current) - target(node)).collect();
        let max_residual = residual.iter().map(|r| r.abs()).fold(0.0, f64::max);
        history.push(max_residual);
        if !max_residual.is_finite() {
            return Err(Error::Numerical("non-finite HJB residual".into()));
        }
        let mut change: f64 = 0.0;
        let mut next = u.clone();
        for (node, o) in outcomes.iter().enumerate() {
            let margin = 1e-12 * (1.0 + o.phi_current.abs());
            if o.phi_best < o.phi_current - margin {
                let slot = &mut next[node * dd..(node + 1) * dd];
                for (s, &val) in slot.iter_mut().zip(&o.u) {
                    change = change.max((*s - val).abs());
                    *s = val;
                }
            }
        }
        if change <= cfg.tol_policy && max_residual > cfg.tol_pde {
            return Err(Error::Solver {
                message: format!("policy is stable but the HJB residual {max_residual:e} exceeds tol_pde = {:e}", cfg.tol_pde),
                iterations: outer,
                gap: max_residual,
                last_iterate: history,
            });
        }
        if change <= cfg.tol_policy {
            let mut policy = vec![0.0; n * dd];
            let mut gradient = vec![0.0; n * d];
            for (node, o) in outcomes.iter().enumerate() {
                policy[node * dd..(node + 1) * dd].copy_from_slice(&o.u);
                gradient[node * d..(node + 1) * d].copy_from_slice(&o.p);
            }
            return Ok(HjbSolution {
                grid: grid.clone(),
                params: params.clone(),
                cost: cost.clone(),
                v,
                rho,
                policy,
                gradient,
                residual,
                meta: SolveMeta {
                    epsilon: cfg.epsilon,
                    alpha: cfg.alpha,
                    iterations: outer,
                    max_residual,
                    residual_history: history,
                    value_offset: offset,
                    linear_iterations: warm.iterations,
                    stencil: cfg.stencil,
                    central_fraction: ctx.plan.central_fraction(),
                },
            });
        }
        u = next;
    }
    Err(Error::Solver {
        message: format!("policy iteration did not reach tol_pde = {:e}", cfg.tol_pde),
        iterations: cfg.max_outer,
        gap: history.last().copied().unwrap_or(f64::INFINITY),
        last_iterate: history,
    })
}

/// Ergodic HJB `min_u (Lᵘ V + r̃_ε) = ρ` with `V(0) = 0`.
pub fn solve_ergodic(params: &ModelParams, cost: &CostSpec, grid: &Grid, cfg: &SolverConfig) -> Result<HjbSolution> {
    if cfg.alpha.is_some() {
        return Err(Error::Argument("solve_ergodic expects no discount factor".into()));
    }
    let init = initial_policy_field(params, grid, cfg.initial_policy);
    policy_iteration(params, cost, grid, cfg, init)
}

/// As [`solve_ergodic`], starting from an explicit control field.
pub fn solve_ergodic_from(
    params: &ModelParams,
    cost: &CostSpec,
    grid: &Grid,
    cfg: &SolverConfig,
    initial: Vec<f64>,
) -> Result<HjbSolution> {
    if cfg.alpha.is_some() {
        return Err(Error::Argument("solve_ergodic expects no discount factor".into()));
    }
    policy_iteration(params, cost, grid, cfg, initial)
}

/// Discounted HJB `min_u (Lᵘ V + r̃_ε) = α V`. The stored value is normalized
/// to vanish at the origin; [`HjbSolution::raw_value`] recovers `V^α`.
pub fn solve_discounted(params: &ModelParams, cost: &CostSpec, grid: &Grid, cfg: &SolverConfig) -> Result<HjbSolution> {
    if cfg.alpha.is_none() {
        return Err(Error::Argument("solve_discounted needs alpha".into()));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Argument("solve_discounted needs epsilon > 0".into()));
    }
    let init = initial_policy_field(params, grid, cfg.initial_policy);
    policy_iteration(params, cost, grid, cfg, init)
}

/// Gain and relative value of a fixed feasible control field.
pub fn evaluate_policy_ergodic(
    params: &ModelParams,
    cost: &CostSpec,
    grid: &Grid,
    u_field: &[f64],
    epsilon: f64,
    stencil: StencilMode,
) -> Result<(Vec<f64>, f64)> {
    let cfg = SolverConfig { stencil, ..SolverConfig::new(epsilon) };
    check_inputs(params, cost, grid, &cfg)?;
    let plan = StencilPlan::new(params, grid, stencil);
    let g = assemble(params, grid, &plan, u_field)?;
    let ctx_cost = |x: &[f64], u: &[f64]| {
        let mut q = vec![0.0; x.len()];
        cost.control_cost_flat(x, u, &mut q) + epsilon * u.iter().map(|v| v * v).sum::<f64>()
    };
    let d = grid.d();
    let mut x = vec![0.0; d];
    let r: Vec<f64> = (0..grid.len())
        .map(|node| {
            grid.coords_into(node, &mut x);
            ctx_cost(&x, &u_field[node * d * d..(node + 1) * d * d])
        })
        .collect();
    evaluate_ergodic(grid, &g, &r, &mut Warm::default(), krylov(&cfg))
}

/// One row of an ε-sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub epsilon: f64,
    pub rho: f64,
    /// `sup |V_ε − V_0|` on the inner half-box.
    pub v_gap: f64,
    pub iterations: usize,
    pub max_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub rho_star: f64,
    pub monotone: bool,
    pub sandwich: bool,
    pub v_gap_decreasing: bool,
}

impl SweepReport {
    /// Fails with a diagnostic error naming every violated property.
    pub fn check(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !self.monotone {
            bad.push("rho_eps is not nonincreasing as eps decreases");
        }
        if !self.sandwich {
            bad.push("rho_eps is outside [rho*, rho* + eps d]");
        }
        if !self.v_gap_decreasing {
            bad.push("sup |V_eps − V| on the inner half-box is not decreasing");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Diagnostic(bad.join("; ")))
        }
    }
}

/// Tolerance for the monotonicity of `ρ_ε` along a sweep.
pub const SWEEP_MONOTONE_TOL: f64 = 1e-8;

/// Solves the ergodic problem for each ε in a strictly decreasing list and
/// finally at ε = 0. The last solution in the returned list is the ε = 0 one.
pub fn epsilon_sweep(
    params: &ModelParams,
    cost: &CostSpec,
    grid: &Grid,
    base: &SolverConfig,
    eps_list: &[f64],
) -> Result<(Vec<HjbSolution>, SweepReport)> {
    if eps_list.is_empty() || eps_list.iter().any(|&e| !(e > 0.0)) || eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Argument("eps_list must be positive and strictly decreasing".into()));
    }
    let mut sols = Vec::with_capacity(eps_list.len() + 1);
    for &e in eps_list.iter().chain(std::iter::once(&0.0)) {
        let cfg = SolverConfig { epsilon: e, alpha: None, ..base.clone() };
        sols.push(solve_ergodic(params, cost, grid, &cfg).map_err(|err| err.in_stage(&format!("solve eps={e}")))?);
    }
    let star = sols.last().expect("terminal solve");
    let rho_star = star.rho;
    let d = params.d() as f64;
    let mut entries = Vec::with_capacity(sols.len());
    for s in &sols {
        entries.push(SweepEntry {
            epsilon: s.meta.epsilon,
            rho: s.rho,
            v_gap: s.inner_sup_distance(star)?,
            iterations: s.meta.iterations,
            max_residual: s.meta.max_residual,
        });
    }
    let monotone = entries.windows(2).all(|w| w[1].rho <= w[0].rho + SWEEP_MONOTONE_TOL);
    let sandwich = entries.iter().all(|e| e.rho >= rho_star - SWEEP_MONOTONE_TOL && e.rho <= rho_star + e.epsilon * d + SWEEP_MONOTONE_TOL);
    let gaps: Vec<f64> = entries[..entries.len() - 1].iter().map(|e| e.v_gap).collect();
    let v_gap_decreasing = gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let report = SweepReport { entries, rho_star, monotone, sandwich, v_gap_decreasing };
    if !report.monotone {
        return Err(Error::Diagnostic(format!(
            "rho_eps is not nonincreasing along the sweep: {:?}",
            report.entries.iter().map(|e| (e.epsilon, e.rho)).collect::<Vec<_>>()
        )));
    }
    Ok((sols, report))
}

/// Vanishing-discount diagnostic: `α V^α_ε(0)` against `ρ_ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanishingDiscountReport {
    pub alphas: Vec<f64>,
    /// `α V^α(0)` for each α.
    pub scaled_values: Vec<f64>,
    /// `|α V^α(0) − ρ_ε|` for each α.
    pub gaps: Vec<f64>,
    /// Linear extrapolation to α = 0 from the two smallest discounts.
    pub extrapolated: f64,
    pub extrapolated_gap: f64,
    pub gaps_decreasing: bool,
}

/// Solves the discounted problem for each α (strictly decreasing) and compares
/// with the ergodic gain `rho_eps`.
pub fn vanishing_discount(
    params: &ModelParams,
    cost: &CostSpec,
    grid: &Grid,
    base: &SolverConfig,
    alphas: &[f64],
    rho_eps: f64,
) -> Result<VanishingDiscountReport> {
    if alphas.len() < 2 || alphas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Argument("alphas must hold at least two strictly decreasing values".into()));
    }
    let mut scaled = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let cfg = base.clone().with_alpha(a);
        let sol = solve_discounted(params, cost, grid, &cfg).map_err(|e| e.in_stage(&format!("discounted alpha={a}")))?;
        scaled.push(sol.rho);
    }
    let gaps: Vec<f64> = scaled.iter().map(|s| (s - rho_eps).abs()).collect();
    let k = alphas.len();
    let (a1, a2) = (alphas[k - 2], alphas[k - 1]);
    let (g1, g2) = (scaled[k - 2], scaled[k - 1]);
    let extrapolated = (a1 * g2 - a2 * g1) / (a1 - a2);
    Ok(VanishingDiscountReport {
        alphas: alphas.to_vec(),
        gaps_decreasing: gaps.windows(2).all(|w| w[1] < w[0]),
        extrapolated_gap: (extrapolated - rho_eps).abs(),
        scaled_values: scaled,
        gaps,
        extrapolated,
    })
}

/// Feedback policy from a solution: interpolates the stored gradient field
/// and minimizes the Hamiltonian at the exact state.
pub fn extract_policy(sol: &HjbSolution) -> Result<MarkovPolicy> {
    MarkovPolicy::from_gradient(sol.params.clone(), sol.cost.clone(), sol.meta.epsilon, sol.grid.clone(), sol.gradient.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou() -> (ModelParams, CostSpec) {
        let p = ModelParams::new(vec![1.0], vec![vec![1.0]], vec![1.0], vec![0.0], None).unwrap();
        (p, CostSpec::linear(1))
    }

    #[test]
    fn ornstein_uhlenbeck_gain_matches_gaussian_mean_of_positive_part() {
        let (p, c) = ou();
        let grid = Grid::new(1, 6.0, 0.02).unwrap();
        let sol = solve_ergodic(&p, &c, &grid, &SolverConfig::new(0.0)).unwrap();
        let exact = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((sol.rho - exact).abs() < 2e-3, "{} vs {exact}", sol.rho);
        assert_eq!(sol.v[grid.origin()], 0.0);
        assert!(sol.meta.max_residual <= 1e-6);
    }

    #[test]
    fn discounted_gain_approaches_ergodic_gain() {
        let (p, c) = ou();
        let grid = Grid::new(1, 6.0, 0.05).unwrap();
        let base = SolverConfig::new(0.01);
        let rho = solve_ergodic(&p, &c, &grid, &base).unwrap().rho;
        let rep = vanishing_discount(&p, &c, &grid, &base, &[0.2, 0.1, 0.05], rho).unwrap();
        assert!(rep.gaps_decreasing, "{rep:?}");
        assert!(rep.extrapolated_gap < rep.gaps[2], "{rep:?}");
    }

    #[test]
    fn reference_solve_converges_and_helping_lowers_cost() {
        let p = ModelParams::reference();
        let c = CostSpec::linear(2);
        let grid = Grid::new(2, 4.0, 0.2).unwrap();
        let sol = solve_ergodic(&p, &c, &grid, &SolverConfig::new(0.01)).unwrap();
        assert!(sol.meta.max_residual <= 1e-6);
        let (_, rho_zero) = evaluate_policy_ergodic(&p, &c, &grid, &vec![0.0; grid.len() * 4], 0.01, StencilMode::default()).unwrap();
        assert!(sol.rho < rho_zero, "{} vs {rho_zero}", sol.rho);
        let full = initial_policy_field(&p, &grid, InitialPolicy::FullHelp);
        let again = solve_ergodic_from(&p, &c, &grid, &SolverConfig::new(0.01), full).unwrap();
        assert!((again.rho - sol.rho).abs() < 1e-8);
    }

    #[test]
    fn rejects_misuse() {
        let (p, c) = ou();
        let grid = Grid::new(1, 1.0, 0.5).unwrap();
        assert!(matches!(solve_ergodic(&p, &c, &grid, &SolverConfig::new(0.0).with_alpha(0.1)), Err(Error::Argument(_))));
        assert!(solve_discounted(&p, &c, &grid, &SolverConfig::new(0.0).with_alpha(0.1)).is_err());
        assert!(solve_discounted(&p, &c, &grid, &SolverConfig::new(0.1).with_alpha(1.5)).is_err());
        let mut cfg = SolverConfig::new(0.1);
        cfg.max_outer = 1;
        let p2 = ModelParams::reference();
        let grid2 = Grid::new(2, 3.0, 0.5).unwrap();
        match solve_ergodic(&p2, &CostSpec::linear(2), &grid2, &cfg) {
            Err(Error::Solver { last_iterate, .. }) => assert_eq!(last_iterate.len(), 1),
            other => panic!("{other:?}"),
        }
    }
}
