//! Continuous-time Markov chain simulation of the n-th queueing system under
//! admissible scheduling policies, diffusion-scaled cost estimation,
//! occupation measures, and an exact stationary oracle for small truncations.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{bicgstab, CsrMatrix, Ilu0, KrylovConfig};
use crate::model::{neg, ScaledSystemParams};
use crate::policy::MarkovPolicy;
use crate::polytope::contains_flat;
use crate::rng::{stream_rng, AUDIT_LANE, NOISE_LANE};
use crate::stats::Estimate;

/// Slack of the scaled-control feasibility audit.
pub const QUEUE_AUDIT_SLACK: f64 = 1e-9;

/// Largest truncated state space the exact oracle enumerates.
pub const ORACLE_MAX_STATES: usize = 2_000_000;

/// Truncations up to this many states are solved by dense LU.
const ORACLE_DENSE_LIMIT: usize = 1000;

/// Integer state of the n-th system: class totals, server assignments and
/// queue lengths. `z[i * d + j]` counts class-i customers served by pool j.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueueState {
    pub n: u64,
    pub x: Vec<u64>,
    pub z: Vec<u64>,
    pub q: Vec<u64>,
}

/// Diffusion-scaled view of a [`QueueState`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledView {
    pub x: Vec<f64>,
    pub q: Vec<f64>,
    /// `Zᵢⱼ/√n` off the diagonal, `(Zᵢᵢ − n)/√n` on it.
    pub z: Vec<f64>,
    /// Fraction of pool j's idle servers helping class i.
    pub u: Vec<f64>,
}

impl QueueState {
    /// A state with class totals `x`, before any policy is applied.
    pub fn with_totals(n: u64, x: Vec<u64>) -> Self {
        let d = x.len();
        Self { n, z: vec![0; d * d], q: x.clone(), x }
    }

    /// The state closest to the scaled point `xhat`, i.e. `X = round(n + √n x̂)⁺`.
    pub fn from_scaled(n: u64, xhat: &[f64]) -> Self {
        let s = (n as f64).sqrt();
        Self::with_totals(n, xhat.iter().map(|v| (n as f64 + s * v).round().max(0.0) as u64).collect())
    }

    pub fn d(&self) -> usize {
        self.x.len()
    }

    /// Checks the four structural invariants; the message names the first
    /// failure.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let d = self.d();
        let n = self.n;
        for i in 0..d {
            let served: u64 = (0..d).map(|j| self.z[i * d + j]).sum();
            if self.x[i] != self.q[i] + served {
                return Err(format!("class {i}: X = {} but Q + ΣZ = {}", self.x[i], self.q[i] + served));
            }
            let load: u64 = (0..d).map(|k| self.z[k * d + i]).sum();
            if load > n {
                return Err(format!("pool {i} serves {load} > n = {n} customers"));
            }
            if self.z[i * d + i] != self.x[i].min(n) {
                return Err(format!("pool {i} serves {} of its own class, expected min(X, n)", self.z[i * d + i]));
            }
            let excess = self.x[i].saturating_sub(n);
            let waiting = self.q[i] + (0..d).filter(|&j| j != i).map(|j| self.z[i * d + j]).sum::<u64>();
            if excess != waiting {
                return Err(format!("class {i}: (X − n)⁺ = {excess} but Q + help = {waiting}"));
            }
        }
        Ok(())
    }

    pub fn scaled(&self) -> ScaledView {
        let d = self.d();
        let nf = self.n as f64;
        let s = nf.sqrt();
        let mut view = ScaledView {
            x: self.x.iter().map(|&v| (v as f64 - nf) / s).collect(),
            q: self.q.iter().map(|&v| v as f64 / s).collect(),
            z: vec![0.0; d * d],
            u: vec![0.0; d * d],
        };
        for i in 0..d {
            for j in 0..d {
                let zij = self.z[i * d + j] as f64;
                if i == j {
                    view.z[i * d + j] = (zij - nf) / s;
                } else {
                    view.z[i * d + j] = zij / s;
                    let idle = self.n.saturating_sub(self.x[j]);
                    if idle > 0 {
                        view.u[i * d + j] = zij / idle as f64;
                    }
                }
            }
        }
        view
    }

    /// `Σ x̂ᵢ²`.
    pub fn scaled_norm_sq(&self) -> f64 {
        let nf = self.n as f64;
        self.x.iter().map(|&v| (v as f64 - nf).powi(2)).sum::<f64>() / nf
    }
}

/// Scheduling policy of the n-th system.
#[derive(Clone, Debug)]
pub enum QueuePolicy {
    /// Every pool serves only its own class.
    ZeroHelp,
    /// `Zᵢⱼ = ⌊uᵢⱼ(X̂) (Xⱼ − n)⁻⌋` for a feedback control on scaled states.
    FloorFeedback(MarkovPolicy),
}

impl QueuePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            QueuePolicy::ZeroHelp => "zero_help",
            QueuePolicy::FloorFeedback(_) => "floor_feedback",
        }
    }
}

/// Reusable buffers for [`apply_policy_into`].
#[derive(Clone, Debug, Default)]
pub struct PolicyScratch {
    xhat: Vec<f64>,
    /// The control evaluated at the last state.
    pub u: Vec<f64>,
}

/// Recomputes `(Z, Q)` from the class totals.
pub fn apply_policy(state: &QueueState, policy: &QueuePolicy) -> Result<QueueState> {
    let mut s = state.clone();
    apply_policy_into(&mut s, policy, &mut PolicyScratch::default())?;
    Ok(s)
}

/// In-place form of [`apply_policy`]; leaves the control in `scratch.u`.
pub fn apply_policy_into(state: &mut QueueState, policy: &QueuePolicy, scratch: &mut PolicyScratch) -> Result<()> {
    let d = state.d();
    let n = state.n;
    check_dim("z", state.z.len(), d * d)?;
    check_dim("q", state.q.len(), d)?;
    scratch.u.resize(d * d, 0.0);
    scratch.u.iter_mut().for_each(|v| *v = 0.0);
    state.z.iter_mut().for_each(|v| *v = 0);
    for i in 0..d {
        state.z[i * d + i] = state.x[i].min(n);
    }
    if let QueuePolicy::FloorFeedback(pol) = policy {
        check_dim("policy", pol.d(), d)?;
        let nf = n as f64;
        let s = nf.sqrt();
        scratch.xhat.clear();
        scratch.xhat.extend(state.x.iter().map(|&v| (v as f64 - nf) / s));
        let any_help = (0..d).any(|i| state.x[i] > n) && (0..d).any(|j| state.x[j] < n);
        if any_help {
            pol.evaluate_into(&scratch.xhat, &mut scratch.u)?;
            for i in 0..d {
                for j in 0..d {
                    let idle = n.saturating_sub(state.x[j]);
                    if i != j && idle > 0 {
                        let u = scratch.u[i * d + j];
                        if !(u >= 0.0) {
                            return Err(Error::Internal(format!("policy returned a negative entry {u}")));
                        }
                        state.z[i * d + j] = (u * idle as f64).floor() as u64;
                    }
                }
            }
        }
    }
    for i in 0..d {
        let served: u64 = (0..d).map(|j| state.z[i * d + j]).sum();
        state.q[i] = state.x[i].checked_sub(served).ok_or_else(|| {
            Error::Internal(format!("floor construction assigns {served} servers to class {i} with only {} customers", state.x[i]))
        })?;
    }
    state.check_invariants().map_err(|m| Error::Internal(format!("policy produced an inadmissible state: {m}")))
}

/// A CTMC transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    Arrival { class: usize },
    Service { class: usize, pool: usize },
    Abandonment { class: usize },
}

/// Total event rate at `state`.
fn total_rate(sys: &ScaledSystemParams, state: &QueueState) -> f64 {
    let d = state.d();
    let mut total: f64 = sys.lambda_n.iter().sum();
    for i in 0..d {
        for j in 0..d {
            total += sys.mu_n[i * d + j] * state.z[i * d + j] as f64;
        }
        total += sys.gamma_n[i] * state.q[i] as f64;
    }
    total
}

/// One Gillespie step: draws the holding time in the current state and the
/// next event (one uniform each), applies it and re-runs the policy.
/// Returns the holding time and the event.
pub fn ctmc_step<R: Rng>(
    sys: &ScaledSystemParams,
    state: &mut QueueState,
    policy: &QueuePolicy,
    rng: &mut R,
    scratch: &mut PolicyScratch,
) -> Result<(f64, Event)> {
    let d = state.d();
    let total = total_rate(sys, state);
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Internal(format!("total event rate {total} at state {:?}", state.x)));
    }
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let hold = -(1.0 - u1).ln() / total;
    let mut target = u2 * total;
    let mut event = None;
    'pick: {
        for i in 0..d {
            let r = sys.lambda_n[i];
            if target < r {
                event = Some(Event::Arrival { class: i });
                break 'pick;
            }
            target -= r;
        }
        for i in 0..d {
            for j in 0..d {
                let r = sys.mu_n[i * d + j] * state.z[i * d + j] as f64;
                if target < r {
                    event = Some(Event::Service { class: i, pool: j });
                    break 'pick;
                }
                target -= r;
            }
        }
        for i in 0..d {
            let r = sys.gamma_n[i] * state.q[i] as f64;
            if target < r {
                event = Some(Event::Abandonment { class: i });
                break 'pick;
            }
            target -= r;
        }
    }
    // Rounding can leave `target` just past the last positive rate.
    let event = event.unwrap_or_else(|| last_enabled(sys, state));
    match event {
        Event::Arrival { class } => state.x[class] += 1,
        Event::Service { class, .. } | Event::Abandonment { class } => state.x[class] -= 1,
    }
    apply_policy_into(state, policy, scratch)?;
    Ok((hold, event))
}

fn last_enabled(sys: &ScaledSystemParams, state: &QueueState) -> Event {
    let d = state.d();
    for i in (0..d).rev() {
        if sys.gamma_n[i] * state.q[i] as f64 > 0.0 {
            return Event::Abandonment { class: i };
        }
    }
    for i in (0..d).rev() {
        for j in (0..d).rev() {
            if sys.mu_n[i * d + j] * state.z[i * d + j] as f64 > 0.0 {
                return Event::Service { class: i, pool: j };
            }
        }
    }
    Event::Arrival { class: d - 1 }
}

/// Expected drift of `X̂` at `state`: rate-weighted jumps divided by `√n`.
pub fn expected_scaled_drift(sys: &ScaledSystemParams, state: &QueueState) -> Vec<f64> {
    let d = state.d();
    let s = (state.n as f64).sqrt();
    (0..d)
        .map(|i| {
            let out: f64 =
                (0..d).map(|j| sys.mu_n[i * d + j] * state.z[i * d + j] as f64).sum::<f64>() + sys.gamma_n[i] * state.q[i] as f64;
            (sys.lambda_n[i] - out) / s
        })
        .collect()
}

fn default_queue_audit_rate() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueSimConfig {
    /// Horizon `T`.
    pub horizon: f64,
    pub burn_in: f64,
    pub seed: u64,
    pub replications: usize,
    /// Fraction of visited states whose scaled control is audited.
    #[serde(default = "default_queue_audit_rate")]
    pub audit_rate: f64,
    /// Initial scaled state; the origin when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

impl QueueSimConfig {
    pub fn new(horizon: f64, burn_in: f64, seed: u64, replications: usize) -> Self {
        Self { horizon, burn_in, seed, replications, audit_rate: default_queue_audit_rate(), x0: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Argument(format!("horizon must be > 0, got {}", self.horizon)));
        }
        if !(self.burn_in >= 0.0 && self.burn_in < self.horizon) {
            return Err(Error::Argument(format!("burn_in must lie in [0, T), got {}", self.burn_in)));
        }
        if self.replications == 0 {
            return Err(Error::Argument("replications must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.audit_rate) {
            return Err(Error::Argument("audit_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Summary of one simulated queueing path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueuePathSummary {
    pub replication: u64,
    pub seed: u64,
    /// Time average of `r(Q̂ⁿ)` over `(burn_in, T]`.
    pub mean_cost: f64,
    /// Time average of `|X̂ⁿ|²` over `(burn_in, T]`.
    pub second_moment: f64,
    pub events: u64,
    pub audited: u64,
    /// Largest `|Ẑᵢⱼ − uᵢⱼ(X̂) x̂ⱼ⁻|` seen by the audit.
    pub max_floor_gap: f64,
}

/// Audits the scaled view of `state` against the control the policy returned.
fn audit_state(sys: &ScaledSystemParams, state: &QueueState, policy: &QueuePolicy, u: &[f64]) -> Result<f64> {
    let d = state.d();
    let view = state.scaled();
    if !contains_flat(&view.x, &sys.mask, &view.u, QUEUE_AUDIT_SLACK) {
        return Err(Error::Diagnostic(format!("scaled control {:?} is outside M(x̂) at X = {:?}", view.u, state.x)));
    }
    let mut gap: f64 = 0.0;
    if let QueuePolicy::FloorFeedback(_) = policy {
        let bound = 1.0 / (state.n as f64).sqrt();
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    let g = (view.z[i * d + j] - u[i * d + j] * neg(view.x[j])).abs();
                    if g > bound * (1.0 + 1e-12) {
                        return Err(Error::Diagnostic(format!("floor gap {g} exceeds 1/√n = {bound} at X = {:?}", state.x)));
                    }
                    gap = gap.max(g);
                }
            }
        }
    }
    Ok(gap)
}

/// Runs one path on `[0, T]` and reports each sojourn `(state, start, length)`.
fn run_path(
    sys: &ScaledSystemParams,
    policy: &QueuePolicy,
    x0: &[f64],
    horizon: f64,
    seed: u64,
    replication: u64,
    audit_rate: f64,
    mut visit: impl FnMut(&QueueState, f64, f64),
) -> Result<(u64, u64, f64)> {
    let d = sys.d();
    check_dim("x0", x0.len(), d)?;
    let mut rng = stream_rng(seed, replication, NOISE_LANE);
    let mut audit_rng = stream_rng(seed, replication, AUDIT_LANE);
    let mut scratch = PolicyScratch::default();
    let mut state = QueueState::from_scaled(sys.n, x0);
    apply_policy_into(&mut state, policy, &mut scratch)?;
    let (mut events, mut audited, mut gap) = (0u64, 0u64, 0.0f64);
    let mut before = state.clone();
    let mut t = 0.0;
    while t < horizon {
        if audit_rate > 0.0 && (audit_rate >= 1.0 || audit_rng.random::<f64>() < audit_rate) {
            audited += 1;
            gap = gap.max(audit_state(sys, &state, policy, &scratch.u)?);
        }
        before.clone_from(&state);
        let (hold, _) = ctmc_step(sys, &mut state, policy, &mut rng, &mut scratch)?;
        let len = hold.min(horizon - t);
        visit(&before, t, len);
        t += hold;
        events += 1;
    }
    Ok((events, audited, gap))
}

/// Simulates one replication of the cost estimator.
pub fn simulate_queue(
    sys: &ScaledSystemParams,
    cost: &CostSpec,
    policy: &QueuePolicy,
    cfg: &QueueSimConfig,
    replication: u64,
) -> Result<QueuePathSummary> {
    cfg.validate()?;
    check_dim("cost", cost.d(), sys.d())?;
    let x0 = cfg.x0.clone().unwrap_or_else(|| vec![0.0; sys.d()]);
    let s = (sys.n as f64).sqrt();
    let mut qhat = vec![0.0; sys.d()];
    let (mut cost_sum, mut moment_sum) = (0.0, 0.0);
    let (events, audited, max_floor_gap) =
        run_path(sys, policy, &x0, cfg.horizon, cfg.seed, replication, cfg.audit_rate, |st, t0, len| {
            let lo = t0.max(cfg.burn_in);
            let w = (t0 + len - lo).max(0.0);
            if w > 0.0 {
                for (qh, &qv) in qhat.iter_mut().zip(&st.q) {
                    *qh = qv as f64 / s;
                }
                cost_sum += w * cost.eval(&qhat);
                moment_sum += w * st.scaled_norm_sq();
            }
        })?;
    let span = cfg.horizon - cfg.burn_in;
    Ok(QueuePathSummary {
        replication,
        seed: cfg.seed,
        mean_cost: cost_sum / span,
        second_moment: moment_sum / span,
        events,
        audited,
        max_floor_gap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEstimate {
    pub cost: Estimate,
    pub second_moment: Estimate,
    pub paths: Vec<QueuePathSummary>,
}

/// Replicated estimate of the diffusion-scaled ergodic cost.
pub fn estimate_cost(sys: &ScaledSystemParams, cost: &CostSpec, policy: &QueuePolicy, cfg: &QueueSimConfig) -> Result<QueueEstimate> {
    cfg.validate()?;
    let paths: Vec<QueuePathSummary> =
        (0..cfg.replications as u64).into_par_iter().map(|r| simulate_queue(sys, cost, policy, cfg, r)).collect::<Result<_>>()?;
    let costs: Vec<f64> = paths.iter().map(|p| p.mean_cost).collect();
    let moments: Vec<f64> = paths.iter().map(|p| p.second_moment).collect();
    Ok(QueueEstimate { cost: Estimate::from_samples(&costs), second_moment: Estimate::from_samples(&moments), paths })
}

/// Box of scaled states `[lo, hi]^d` cut into `bins` cells per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl BinSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi && self.bins >= 1 && self.lo.is_finite() && self.hi.is_finite()) {
            return Err(Error::Argument("bin spec needs lo < hi and bins >= 1".into()));
        }
        Ok(())
    }

    /// Cell index along one axis; states outside the box fall into the edge cells.
    pub fn cell(&self, v: f64) -> usize {
        let t = (v - self.lo) / (self.hi - self.lo) * self.bins as f64;
        (t.floor().max(0.0) as usize).min(self.bins - 1)
    }

    pub fn center(&self, cell: usize) -> f64 {
        self.lo + (cell as f64 + 0.5) * (self.hi - self.lo) / self.bins as f64
    }
}

/// Time spent in each visited state of one path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupationHistogram {
    pub n: u64,
    pub bins: BinSpec,
    pub total_time: f64,
    /// Exact occupation times keyed by the class totals `X`.
    pub states: BTreeMap<Vec<u64>, f64>,
}

impl OccupationHistogram {
    pub fn total_mass(&self) -> f64 {
        self.states.values().sum()
    }

    /// Occupation mass per cell of the bin box, keyed by cell multi-index.
    pub fn binned(&self) -> BTreeMap<Vec<usize>, f64> {
        let s = (self.n as f64).sqrt();
        let mut out = BTreeMap::new();
        for (x, &m) in &self.states {
            let key: Vec<usize> = x.iter().map(|&v| self.bins.cell((v as f64 - self.n as f64) / s)).collect();
            *out.entry(key).or_insert(0.0) += m;
        }
        out
    }

    /// Time average of `r(Q̂ⁿ)`, recomputing `Q` for each state with `policy`.
    pub fn mean_cost(&self, cost: &CostSpec, policy: &QueuePolicy) -> Result<f64> {
        if self.total_time == 0.0 {
            return Ok(0.0);
        }
        let s = (self.n as f64).sqrt();
        let mut sum = 0.0;
        for (x, &m) in &self.states {
            let st = apply_policy(&QueueState::with_totals(self.n, x.clone()), policy)?;
            let qhat: Vec<f64> = st.q.iter().map(|&v| v as f64 / s).collect();
            sum += m * cost.eval(&qhat);
        }
        Ok(sum / self.total_time)
    }
}

/// Occupation measure of replication 0 of `(seed)` on `[0, T]`, started at
/// `x̂ = 0`.
pub fn occupation_histogram(
    sys: &ScaledSystemParams,
    policy: &QueuePolicy,
    horizon: f64,
    bins: BinSpec,
    seed: u64,
) -> Result<OccupationHistogram> {
    bins.validate()?;
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::Argument(format!("horizon must be >= 0, got {horizon}")));
    }
    let mut states: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
    run_path(sys, policy, &vec![0.0; sys.d()], horizon, seed, 0, 0.0, |st, _, len| {
        if len > 0.0 {
            *states.entry(st.x.clone()).or_insert(0.0) += len;
        }
    })?;
    Ok(OccupationHistogram { n: sys.n, bins, total_time: horizon, states })
}

/// Result of [`exact_stationary_oracle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// `Σ π(X) r(Q̂ⁿ(X))`.
    pub value: f64,
    /// `Σ π(X) |X̂ⁿ|²`.
    pub second_moment: f64,
    pub states: usize,
    /// `‖πG‖∞` of the computed distribution.
    pub residual: f64,
    /// Stationary probabilities in the enumeration order (class 0 fastest).
    pub pi: Vec<f64>,
}

/// Exact stationary cost of the chain truncated to `{X : Xᵢ ≤ K}`. Arrivals
/// that would leave the box are suppressed.
pub fn exact_stationary_oracle(sys: &ScaledSystemParams, cost: &CostSpec, policy: &QueuePolicy, k: u64) -> Result<OracleResult> {
    let d = sys.d();
    check_dim("cost", cost.d(), d)?;
    let side = k as usize + 1;
    let count = (side as f64).powi(d as i32);
    if count > ORACLE_MAX_STATES as f64 {
        return Err(Error::Capacity(format!("truncation K = {k} gives {count:.3e} states, above the cap of {ORACLE_MAX_STATES}")));
    }
    let count = count as usize;
    let stride: Vec<usize> = (0..d).map(|a| side.pow(a as u32)).collect();
    let decode = |idx: usize| -> Vec<u64> { (0..d).map(|a| ((idx / stride[a]) % side) as u64).collect() };
    let s = (sys.n as f64).sqrt();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(count);
    let mut reward = Vec::with_capacity(count);
    let mut moment = Vec::with_capacity(count);
    let mut scratch = PolicyScratch::default();
    for idx in 0..count {
        let mut st = QueueState::with_totals(sys.n, decode(idx));
        apply_policy_into(&mut st, policy, &mut scratch)?;
        let qhat: Vec<f64> = st.q.iter().map(|&v| v as f64 / s).collect();
        reward.push(cost.eval(&qhat));
        moment.push(st.scaled_norm_sq());
        let mut row = Vec::with_capacity(2 * d + 1);
        let mut out = 0.0;
        for i in 0..d {
            if st.x[i] < k {
                row.push((idx + stride[i], sys.lambda_n[i]));
                out += sys.lambda_n[i];
            }
            let down: f64 = (0..d).map(|j| sys.mu_n[i * d + j] * st.z[i * d + j] as f64).sum::<f64>() + sys.gamma_n[i] * st.q[i] as f64;
            if down > 0.0 {
                row.push((idx - stride[i], down));
                out += down;
            }
        }
        row.push((idx, -out));
        rows.push(row);
    }
    let g = CsrMatrix::from_rows(count, rows);
    let pi = stationary_distribution(&g)?;
    let mut res = vec![0.0; count];
    g.mul_vec_transposed(&pi, &mut res);
    let residual = res.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if !(residual <= 1e-10) {
        return Err(Error::Numerical(format!("stationary residual {residual:e} exceeds 1e-10")));
    }
    Ok(OracleResult {
        value: pi.iter().zip(&reward).map(|(p, r)| p * r).sum(),
        second_moment: pi.iter().zip(&moment).map(|(p, m)| p * m).sum(),
        states: count,
        residual,
        pi,
    })
}

/// Solves `πG = 0`, `Σπ = 1` by fixing `π₀ = 1`, solving the remaining
/// balance equations and normalizing.
fn stationary_distribution(g: &CsrMatrix) -> Result<Vec<f64>> {
    let n = g.n();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let gt = g.transpose();
    let rhs: Vec<f64> = (1..n).map(|j| -g.get(0, j)).collect();
    let mut pi_rest = vec![0.0; n - 1];
    if n <= ORACLE_DENSE_LIMIT {
        let mut a = DMatrix::<f64>::zeros(n - 1, n - 1);
        for j in 1..n {
            for (i, v) in gt.row(j) {
                if i > 0 {
                    a[(j - 1, i - 1)] = v;
                }
            }
        }
        let sol = a.lu().solve(&DVector::from_vec(rhs)).ok_or_else(|| Error::Numerical("singular balance equations".into()))?;
        pi_rest.copy_from_slice(sol.as_slice());
    } else {
        let a = CsrMatrix::from_rows(n - 1, (1..n).map(|j| gt.row(j).filter(|&(i, _)| i > 0).map(|(i, v)| (i - 1, v)).collect()));
        let pre = Ilu0::new(&a)?;
        bicgstab(&a, &pre, &rhs, &mut pi_rest, KrylovConfig { rel_tol: 1e-14, max_iters: 100_000 })?;
    }
    let mut pi = Vec::with_capacity(n);
    pi.push(1.0);
    pi.extend(pi_rest);
    if pi.iter().any(|&p| !(p >= -1e-14)) {
        return Err(Error::Numerical("balance solve produced negative probabilities".into()));
    }
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p = p.max(0.0) / total);
    Ok(pi)
}
