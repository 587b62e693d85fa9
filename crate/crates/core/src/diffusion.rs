//! Euler–Maruyama simulation of the limiting controlled diffusion, ergodic
//! cost estimation, and an empirical Lyapunov drift probe.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{check_dim, Error, Result, Violation};
use crate::model::ModelParams;
use crate::policy::MarkovPolicy;
use crate::polytope::{contains_flat, Reduced};
use crate::rng::{stream_rng, AUDIT_LANE, NOISE_LANE, SAMPLE_LANE};
use crate::stats::Estimate;

/// States beyond this norm are reported as a blow-up.
const BLOW_UP_NORM: f64 = 1e12;

/// Slack of the sampled feasibility audit.
pub const AUDIT_SLACK: f64 = 1e-9;

fn default_audit_rate() -> f64 {
    0.01
}

fn default_moment_k() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    /// Horizon `T`.
    pub horizon: f64,
    pub burn_in: f64,
    pub seed: u64,
    pub replications: usize,
    /// Weight of `‖u‖²` added to the running cost, to estimate `J_ε`.
    #[serde(default)]
    pub control_penalty: f64,
    /// Fraction of steps whose control is checked for membership in `M(x)`.
    #[serde(default = "default_audit_rate")]
    pub audit_rate: f64,
    /// Exponent of the reported moment `|X|^k`.
    #[serde(default = "default_moment_k")]
    pub moment_k: f64,
    /// Initial state; the origin when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, burn_in: f64, seed: u64, replications: usize) -> Self {
        Self {
            dt,
            horizon,
            burn_in,
            seed,
            replications,
            control_penalty: 0.0,
            audit_rate: default_audit_rate(),
            moment_k: default_moment_k(),
            x0: None,
        }
    }

    /// Every violated constraint, with paths under `prefix`.
    pub fn violations(&self, prefix: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad = |field: &str, msg: String| out.push(Violation::new(format!("{prefix}.{field}"), msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            bad("dt", format!("must be > 0, got {}", self.dt));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            bad("horizon", format!("must be > 0, got {}", self.horizon));
        }
        if !(self.burn_in >= 0.0 && self.burn_in < self.horizon) {
            bad("burn_in", format!("must lie in [0, horizon), got {}", self.burn_in));
        }
        if self.replications == 0 {
            bad("replications", "must be >= 1".into());
        }
        if !(self.control_penalty >= 0.0 && self.control_penalty.is_finite()) {
            bad("control_penalty", "must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.audit_rate) {
            bad("audit_rate", "must lie in [0, 1]".into());
        }
        if !(self.moment_k > 0.0) {
            bad("moment_k", "must be > 0".into());
        }
        if let Some(x0) = &self.x0 {
            if x0.iter().any(|v| !v.is_finite()) {
                bad("x0", "must be finite".into());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("sim");
        if !v.is_empty() {
            return Err(Error::Argument(v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")));
        }
        if self.horizon / self.dt > 1e11 {
            return Err(Error::Capacity("more than 1e11 time steps requested".into()));
        }
        Ok(())
    }
}

/// Summary of one simulated path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub replication: u64,
    pub seed: u64,
    /// Time average of `r̃(X, U)` (plus the control penalty) after burn-in.
    pub mean_cost: f64,
    /// Time average of `|X|^k` after burn-in.
    pub moment: f64,
    pub final_state: Vec<f64>,
    pub steps: u64,
    pub audited: u64,
}

/// Simulates replication 0 of `cfg` from `x0`.
pub fn simulate_path(params: &ModelParams, cost: &CostSpec, policy: &MarkovPolicy, x0: &[f64], cfg: &SimConfig) -> Result<PathSummary> {
    simulate_replication(params, cost, policy, x0, cfg, 0)
}

/// Simulates one replication. The noise and audit streams are derived from
/// `(cfg.seed, replication)`.
pub fn simulate_replication(
    params: &ModelParams,
    cost: &CostSpec,
    policy: &MarkovPolicy,
    x0: &[f64],
    cfg: &SimConfig,
    replication: u64,
) -> Result<PathSummary> {
    cfg.validate()?;
    let d = params.d();
    check_dim("x0", x0.len(), d)?;
    check_dim("cost", cost.d(), d)?;
    check_dim("policy", policy.d(), d)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("x0 must be finite".into()));
    }
    let steps = (cfg.horizon / cfg.dt).round() as u64;
    let burn = (cfg.burn_in / cfg.dt).round() as u64;
    let mut noise = stream_rng(cfg.seed, replication, NOISE_LANE);
    let mut audit = stream_rng(cfg.seed, replication, AUDIT_LANE);
    let rates = params.rates();
    let scale: Vec<f64> = params.lambda().iter().map(|l| (2.0 * l * cfg.dt).sqrt()).collect();
    let zero_cost = cost.is_zero() && cfg.control_penalty == 0.0;
    let mut x = x0.to_vec();
    let mut u = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    let mut q = vec![0.0; d];
    let (mut cost_sum, mut moment_sum) = (0.0, 0.0);
    let mut audited = 0;
    for k in 0..steps {
        policy.evaluate_into(&x, &mut u)?;
        if cfg.audit_rate > 0.0 && (cfg.audit_rate >= 1.0 || audit.random::<f64>() < cfg.audit_rate) {
            audited += 1;
            if !contains_flat(&x, params.mask(), &u, AUDIT_SLACK) {
                return Err(Error::Diagnostic(format!("policy left the control set at t = {}, x = {x:?}, u = {u:?}", k as f64 * cfg.dt)));
            }
        }
        if k >= burn {
            if !zero_cost {
                let mut r = cost.control_cost_flat(&x, &u, &mut q);
                if cfg.control_penalty > 0.0 {
                    r += cfg.control_penalty * u.iter().map(|v| v * v).sum::<f64>();
                }
                cost_sum += r;
            }
            let norm2: f64 = x.iter().map(|v| v * v).sum();
            moment_sum += if cfg.moment_k == 2.0 { norm2 } else { norm2.powf(0.5 * cfg.moment_k) };
        }
        rates.drift_into(&x, &u, &mut b);
        let mut norm2 = 0.0;
        for i in 0..d {
            let z: f64 = noise.sample(StandardNormal);
            x[i] += b[i] * cfg.dt + scale[i] * z;
            norm2 += x[i] * x[i];
        }
        if !(norm2 <= BLOW_UP_NORM * BLOW_UP_NORM) {
            return Err(Error::Simulation { time: (k + 1) as f64 * cfg.dt, message: format!("state left every bounded region: {x:?}") });
        }
    }
    let counted = (steps - burn.min(steps)).max(1) as f64;
    Ok(PathSummary {
        replication,
        seed: cfg.seed,
        mean_cost: cost_sum / counted,
        moment: moment_sum / counted,
        final_state: x,
        steps,
        audited,
    })
}

/// Replicated ergodic-cost estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub cost: Estimate,
    pub moment: Estimate,
    pub paths: Vec<PathSummary>,
}

/// Runs `cfg.replications` independent paths in parallel and combines them in
/// replication order.
pub fn estimate_ergodic_cost(params: &ModelParams, cost: &CostSpec, policy: &MarkovPolicy, cfg: &SimConfig) -> Result<CostEstimate> {
    cfg.validate()?;
    if cfg.replications < 2 {
        return Err(Error::Argument("estimate_ergodic_cost needs at least two replications".into()));
    }
    let x0 = cfg.x0.clone().unwrap_or_else(|| vec![0.0; params.d()]);
    let paths: Vec<PathSummary> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|r| simulate_replication(params, cost, policy, &x0, cfg, r))
        .collect::<Result<_>>()?;
    let costs: Vec<f64> = paths.iter().map(|p| p.mean_cost).collect();
    let moments: Vec<f64> = paths.iter().map(|p| p.moment).collect();
    Ok(CostEstimate { cost: Estimate::from_samples(&costs), moment: Estimate::from_samples(&moments), paths })
}

/// Controls examined by [`lyapunov_probe`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeControls {
    /// Vertices of `M(x)` plus random feasible points.
    #[default]
    All,
    /// Only `u = 0`.
    ZeroOnly,
}

/// Test function `𝒱(x) = |x|^k` for `|x| ≥ 1`, extended smoothly inside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSpec {
    pub k: f64,
    pub r_fit: f64,
    pub r_test: f64,
    #[serde(default)]
    pub controls: ProbeControls,
}

impl LyapunovSpec {
    pub fn new(k: f64, r_fit: f64, r_test: f64) -> Self {
        Self { k, r_fit, r_test, controls: ProbeControls::All }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 1.0 && self.k.is_finite()) {
            return Err(Error::Argument(format!("k must be >= 1, got {}", self.k)));
        }
        if !(self.r_fit >= 1.0 && self.r_test > self.r_fit && self.r_test.is_finite()) {
            return Err(Error::Argument("need r_test > r_fit >= 1".into()));
        }
        Ok(())
    }

    /// `φ` with `𝒱(x) = φ(|x|²)`: `s^{k/2}` for `s ≥ 1` and the quadratic
    /// matching value, slope and curvature at `s = 1` inside. Returns
    /// `(φ, φ', φ'')`.
    fn profile(&self, s: f64) -> (f64, f64, f64) {
        let e = 0.5 * self.k;
        if s >= 1.0 {
            (s.powf(e), e * s.powf(e - 1.0), e * (e - 1.0) * s.powf(e - 2.0))
        } else {
            let c = 0.5 * e * (e - 1.0);
            let b = e - 2.0 * c;
            let a = 1.0 - b - c;
            (a + b * s + c * s * s, b + 2.0 * c * s, 2.0 * c)
        }
    }

    /// `𝒱(x)`.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.profile(x.iter().map(|v| v * v).sum()).0
    }

    /// `Lᵘ𝒱(x) = b(x, u)·∇𝒱 + Σ λᵢ ∂ᵢᵢ𝒱`.
    pub fn generator(&self, params: &ModelParams, x: &[f64], u: &[f64]) -> f64 {
        let d = x.len();
        let s: f64 = x.iter().map(|v| v * v).sum();
        let (_, d1, d2) = self.profile(s);
        let mut b = vec![0.0; d];
        params.rates().drift_into(x, u, &mut b);
        (0..d).map(|i| b[i] * 2.0 * d1 * x[i] + params.lambda()[i] * (2.0 * d1 + 4.0 * d2 * x[i] * x[i])).sum()
    }
}

/// Worst sample of a Lyapunov probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeWitness {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    /// `Lᵘ𝒱(x) − (c5 − c6 |x|^k)`.
    pub excess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub c5: f64,
    pub c6: f64,
    pub fit_samples: usize,
    pub test_samples: usize,
    pub violations: usize,
    /// The test-shell sample closest to (or furthest past) the bound.
    pub worst: Option<ProbeWitness>,
}

/// Samples states uniformly in radius up to `r_test`, takes the largest
/// `Lᵘ𝒱` over the probed controls, fits `sup_u Lᵘ𝒱 ≤ c5 − c6 |x|^k` on
/// `|x| ≤ r_fit` and counts violations on `r_fit < |x| ≤ r_test`.
pub fn lyapunov_probe(params: &ModelParams, spec: &LyapunovSpec, sample_count: usize, seed: u64) -> Result<LyapunovReport> {
    spec.validate()?;
    if sample_count < 1000 {
        return Err(Error::Argument(format!("sample_count must be >= 1000, got {sample_count}")));
    }
    let d = params.d();
    let mut rng = stream_rng(seed, 0, SAMPLE_LANE);
    let mut fit: Vec<(f64, f64)> = Vec::new();
    let mut test: Vec<(Vec<f64>, Vec<f64>, f64, f64)> = Vec::new();
    let mut u = vec![0.0; d * d];
    for _ in 0..sample_count {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let radius = rng.random::<f64>() * spec.r_test;
        dir.iter_mut().for_each(|v| *v *= radius / norm);
        let x = dir;
        let mut best = (spec.generator(params, &x, &vec![0.0; d * d]), vec![0.0; d * d]);
        if spec.controls == ProbeControls::All {
            let red = Reduced::new(&x, params.mask());
            let verts = red.vertices().unwrap_or_default();
            let mut candidates = verts.clone();
            if !verts.is_empty() {
                for _ in 0..4 {
                    let w: Vec<f64> = verts.iter().map(|_| rng.random::<f64>()).collect();
                    let total: f64 = w.iter().sum();
                    let mut point = verts[0].clone();
                    point.iter_mut().for_each(|v| *v = 0.0);
                    for (vert, wi) in verts.iter().zip(&w) {
                        for (p, v) in point.iter_mut().zip(vert) {
                            *p += wi / total * v;
                        }
                    }
                    candidates.push(point);
                }
            }
            for c in &candidates {
                red.scatter(c, &mut u);
                let val = spec.generator(params, &x, &u);
                if val > best.0 {
                    best = (val, u.clone());
                }
            }
        }
        let hx = x.iter().map(|v| v * v).sum::<f64>().powf(0.5 * spec.k);
        if radius <= spec.r_fit {
            fit.push((hx, best.0));
        } else {
            test.push((x, best.1, hx, best.0));
        }
    }
    let (c5, c6) = fit_envelope(&fit)?;
    let mut violations = 0;
    let mut worst: Option<ProbeWitness> = None;
    for (x, u, hx, val) in test.iter() {
        let excess = val - (c5 - c6 * hx);
        if excess > 0.0 {
            violations += 1;
        }
        if worst.as_ref().is_none_or(|w| excess > w.excess) {
            worst = Some(ProbeWitness { x: x.clone(), u: u.clone(), excess });
        }
    }
    let report = LyapunovReport { c5, c6, fit_samples: fit.len(), test_samples: test.len(), violations, worst };
    if report.violations > 0 {
        let w = report.worst.as_ref().expect("violations imply a witness");
        return Err(Error::Diagnostic(format!(
            "{} test-shell samples violate L𝒱 <= {c5:.4} − {c6:.4}|x|^k; worst x = {:?}, u = {:?}, excess {:.3e}",
            report.violations, w.x, w.u, w.excess
        )));
    }
    Ok(report)
}

/// Least-squares line through the per-bin maxima of `(h, L𝒱)`, shifted up
/// so that every fit sample lies under it.
fn fit_envelope(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    const BINS: usize = 20;
    let h_max = points.iter().map(|p| p.0).fold(0.0, f64::max);
    if points.len() < BINS || h_max <= 0.0 {
        return Err(Error::Diagnostic("too few fit samples for the Lyapunov envelope".into()));
    }
    let mut env = vec![(0.0, f64::NEG_INFINITY); BINS];
    for &(h, v) in points {
        let b = ((h / h_max * BINS as f64) as usize).min(BINS - 1);
        if v > env[b].1 {
            env[b] = (h, v);
        }
    }
    let env: Vec<(f64, f64)> = env.into_iter().filter(|e| e.1.is_finite()).collect();
    let m = env.len() as f64;
    let mh = env.iter().map(|e| e.0).sum::<f64>() / m;
    let mv = env.iter().map(|e| e.1).sum::<f64>() / m;
    let sxx: f64 = env.iter().map(|e| (e.0 - mh).powi(2)).sum();
    let sxy: f64 = env.iter().map(|e| (e.0 - mh) * (e.1 - mv)).sum();
    let slope = sxy / sxx;
    let c6 = -slope;
    if !(c6 > 0.0) {
        return Err(Error::Diagnostic(format!("fitted Lyapunov decay rate c6 = {c6} is not positive")));
    }
    let shift = points.iter().map(|&(h, v)| v + c6 * h).fold(f64::NEG_INFINITY, f64::max);
    let c5 = shift.max(mv + c6 * mh);
    if !(c5 > 0.0) {
        return Err(Error::Diagnostic(format!("fitted Lyapunov constant c5 = {c5} is not positive")));
    }
    Ok((c5, c6))
}
