//! Experiment configuration and the convergence experiment: HJB solves,
//! a diffusion cross-check, and queueing simulations of the n-th systems
//! under the extracted policy and under no help.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::{CostSpec, CostSpecRaw};
use crate::diffusion::{estimate_ergodic_cost, SimConfig};
use crate::error::{Error, Result, Violation};
use crate::hjb::{extract_policy, solve_ergodic, Boundary, Grid, InitialPolicy, SolverConfig, StencilMode};
use crate::model::{scaling_sequence, ModelParams, ModelParamsRaw};
use crate::queue::{estimate_cost, QueuePolicy, QueueSimConfig};
use crate::stats::Estimate;

/// Version tag written to every JSON sidecar.
pub const SCHEMA_VERSION: u32 = 1;

/// Centering terms `λ̂`, `μ̂` of the heavy-traffic scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hats {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub half_width: f64,
    pub spacing: f64,
}

fn default_alphas() -> Vec<f64> {
    vec![0.2, 0.1, 0.05]
}
fn default_tol_pde() -> f64 {
    1e-6
}
fn default_tol_policy() -> f64 {
    1e-9
}
fn default_max_outer() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// Strictly decreasing positive perturbation levels.
    pub epsilons: Vec<f64>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_tol_pde")]
    pub tol_pde: f64,
    #[serde(default = "default_tol_policy")]
    pub tol_policy: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default)]
    pub stencil: StencilMode,
    #[serde(default)]
    pub initial_policy: InitialPolicy,
}

impl SolverSection {
    /// Solver settings at perturbation level `epsilon`.
    pub fn solver_config(&self, epsilon: f64) -> SolverConfig {
        SolverConfig {
            epsilon,
            alpha: None,
            tol_pde: self.tol_pde,
            tol_policy: self.tol_policy,
            max_outer: self.max_outer,
            boundary: self.boundary,
            stencil: self.stencil,
            initial_policy: self.initial_policy,
            ..SolverConfig::new(epsilon)
        }
    }

    /// The smallest perturbation level.
    pub fn epsilon_min(&self) -> f64 {
        self.epsilons.last().copied().unwrap_or(0.0)
    }
}

fn default_audit_rate() -> f64 {
    0.01
}
fn default_truncation() -> u64 {
    40
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueSection {
    /// Strictly increasing system sizes.
    pub n: Vec<u64>,
    pub horizon: f64,
    pub burn_in: f64,
    pub replications: usize,
    /// Defaults to the simulation seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_audit_rate")]
    pub audit_rate: f64,
    /// Per-class truncation `K` of the exact oracle.
    #[serde(default = "default_truncation")]
    pub truncation: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_output_dir")]
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_output_dir() }
    }
}

/// Validated experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    pub hats: Hats,
    pub cost: CostSpec,
    pub grid: GridSection,
    pub solver: SolverSection,
    pub sim: SimConfig,
    pub queue: QueueSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Wire form with unvalidated model and cost sections.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfigRaw {
    model: ModelParamsRaw,
    #[serde(default)]
    hats: Option<Hats>,
    cost: CostSpecRaw,
    grid: GridSection,
    solver: SolverSection,
    sim: SimConfig,
    queue: QueueSection,
    #[serde(default)]
    output: OutputSection,
}

fn push(out: &mut Vec<Violation>, path: impl Into<String>, msg: impl Into<String>) {
    out.push(Violation::new(path, msg));
}

impl ExperimentConfigRaw {
    fn violations(&self) -> Vec<Violation> {
        let mut out = self.model.violations("model");
        let d = self.model.lambda.len();
        for i in 0..d.min(self.model.mu.len()) {
            if let (Some(&l), Some(&m)) = (self.model.lambda.get(i), self.model.mu[i].get(i)) {
                if (l - m).abs() > 1e-12 * l.abs().max(m.abs()) {
                    push(
                        &mut out,
                        format!("model.lambda[{i}]"),
                        format!("critical loading requires lambda = mu[{i}][{i}], got {l} vs {m}"),
                    );
                }
            }
        }
        out.extend(self.cost.violations("cost"));
        if self.cost.h.len() != d {
            push(&mut out, "cost.h", format!("expected length {d}"));
        }
        if let Some(h) = &self.hats {
            if h.lambda.len() != d {
                push(&mut out, "hats.lambda", format!("expected length {d}"));
            }
            if h.mu.len() != d {
                push(&mut out, "hats.mu", format!("expected length {d}"));
            }
            for i in 0..d.min(h.lambda.len()).min(h.mu.len()).min(self.model.ell.len()) {
                let gap = h.lambda[i] - h.mu[i] - self.model.ell[i];
                if !(gap.abs() <= 1e-12 * (1.0 + self.model.ell[i].abs())) {
                    push(&mut out, format!("hats.lambda[{i}]"), format!("lambda_hat − mu_hat must equal model.ell[{i}]"));
                }
            }
        }
        let g = &self.grid;
        if !(g.half_width > 0.0 && g.half_width.is_finite()) {
            push(&mut out, "grid.half_width", "must be > 0");
        }
        if !(g.spacing > 0.0 && g.spacing.is_finite()) {
            push(&mut out, "grid.spacing", "must be > 0");
        } else if g.half_width > 0.0 {
            let r = g.half_width / g.spacing;
            if (r - r.round()).abs() > 1e-9 * r.max(1.0) || r.round() < 1.0 {
                push(&mut out, "grid.spacing", "half_width / spacing must be a positive integer");
            }
        }
        let s = &self.solver;
        if s.epsilons.is_empty() {
            push(&mut out, "solver.epsilons", "must be non-empty");
        }
        for (i, &e) in s.epsilons.iter().enumerate() {
            if !(e > 0.0 && e.is_finite()) {
                push(&mut out, format!("solver.epsilons[{i}]"), "must be > 0");
            }
        }
        if s.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            push(&mut out, "solver.epsilons", "must be strictly decreasing");
        }
        for (i, &a) in s.alphas.iter().enumerate() {
            if !(a > 0.0 && a < 1.0) {
                push(&mut out, format!("solver.alphas[{i}]"), "must lie in (0, 1)");
            }
        }
        if s.alphas.windows(2).any(|w| w[1] >= w[0]) {
            push(&mut out, "solver.alphas", "must be strictly decreasing");
        }
        if !(s.tol_pde > 0.0) {
            push(&mut out, "solver.tol_pde", "must be > 0");
        }
        if !(s.tol_policy > 0.0) {
            push(&mut out, "solver.tol_policy", "must be > 0");
        }
        if s.max_outer == 0 {
            push(&mut out, "solver.max_outer", "must be >= 1");
        }
        out.extend(self.sim.violations("sim"));
        if let Some(x0) = &self.sim.x0 {
            if x0.len() != d {
                push(&mut out, "sim.x0", format!("expected length {d}"));
            }
        }
        let q = &self.queue;
        if q.n.is_empty() {
            push(&mut out, "queue.n", "must be non-empty");
        }
        if q.n.iter().any(|&n| n == 0) {
            push(&mut out, "queue.n", "system sizes must be >= 1");
        }
        if q.n.windows(2).any(|w| w[1] <= w[0]) {
            push(&mut out, "queue.n", "must be strictly increasing");
        }
        if !(q.horizon > 0.0 && q.horizon.is_finite()) {
            push(&mut out, "queue.horizon", "must be > 0");
        }
        if !(q.burn_in >= 0.0 && q.burn_in < q.horizon) {
            push(&mut out, "queue.burn_in", "must lie in [0, horizon)");
        }
        if q.replications < 2 {
            push(&mut out, "queue.replications", "must be >= 2");
        }
        if !(0.0..=1.0).contains(&q.audit_rate) {
            push(&mut out, "queue.audit_rate", "must lie in [0, 1]");
        }
        if q.truncation == 0 {
            push(&mut out, "queue.truncation", "must be >= 1");
        }
        if self.sim.replications < 2 {
            push(&mut out, "sim.replications", "must be >= 2");
        }
        out
    }
}

/// Parses and validates a JSON configuration, reporting every violation.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: ExperimentConfigRaw = serde_json::from_str(text).map_err(|e| Error::config("$", format!("malformed configuration: {e}")))?;
    let violations = raw.violations();
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    let model = ModelParams::try_from(raw.model)?;
    let hats = raw.hats.unwrap_or_else(|| Hats { lambda: model.ell().to_vec(), mu: vec![0.0; model.d()] });
    Ok(ExperimentConfig {
        model,
        hats,
        cost: CostSpec::try_from(raw.cost)?,
        grid: raw.grid,
        solver: raw.solver,
        sim: raw.sim,
        queue: raw.queue,
        output: raw.output,
    })
}

impl ExperimentConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.model.d(), self.grid.half_width, self.grid.spacing)
    }

    /// Overrides the simulation and queue seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self.queue.seed = Some(seed);
        self
    }

    pub fn queue_seed(&self) -> u64 {
        self.queue.seed.unwrap_or(self.sim.seed)
    }

    pub fn queue_sim_config(&self) -> QueueSimConfig {
        QueueSimConfig {
            horizon: self.queue.horizon,
            burn_in: self.queue.burn_in,
            seed: self.queue_seed(),
            replications: self.queue.replications,
            audit_rate: self.queue.audit_rate,
            x0: None,
        }
    }

    /// The two-class reference configuration with the given output directory.
    pub fn reference(dir: impl Into<PathBuf>) -> Self {
        let model = ModelParams::reference();
        Self {
            hats: Hats { lambda: model.ell().to_vec(), mu: vec![0.0; 2] },
            model,
            cost: CostSpec::linear(2),
            grid: GridSection { half_width: 6.0, spacing: 0.05 },
            solver: SolverSection {
                epsilons: vec![0.1, 0.03, 0.01],
                alphas: default_alphas(),
                tol_pde: default_tol_pde(),
                tol_policy: default_tol_policy(),
                max_outer: default_max_outer(),
                boundary: Boundary::Reflecting,
                stencil: StencilMode::CentralWhereMonotone,
                initial_policy: InitialPolicy::Zero,
            },
            sim: SimConfig::new(1e-3, 2e4, 100.0, 1, 16),
            queue: QueueSection {
                n: vec![25, 100, 400],
                horizon: 5000.0,
                burn_in: 50.0,
                replications: 16,
                seed: None,
                audit_rate: default_audit_rate(),
                truncation: default_truncation(),
            },
            output: OutputSection { dir: dir.into() },
        }
    }
}

/// One row of the convergence table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: u64,
    pub v_policy: f64,
    pub ci_policy: f64,
    pub v_zero: f64,
    pub ci_zero: f64,
    pub rho_eps: f64,
    pub rho_star: f64,
    pub gap: f64,
    pub events_policy: u64,
    pub max_floor_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub epsilon: f64,
    pub rho_star: f64,
    pub rho_eps: f64,
    /// Diffusion estimate of `J_ε` under the extracted policy.
    pub diffusion: Estimate,
    pub rows: Vec<ConvergenceRow>,
    /// `V̂ⁿ(policy) ≤ V̂ⁿ(zero) + CI` at every n.
    pub ordering_holds: bool,
    /// `|V̂ⁿ(policy) − ρ*|` nonincreasing in n within the combined CI.
    pub gap_nonincreasing: bool,
}

impl ConvergenceTable {
    /// Fails with a diagnostic error if either qualitative property fails.
    pub fn check(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !self.ordering_holds {
            bad.push("the extracted policy is costlier than no help beyond the CI at some n");
        }
        if !self.gap_nonincreasing {
            bad.push("|V̂ⁿ(policy) − ρ*| increases with n beyond the combined CI");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Diagnostic(bad.join("; ")))
        }
    }
}

/// Combined half-width of the difference of two independent estimates.
pub fn combined_half_width(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

#[derive(Serialize)]
struct Sidecar<'a> {
    schema_version: u32,
    status: &'a str,
    stage: &'a str,
    config: &'a ExperimentConfig,
    epsilon: f64,
    rho_star: Option<f64>,
    rho_eps: Option<f64>,
    diffusion: Option<&'a Estimate>,
    ordering_holds: Option<bool>,
    gap_nonincreasing: Option<bool>,
}

struct Progress<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a Path,
    epsilon: f64,
    rho_star: Option<f64>,
    rho_eps: Option<f64>,
    diffusion: Option<Estimate>,
    rows: Vec<ConvergenceRow>,
}

impl Progress<'_> {
    fn persist(&self, status: &str, stage: &str, flags: Option<(bool, bool)>) -> Result<()> {
        write_rows(&self.dir.join("convergence.csv"), &self.rows)?;
        let side = Sidecar {
            schema_version: SCHEMA_VERSION,
            status,
            stage,
            config: self.cfg,
            epsilon: self.epsilon,
            rho_star: self.rho_star,
            rho_eps: self.rho_eps,
            diffusion: self.diffusion.as_ref(),
            ordering_holds: flags.map(|f| f.0),
            gap_nonincreasing: flags.map(|f| f.1),
        };
        fs::write(self.dir.join("convergence.json"), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }
}

/// Writes rows as CSV with a header line.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the convergence experiment and writes `convergence.csv` and
/// `convergence.json` to the output directory after every stage.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceTable> {
    let dir = cfg.output.dir.as_path();
    fs::create_dir_all(dir)?;
    let eps = cfg.solver.epsilon_min();
    let mut prog = Progress { cfg, dir, epsilon: eps, rho_star: None, rho_eps: None, diffusion: None, rows: Vec::new() };
    let fail = |prog: &Progress, stage: &str, e: Error| -> Error {
        let _ = prog.persist("failed", stage, None);
        e.in_stage(stage)
    };
    let grid = cfg.grid().map_err(|e| fail(&prog, "grid", e))?;
    let star = solve_ergodic(&cfg.model, &cfg.cost, &grid, &cfg.solver.solver_config(0.0)).map_err(|e| fail(&prog, "hjb eps=0", e))?;
    prog.rho_star = Some(star.rho);
    let sol = solve_ergodic(&cfg.model, &cfg.cost, &grid, &cfg.solver.solver_config(eps)).map_err(|e| fail(&prog, "hjb eps_min", e))?;
    prog.rho_eps = Some(sol.rho);
    let policy = extract_policy(&sol).map_err(|e| fail(&prog, "extract policy", e))?;
    prog.persist("partial", "hjb", None)?;

    let mut sim = cfg.sim.clone();
    sim.control_penalty = eps;
    let diff = estimate_ergodic_cost(&cfg.model, &cfg.cost, &policy, &sim).map_err(|e| fail(&prog, "diffusion", e))?;
    prog.diffusion = Some(diff.cost);
    prog.persist("partial", "diffusion", None)?;

    let qcfg = cfg.queue_sim_config();
    let floor = QueuePolicy::FloorFeedback(policy);
    for &n in &cfg.queue.n {
        let stage = format!("queue n={n}");
        let sys = scaling_sequence(&cfg.model, &cfg.hats.lambda, &cfg.hats.mu, n).map_err(|e| fail(&prog, &stage, e))?;
        let pol = estimate_cost(&sys, &cfg.cost, &floor, &qcfg).map_err(|e| fail(&prog, &stage, e))?;
        let zero = estimate_cost(&sys, &cfg.cost, &QueuePolicy::ZeroHelp, &qcfg).map_err(|e| fail(&prog, &stage, e))?;
        prog.rows.push(ConvergenceRow {
            n,
            v_policy: pol.cost.mean,
            ci_policy: pol.cost.half_width,
            v_zero: zero.cost.mean,
            ci_zero: zero.cost.half_width,
            rho_eps: sol.rho,
            rho_star: star.rho,
            gap: (pol.cost.mean - star.rho).abs(),
            events_policy: pol.paths.iter().map(|p| p.events).sum(),
            max_floor_gap: pol.paths.iter().map(|p| p.max_floor_gap).fold(0.0, f64::max),
        });
        prog.persist("partial", &stage, None)?;
    }
    let ordering_holds = prog.rows.iter().all(|r| r.v_policy <= r.v_zero + combined_half_width(r.ci_policy, r.ci_zero));
    let gap_nonincreasing = prog.rows.windows(2).all(|w| w[1].gap <= w[0].gap + combined_half_width(w[0].ci_policy, w[1].ci_policy));
    prog.persist("complete", "done", Some((ordering_holds, gap_nonincreasing)))?;
    Ok(ConvergenceTable {
        epsilon: eps,
        rho_star: star.rho,
        rho_eps: sol.rho,
        diffusion: diff.cost,
        rows: prog.rows,
        ordering_holds,
        gap_nonincreasing,
    })
}
