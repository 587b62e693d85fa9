//! `hwhelp`: command-line front end for the HJB solver, the diffusion and
//! queueing simulators, the exact oracle and the convergence experiment.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hwhelp_core::experiment::write_rows;
use hwhelp_core::hjb::{epsilon_sweep, read_solution, write_solution};
use hwhelp_core::polytope::grid_resolution_bound;
use hwhelp_core::queue::{occupation_histogram, BinSpec};
use hwhelp_core::{
    argmin_hamiltonian, brute_force_argmin, estimate_cost, estimate_ergodic_cost, exact_stationary_oracle, extract_policy,
    hamiltonian_h_eps, parse_config, run_convergence, scaling_sequence, solve_ergodic, ArgminConfig, Error, ExperimentConfig,
    FeasibilityContext, HjbSolution, QueuePolicy,
};
use serde::Serialize;

const SCHEMA_VERSION: u32 = hwhelp_core::experiment::SCHEMA_VERSION;

#[derive(Parser)]
#[command(name = "hwhelp", version, about = "Solve, simulate and cross-check cross-pool help policies for many-server queues")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; the built-in two-class reference when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed overriding the simulation and queue seeds of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the ergodic HJB equation at every configured ε and at ε = 0.
    HjbSolve,
    /// Simulate the limiting diffusion under the extracted smallest-ε policy.
    DiffusionSim {
        /// Read the policy from a saved solution instead of solving.
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Simulate the n-th queueing systems under the extracted policy and under no help.
    QueueSim {
        #[arg(long)]
        solution: Option<PathBuf>,
        /// Also write the occupation histogram of replication 0 with this many cells per axis.
        #[arg(long)]
        histogram_bins: Option<usize>,
    },
    /// Compare queue simulations against the exact truncated stationary solve.
    OracleCheck {
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Run the full convergence experiment.
    Converge,
    /// Dump the Hamiltonian minimizer and its brute-force counterpart at one point.
    Oracle {
        /// State x, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Vec<f64>,
        /// Gradient p, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        p: Vec<f64>,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 201)]
        grid_points: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_config(&text)?
        }
        None => ExperimentConfig::reference("out"),
    };
    if let Some(dir) = &common.out {
        cfg.output.dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn epsilon_tag(eps: f64) -> String {
    format!("{eps}").replace('.', "p")
}

/// The smallest-ε solution, read from `path` or solved from the configuration.
fn policy_solution(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<HjbSolution> {
    match path {
        Some(p) => Ok(read_solution(p)?),
        None => {
            let eps = cfg.solver.epsilon_min();
            Ok(solve_ergodic(&cfg.model, &cfg.cost, &cfg.grid()?, &cfg.solver.solver_config(eps))?)
        }
    }
}

#[derive(Serialize)]
struct Summary<T: Serialize> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

fn hjb_solve(cfg: &ExperimentConfig) -> Result<()> {
    let dir = &cfg.output.dir;
    let grid = cfg.grid()?;
    let base = cfg.solver.solver_config(0.0);
    let (sols, report) = epsilon_sweep(&cfg.model, &cfg.cost, &grid, &base, &cfg.solver.epsilons)?;
    for sol in &sols {
        write_solution(sol, &dir.join(format!("hjb_eps{}.csv", epsilon_tag(sol.meta.epsilon))))?;
    }
    write_rows(&dir.join("hjb_sweep.csv"), &report.entries)?;
    write_json(&dir.join("hjb_sweep.json"), &Summary { schema_version: SCHEMA_VERSION, body: &report })?;
    for e in &report.entries {
        println!("eps {:<8} rho {:.6}  iterations {:>3}  residual {:.2e}", e.epsilon, e.rho, e.iterations, e.max_residual);
    }
    report.check()?;
    Ok(())
}

#[derive(Serialize)]
struct DiffusionRow {
    replication: u64,
    seed: u64,
    mean_cost: f64,
    moment: f64,
    steps: u64,
    audited: u64,
}

fn diffusion_sim(cfg: &ExperimentConfig, solution: Option<&Path>) -> Result<()> {
    let sol = policy_solution(cfg, solution)?;
    let policy = extract_policy(&sol)?;
    let mut sim = cfg.sim.clone();
    sim.control_penalty = sol.meta.epsilon;
    let est = estimate_ergodic_cost(&sol.params, &sol.cost, &policy, &sim)?;
    let rows: Vec<DiffusionRow> = est
        .paths
        .iter()
        .map(|p| DiffusionRow {
            replication: p.replication,
            seed: p.seed,
            mean_cost: p.mean_cost,
            moment: p.moment,
            steps: p.steps,
            audited: p.audited,
        })
        .collect();
    let dir = &cfg.output.dir;
    write_rows(&dir.join("diffusion.csv"), &rows)?;
    #[derive(Serialize)]
    struct Body<'a> {
        epsilon: f64,
        rho_eps: f64,
        cost: hwhelp_core::Estimate,
        moment: hwhelp_core::Estimate,
        sim: &'a hwhelp_core::SimConfig,
    }
    write_json(
        &dir.join("diffusion.json"),
        &Summary {
            schema_version: SCHEMA_VERSION,
            body: Body { epsilon: sol.meta.epsilon, rho_eps: sol.rho, cost: est.cost, moment: est.moment, sim: &sim },
        },
    )?;
    println!("simulated cost {:.5} ± {:.5}  (rho_eps {:.5})", est.cost.mean, est.cost.half_width, sol.rho);
    Ok(())
}

#[derive(Serialize)]
struct QueueRow {
    n: u64,
    policy: &'static str,
    replication: u64,
    seed: u64,
    horizon: f64,
    mean_cost: f64,
    second_moment: f64,
    events: u64,
    audited: u64,
    max_floor_gap: f64,
}

#[derive(Serialize)]
struct HistogramRow {
    n: u64,
    policy: &'static str,
    cell: String,
    center: String,
    mass: f64,
}

fn queue_sim(cfg: &ExperimentConfig, solution: Option<&Path>, histogram_bins: Option<usize>) -> Result<()> {
    let sol = policy_solution(cfg, solution)?;
    let policies = [QueuePolicy::FloorFeedback(extract_policy(&sol)?), QueuePolicy::ZeroHelp];
    let qcfg = cfg.queue_sim_config();
    let mut rows = Vec::new();
    let mut hist = Vec::new();
    for &n in &cfg.queue.n {
        let sys = scaling_sequence(&cfg.model, &cfg.hats.lambda, &cfg.hats.mu, n)?;
        for policy in &policies {
            let est = estimate_cost(&sys, &cfg.cost, policy, &qcfg)?;
            println!(
                "n {n:<5} {:<15} cost {:.5} ± {:.5}  |X|^2 {:.4}",
                policy.name(),
                est.cost.mean,
                est.cost.half_width,
                est.second_moment.mean
            );
            rows.extend(est.paths.iter().map(|p| QueueRow {
                n,
                policy: policy.name(),
                replication: p.replication,
                seed: p.seed,
                horizon: qcfg.horizon,
                mean_cost: p.mean_cost,
                second_moment: p.second_moment,
                events: p.events,
                audited: p.audited,
                max_floor_gap: p.max_floor_gap,
            }));
            if let Some(bins) = histogram_bins {
                let spec = BinSpec { lo: -4.0, hi: 4.0, bins };
                let h = occupation_histogram(&sys, policy, qcfg.horizon, spec.clone(), qcfg.seed)?;
                for (cell, mass) in h.binned() {
                    let fmt = |v: Vec<String>| v.join(" ");
                    hist.push(HistogramRow {
                        n,
                        policy: policy.name(),
                        center: fmt(cell.iter().map(|&c| spec.center(c).to_string()).collect()),
                        cell: fmt(cell.iter().map(|c| c.to_string()).collect()),
                        mass: mass / h.total_time,
                    });
                }
            }
        }
    }
    let dir = &cfg.output.dir;
    write_rows(&dir.join("queue_paths.csv"), &rows)?;
    if histogram_bins.is_some() {
        write_rows(&dir.join("queue_histogram.csv"), &hist)?;
    }
    write_json(&dir.join("queue.json"), &Summary { schema_version: SCHEMA_VERSION, body: &cfg.queue })?;
    Ok(())
}

#[derive(Serialize)]
struct OracleRow {
    n: u64,
    policy: &'static str,
    truncation: u64,
    states: usize,
    oracle_value: f64,
    oracle_second_moment: f64,
    residual: f64,
    sim_mean: f64,
    sim_half_width: f64,
    covered: bool,
}

fn oracle_check(cfg: &ExperimentConfig, solution: Option<&Path>) -> Result<()> {
    let sol = policy_solution(cfg, solution)?;
    let policies = [QueuePolicy::FloorFeedback(extract_policy(&sol)?), QueuePolicy::ZeroHelp];
    let qcfg = cfg.queue_sim_config();
    let k = cfg.queue.truncation;
    let mut rows = Vec::new();
    for &n in &cfg.queue.n {
        let sys = scaling_sequence(&cfg.model, &cfg.hats.lambda, &cfg.hats.mu, n)?;
        if (k as f64) < n as f64 + 6.0 * (n as f64).sqrt() {
            eprintln!("warning: truncation K = {k} is tight for n = {n}; the oracle sees a reduced system");
        }
        for policy in &policies {
            let oracle = exact_stationary_oracle(&sys, &cfg.cost, policy, k)?;
            let est = estimate_cost(&sys, &cfg.cost, policy, &qcfg)?;
            let covered = est.cost.covers(oracle.value);
            println!(
                "n {n:<5} {:<15} oracle {:.6}  simulated {:.6} ± {:.6}  {}",
                policy.name(),
                oracle.value,
                est.cost.mean,
                est.cost.half_width,
                if covered { "covered" } else { "NOT covered" }
            );
            rows.push(OracleRow {
                n,
                policy: policy.name(),
                truncation: k,
                states: oracle.states,
                oracle_value: oracle.value,
                oracle_second_moment: oracle.second_moment,
                residual: oracle.residual,
                sim_mean: est.cost.mean,
                sim_half_width: est.cost.half_width,
                covered,
            });
        }
    }
    let dir = &cfg.output.dir;
    write_rows(&dir.join("oracle_check.csv"), &rows)?;
    write_json(&dir.join("oracle_check.json"), &Summary { schema_version: SCHEMA_VERSION, body: &cfg.queue })?;
    Ok(())
}

fn converge(cfg: &ExperimentConfig) -> Result<()> {
    let table = run_convergence(cfg)?;
    println!(
        "rho* {:.5}  rho_eps {:.5}  diffusion {:.5} ± {:.5}",
        table.rho_star, table.rho_eps, table.diffusion.mean, table.diffusion.half_width
    );
    for r in &table.rows {
        println!("n {:<5} policy {:.5} ± {:.5}  zero {:.5} ± {:.5}  gap {:.5}", r.n, r.v_policy, r.ci_policy, r.v_zero, r.ci_zero, r.gap);
    }
    table.check()?;
    Ok(())
}

fn oracle(cfg: &ExperimentConfig, x: &[f64], p: &[f64], epsilon: f64, grid_points: usize) -> Result<()> {
    let ctx = FeasibilityContext::new(&cfg.model, x)?;
    let u = argmin_hamiltonian(&cfg.model, &cfg.cost, &ctx, p, &ArgminConfig::new(epsilon))?;
    let h = hamiltonian_h_eps(&cfg.model, &cfg.cost, &ctx, p, epsilon)?;
    let (bu, bh) = brute_force_argmin(&cfg.model, &cfg.cost, &ctx, p, epsilon, grid_points)?;
    let bound = grid_resolution_bound(&cfg.model, &cfg.cost, x, p, &u, epsilon, grid_points)?;
    let dump = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "x": x,
        "p": p,
        "epsilon": epsilon,
        "grid_points": grid_points,
        "solver": { "u": u, "h": h },
        "brute_force": { "u": bu, "h": bh },
        "grid_resolution_bound": bound,
    });
    println!("{}", serde_json::to_string_pretty(&dump)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(k) = cli.common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global().map_err(|e| Error::Argument(format!("--threads: {e}")))?;
    }
    let cfg = load_config(&cli.common)?;
    if !matches!(cli.command, Command::Oracle { .. }) {
        fs::create_dir_all(&cfg.output.dir).with_context(|| format!("creating {}", cfg.output.dir.display()))?;
    }
    match cli.command {
        Command::HjbSolve => hjb_solve(&cfg),
        Command::DiffusionSim { solution } => diffusion_sim(&cfg, solution.as_deref()),
        Command::QueueSim { solution, histogram_bins } => queue_sim(&cfg, solution.as_deref(), histogram_bins),
        Command::OracleCheck { solution } => oracle_check(&cfg, solution.as_deref()),
        Command::Converge => converge(&cfg),
        Command::Oracle { x, p, epsilon, grid_points } => oracle(&cfg, &x, &p, epsilon, grid_points),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) => e.exit_code() as u8,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
