//! Cross-pool help policies for critically loaded multi-class many-server queues.
//!
//! The crate covers the limiting controlled diffusion (model, control set,
//! costs, HJB grid solver, Euler–Maruyama simulation) and the pre-limit
//! queueing systems (CTMC simulation, admissible floor policies, an exact
//! stationary oracle), plus the convergence experiment tying them together.

pub mod cost;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod hjb;
pub mod linalg;
pub mod model;
pub mod policy;
pub mod polytope;
pub mod queue;
pub mod rng;
pub mod stats;

pub use cost::{control_cost, perturbed_cost, running_cost, CostKind, CostSpec};
pub use diffusion::{
    estimate_ergodic_cost, lyapunov_probe, simulate_path, CostEstimate, LyapunovReport, LyapunovSpec, PathSummary, SimConfig,
};
pub use error::{Error, Result, Violation};
pub use experiment::{parse_config, run_convergence, ConvergenceRow, ConvergenceTable, ExperimentConfig};
pub use hjb::{epsilon_sweep, extract_policy, solve_discounted, solve_ergodic, vanishing_discount, Grid, HjbSolution, SolverConfig};
pub use model::{
    diffusion_coeff, limiting_drift, prelimit_drift, queue_map, scaling_sequence, ControlMatrix, ModelParams, ScaledSystemParams,
};
pub use policy::{MarkovPolicy, PolicyKind};
pub use polytope::{
    argmin_hamiltonian, brute_force_argmin, contains, hamiltonian_h, hamiltonian_h_eps, repair_to, ArgminConfig, FeasibilityContext,
    HamiltonianMinimizer,
};
pub use queue::{
    apply_policy, ctmc_step, estimate_cost, exact_stationary_oracle, occupation_histogram, QueuePolicy, QueueSimConfig, QueueState,
    ScaledView,
};
pub use stats::Estimate;
