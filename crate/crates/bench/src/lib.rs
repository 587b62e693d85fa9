//! Shared fixtures for the benchmarks.

use hwhelp_core::{extract_policy, solve_ergodic, CostSpec, Grid, MarkovPolicy, ModelParams, SolverConfig};

/// The reference two-class model with linear cost.
pub fn reference() -> (ModelParams, CostSpec) {
    (ModelParams::reference(), CostSpec::linear(2))
}

/// A feedback policy from a coarse reference solve at `epsilon`.
pub fn coarse_policy(epsilon: f64) -> MarkovPolicy {
    let (p, c) = reference();
    let grid = Grid::new(2, 4.0, 0.1).expect("valid grid");
    let sol = solve_ergodic(&p, &c, &grid, &SolverConfig::new(epsilon)).expect("coarse solve converges");
    extract_policy(&sol).expect("policy extraction")
}
