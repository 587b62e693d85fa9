//! Grid solver for the ergodic and discounted HJB equations of the limiting
//! diffusion, by policy iteration on a monotone Markov-chain approximation.

mod generator;
mod grid;
mod io;
mod solver;

pub use generator::{discretize_generator, verify_generator, Boundary, StencilMode};
pub use grid::{Grid, DEFAULT_MAX_NODES};
pub use io::{read_solution, write_solution, SOLUTION_SCHEMA_VERSION};
pub use solver::{
    epsilon_sweep, evaluate_policy_ergodic, extract_policy, initial_policy_field, solve_discounted, solve_ergodic, solve_ergodic_from,
    vanishing_discount, HjbSolution, InitialPolicy, SolveMeta, SolverConfig, SweepEntry, SweepReport, VanishingDiscountReport,
    SWEEP_MONOTONE_TOL,
};
