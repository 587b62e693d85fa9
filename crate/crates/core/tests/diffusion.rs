use hwhelp_core::hjb::{evaluate_policy_ergodic, StencilMode};
use hwhelp_core::*;

#[test]
fn zero_policy_simulation_matches_the_grid_gain() {
    let p = ModelParams::reference();
    let c = CostSpec::linear(2);
    let grid = Grid::new(2, 6.0, 0.05).unwrap();
    let zeros = vec![0.0; grid.len() * 4];
    let (_, rho) = evaluate_policy_ergodic(&p, &c, &grid, &zeros, 0.0, StencilMode::CentralWhereMonotone).unwrap();
    let est = estimate_ergodic_cost(&p, &c, &MarkovPolicy::zero(2), &SimConfig::new(5e-3, 4000.0, 50.0, 21, 8)).unwrap();
    assert!((est.cost.mean - rho).abs() <= 2.0 * est.cost.half_width, "simulated {:?} vs grid gain {rho}", est.cost);
}

#[test]
fn fixed_help_lowers_the_simulated_cost() {
    let p = ModelParams::reference();
    let c = CostSpec::linear(2);
    let cfg = SimConfig::new(1e-2, 2000.0, 50.0, 8, 8);
    let zero = estimate_ergodic_cost(&p, &c, &MarkovPolicy::zero(2), &cfg).unwrap();
    let mut m = ControlMatrix::zeros(2);
    m.set(0, 1, 1.0);
    m.set(1, 0, 1.0);
    let full = estimate_ergodic_cost(&p, &c, &MarkovPolicy::fixed_projected(&p, m).unwrap(), &cfg).unwrap();
    assert!(full.cost.upper() < zero.cost.lower(), "{:?} vs {:?}", full.cost, zero.cost);
}

#[test]
fn replications_do_not_depend_on_the_thread_count() {
    let p = ModelParams::reference();
    let c = CostSpec::linear(2);
    let cfg = SimConfig::new(1e-2, 50.0, 5.0, 77, 5);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| estimate_ergodic_cost(&p, &c, &MarkovPolicy::zero(2), &cfg).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.paths, b.paths);
    let other = estimate_ergodic_cost(&p, &c, &MarkovPolicy::zero(2), &SimConfig::new(1e-2, 50.0, 5.0, 78, 5)).unwrap();
    assert_ne!(a.paths[0].mean_cost, other.paths[0].mean_cost);
}

#[test]
fn invalid_settings_are_rejected_with_paths() {
    let mut cfg = SimConfig::new(0.0, 10.0, 20.0, 1, 2);
    cfg.audit_rate = 2.0;
    match cfg.validate() {
        Err(Error::Argument(msg)) => {
            for path in ["sim.dt", "sim.burn_in", "sim.audit_rate"] {
                assert!(msg.contains(path), "{msg}");
            }
        }
        other => panic!("{other:?}"),
    }
}
