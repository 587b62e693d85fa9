use hwhelp_core::queue::PolicyScratch;
use hwhelp_core::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn one_class(hat_lambda: f64, n: u64) -> ScaledSystemParams {
    let p = ModelParams::new(vec![1.0], vec![vec![1.0]], vec![1.0], vec![hat_lambda], None).unwrap();
    scaling_sequence(&p, &[hat_lambda], &[0.0], n).unwrap()
}

/// Stationary `E[(X − n)⁺]/√n` of the M/M/n+M chain on `{0, …, k}` with
/// arrival rate `lam`, per-server rate 1 and abandonment rate 1, by the
/// product formula.
fn mmnm_recursion(lam: f64, n: u64, k: u64) -> f64 {
    let mut w = vec![1.0f64; k as usize + 1];
    for x in 1..=k as usize {
        let death = (x as f64).min(n as f64) + (x as f64 - n as f64).max(0.0);
        w[x] = w[x - 1] * lam / death;
    }
    let total: f64 = w.iter().sum();
    let s = (n as f64).sqrt();
    w.iter().enumerate().map(|(x, wx)| wx / total * (x as f64 - n as f64).max(0.0) / s).sum()
}

#[test]
fn oracle_matches_the_product_formula() {
    let cost = CostSpec::polynomial(vec![1.0], vec![1.0]).unwrap();
    for (hat, n, k) in [(0.0, 1, 60), (0.5, 4, 60), (-1.0, 9, 80)] {
        let sys = one_class(hat, n);
        let oracle = exact_stationary_oracle(&sys, &cost, &QueuePolicy::ZeroHelp, k).unwrap();
        let lam = n as f64 + (n as f64).sqrt() * hat;
        let reference = mmnm_recursion(lam, n, k);
        assert!((oracle.value - reference).abs() <= 1e-9, "n = {n}: {} vs {reference}", oracle.value);
        assert!(oracle.residual <= 1e-10);
        let mass: f64 = oracle.pi.iter().sum();
        assert!((mass - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn oracle_is_insensitive_to_the_truncation() {
    let cost = CostSpec::polynomial(vec![1.0], vec![1.0]).unwrap();
    let sys = one_class(0.0, 1);
    let a = exact_stationary_oracle(&sys, &cost, &QueuePolicy::ZeroHelp, 60).unwrap();
    let b = exact_stationary_oracle(&sys, &cost, &QueuePolicy::ZeroHelp, 80).unwrap();
    assert!((a.value - b.value).abs() < 1e-8);
}

#[test]
fn oracle_with_zero_cost_is_zero() {
    let p = ModelParams::reference();
    let sys = scaling_sequence(&p, &[-1.0, -1.0], &[0.0, 0.0], 4).unwrap();
    let r = exact_stationary_oracle(&sys, &CostSpec::zero(2), &QueuePolicy::ZeroHelp, 12).unwrap();
    assert_eq!(r.value, 0.0);
}

#[test]
fn two_class_simulation_agrees_with_the_oracle() {
    let p = ModelParams::reference();
    let c = CostSpec::linear(2);
    let sys = scaling_sequence(&p, &[-1.0, -1.0], &[0.0, 0.0], 4).unwrap();
    let grid = Grid::new(2, 3.0, 0.1).unwrap();
    let sol = solve_ergodic(&p, &c, &grid, &SolverConfig::new(0.05)).unwrap();
    let policy = QueuePolicy::FloorFeedback(extract_policy(&sol).unwrap());
    for pol in [QueuePolicy::ZeroHelp, policy] {
        let oracle = exact_stationary_oracle(&sys, &c, &pol, 30).unwrap();
        let est = estimate_cost(&sys, &c, &pol, &QueueSimConfig::new(4000.0, 20.0, 17, 8)).unwrap();
        assert!(
            (est.cost.mean - oracle.value).abs() <= 2.0 * est.cost.half_width,
            "{}: simulated {:?} vs oracle {}",
            pol.name(),
            est.cost,
            oracle.value
        );
    }
}

#[test]
fn events_are_reproducible_across_thread_counts() {
    let p = ModelParams::reference();
    let c = CostSpec::linear(2);
    let sys = scaling_sequence(&p, &[-1.0, -1.0], &[0.0, 0.0], 25).unwrap();
    let cfg = QueueSimConfig::new(100.0, 10.0, 3, 6);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| estimate_cost(&sys, &c, &QueuePolicy::ZeroHelp, &cfg).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.paths, b.paths);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn floor_policy_states_satisfy_the_invariants(
        n in 1u64..500,
        xhat in prop::collection::vec(-4.0f64..4.0, 2),
        u01 in 0.0f64..1.0,
        u10 in 0.0f64..1.0,
    ) {
        let p = ModelParams::reference();
        let mut m = ControlMatrix::zeros(2);
        m.set(0, 1, u01);
        m.set(1, 0, u10);
        let policy = QueuePolicy::FloorFeedback(MarkovPolicy::fixed_projected(&p, m).unwrap());
        let st = apply_policy(&QueueState::from_scaled(n, &xhat), &policy).unwrap();
        prop_assert!(st.check_invariants().is_ok(), "{:?}", st);
        let view = st.scaled();
        let ctx = FeasibilityContext::new(&p, &view.x).unwrap();
        let u = ControlMatrix::from_flat(2, &view.u).unwrap();
        prop_assert!(contains(&ctx, &u, 1e-9).unwrap());
    }

    #[test]
    fn ctmc_steps_move_one_customer_and_keep_invariants(
        n in 1u64..200,
        seed in any::<u64>(),
        u01 in 0.0f64..1.0,
    ) {
        let p = ModelParams::reference();
        let sys = scaling_sequence(&p, &[-1.0, -1.0], &[0.0, 0.0], n).unwrap();
        let mut m = ControlMatrix::zeros(2);
        m.set(0, 1, u01);
        let policy = QueuePolicy::FloorFeedback(MarkovPolicy::fixed_projected(&p, m).unwrap());
        let mut state = apply_policy(&QueueState::with_totals(n, vec![n, n]), &policy).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scratch = PolicyScratch::default();
        for _ in 0..500 {
            let before: u64 = state.x.iter().sum();
            let (hold, _) = ctmc_step(&sys, &mut state, &policy, &mut rng, &mut scratch).unwrap();
            let after: u64 = state.x.iter().sum();
            prop_assert!(hold > 0.0 && hold.is_finite());
            prop_assert_eq!(before.abs_diff(after), 1);
            prop_assert!(state.check_invariants().is_ok());
        }
    }
}
