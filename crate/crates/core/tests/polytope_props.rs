use hwhelp_core::polytope::hamiltonian_objective;
use hwhelp_core::*;
use proptest::prelude::*;

fn model(d: usize, mu_off: f64) -> ModelParams {
    ModelParams::symmetric(vec![1.0; d], vec![1.0; d], mu_off, vec![1.0; d], vec![-1.0; d]).unwrap()
}

/// Shrinks `u` towards 0 until it lies in `M(x)`.
fn shrink_into(ctx: &FeasibilityContext, u: ControlMatrix) -> ControlMatrix {
    let d = u.d();
    let zero = ControlMatrix::zeros(d);
    let mut t = 1.0;
    while t > 1e-12 {
        let v = zero.lerp(&u, t);
        if contains(ctx, &v, 0.0).unwrap() {
            return v;
        }
        t *= 0.5;
    }
    zero
}

fn point(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn argmin_is_feasible_and_obeys_the_zero_column_rule(
        d in 2usize..=3,
        seed_x in point(3),
        seed_p in point(3),
        mu_off in 0.2f64..1.5,
        eps in 0.01f64..1.0,
    ) {
        let p = model(d, mu_off);
        let c = CostSpec::linear(d);
        let (x, q) = (&seed_x[..d], &seed_p[..d]);
        let ctx = FeasibilityContext::new(&p, x).unwrap();
        let u = argmin_hamiltonian(&p, &c, &ctx, q, &ArgminConfig::new(eps)).unwrap();
        prop_assert!(contains(&ctx, &u, 1e-9).unwrap());
        for j in 0..d {
            if x[j] >= 0.0 {
                for k in 0..d {
                    prop_assert!(u.get(k, j) <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn perturbed_hamiltonian_is_sandwiched(
        seed_x in point(2),
        seed_p in point(2),
        eps in 0.001f64..0.5,
    ) {
        let p = model(2, 0.6);
        let c = CostSpec::linear(2);
        let ctx = FeasibilityContext::new(&p, &seed_x).unwrap();
        let h = hamiltonian_h(&p, &c, &ctx, &seed_p).unwrap();
        let he = hamiltonian_h_eps(&p, &c, &ctx, &seed_p, eps).unwrap();
        prop_assert!(h <= he + 1e-10, "H = {h} > H_eps = {he}");
        prop_assert!(he <= h + eps * 2.0 + 1e-10, "H_eps = {he} > H + eps d");
    }

    #[test]
    fn argmin_beats_every_sampled_feasible_control(
        seed_x in point(2),
        seed_p in point(2),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let p = model(2, 0.6);
        let c = CostSpec::linear(2);
        let ctx = FeasibilityContext::new(&p, &seed_x).unwrap();
        let eps = 0.1;
        let u = argmin_hamiltonian(&p, &c, &ctx, &seed_p, &ArgminConfig::new(eps)).unwrap();
        let best = hamiltonian_objective(&p, &c, &seed_x, &seed_p, &u, eps).unwrap();
        let mut v = ControlMatrix::zeros(2);
        v.set(0, 1, a);
        v.set(1, 0, b);
        let v = shrink_into(&ctx, v);
        let other = hamiltonian_objective(&p, &c, &seed_x, &seed_p, &v, eps).unwrap();
        prop_assert!(best <= other + 1e-10);
    }

    #[test]
    fn repair_lands_in_the_target_set(
        y in point(3),
        step in point(3),
        scale in 0.0f64..1.0,
        pick in prop::collection::vec(0.0f64..1.0, 9),
    ) {
        let p = model(3, 0.6);
        let ctx_y = FeasibilityContext::new(&p, &y).unwrap();
        let mut pick = pick;
        for i in 0..3 {
            pick[i * 4] = 0.0;
        }
        let u = shrink_into(&ctx_y, ControlMatrix::from_flat(3, &pick).unwrap());
        let x: Vec<f64> = y.iter().zip(&step).map(|(a, b)| a + scale * b).collect();
        let ctx_x = FeasibilityContext::new(&p, &x).unwrap();
        let r = repair_to(&ctx_x, &u, &y, 4.0).unwrap();
        prop_assert!(contains(&ctx_x, &r, 1e-12).unwrap());
    }
}

#[test]
fn hamiltonian_at_the_origin_uses_no_help() {
    let p = model(3, 0.6);
    let c = CostSpec::linear(3);
    let ctx = FeasibilityContext::new(&p, &[0.0; 3]).unwrap();
    let u = argmin_hamiltonian(&p, &c, &ctx, &[1.0, -2.0, 0.5], &ArgminConfig::new(0.1)).unwrap();
    assert!(u.is_zero());
}
