use mrvi_core::oracle::{dense_perron, enumerate_min, policy_perron, PerronOptions};
use mrvi_core::{
    cw_bounds, dp_residual, load_model, random_model, restrict, solve_rvi, solve_vi, ChainModel,
    Error, Policy, SolverConfig, ValueFunction,
};
use proptest::prelude::*;

fn fixture(name: &str) -> ChainModel {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    load_model(std::fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn rank_one_fixture_solves_to_three() {
    let m = fixture("rank_one.json");
    let r = solve_rvi(&m, &SolverConfig::default().with_tol(1e-10)).unwrap();
    assert!(r.converged);
    assert!((r.lambda_est - 3.0).abs() < 1e-12);
    assert!((r.value[1] / r.value[0] - 2.0).abs() < 1e-12);
}

#[test]
fn two_action_fixture_matches_enumeration() {
    let m = fixture("two_action.json");
    let r = solve_rvi(&m, &SolverConfig::default()).unwrap();
    let e = enumerate_min(&m).unwrap();
    assert_eq!(e.n_policies, 8);
    assert!((r.lambda_est - e.lambda_star).abs() <= 1e-9 * e.lambda_star);
    // the greedy policy attains the minimum
    let rho = policy_perron(&m, &r.policy, &PerronOptions::default())
        .unwrap()
        .rho;
    assert!((rho - e.lambda_star).abs() <= 1e-9 * rho);
}

#[test]
fn value_iteration_needs_the_true_eigenvalue() {
    let m = fixture("two_action.json");
    let lam = enumerate_min(&m).unwrap().lambda_star;
    let good = solve_vi(&m, &SolverConfig::default().with_lambda(lam)).unwrap();
    assert!(good.converged && !good.diverged);
    for wrong in [lam * 0.99, lam * 1.01] {
        let bad = solve_vi(&m, &SolverConfig::default().with_lambda(wrong)).unwrap();
        assert!(bad.diverged && !bad.converged);
    }
}

#[test]
fn log_space_agrees_with_linear() {
    for seed in 0..10 {
        let m = random_model(seed, 5, 2, 0.01).unwrap();
        let a = solve_rvi(&m, &SolverConfig::default()).unwrap();
        let b = solve_rvi(&m, &SolverConfig::default().with_log_space(true)).unwrap();
        assert!((a.lambda_est - b.lambda_est).abs() <= 1e-9 * a.lambda_est);
        assert_eq!(a.policy, b.policy);
    }
}

#[test]
fn restricted_chain_has_the_policy_root() {
    let m = fixture("two_action.json");
    let p = Policy::new(vec![1, 0, 1]);
    let single = restrict(&m, &p).unwrap();
    let r = solve_rvi(&single, &SolverConfig::default()).unwrap();
    let d = dense_perron(&m, &p).unwrap();
    assert!((r.lambda_est - d.rho).abs() <= 1e-9 * d.rho);
}

#[test]
fn iteration_cap_reports_non_convergence() {
    let m = random_model(3, 6, 3, 0.0).unwrap();
    let r = solve_rvi(&m, &SolverConfig::default().with_max_iter(2)).unwrap();
    assert!(!r.converged);
    assert_eq!(r.iterations, 2);
    assert!(r.cw_lower <= r.cw_upper);
}

#[test]
fn bad_reference_state_is_rejected() {
    let m = fixture("rank_one.json");
    assert!(matches!(
        solve_rvi(&m, &SolverConfig::default().with_x0(5)),
        Err(Error::Config(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rvi_matches_enumeration(seed in 0u64..10_000, n in 1usize..6, m in 1usize..4) {
        let model = random_model(seed, n, m, 0.05).unwrap();
        let r = solve_rvi(&model, &SolverConfig::default()).unwrap();
        prop_assert!(r.converged);
        let e = enumerate_min(&model).unwrap();
        prop_assert!((r.lambda_est - e.lambda_star).abs() <= 1e-8 * e.lambda_star);
        prop_assert!(dp_residual(&model, &r.value, r.lambda_est).unwrap() <= 1e-8);
    }

    #[test]
    fn eigenvalue_ignores_start_and_reference(
        seed in 0u64..10_000,
        x0 in 0usize..4,
        start in prop::collection::vec(0.1f64..10.0, 4),
    ) {
        let model = random_model(seed, 4, 2, 0.05).unwrap();
        let a = solve_rvi(&model, &SolverConfig::default()).unwrap();
        let b = solve_rvi(
            &model,
            &SolverConfig::default()
                .with_x0(x0)
                .with_initial(ValueFunction::new(start).unwrap()),
        )
        .unwrap();
        prop_assert!((a.lambda_est - b.lambda_est).abs() <= 1e-8 * a.lambda_est);
    }

    #[test]
    fn collatz_wielandt_brackets_the_root(
        seed in 0u64..10_000,
        v in prop::collection::vec(0.01f64..100.0, 5),
    ) {
        let model = random_model(seed, 5, 2, 0.0).unwrap();
        let (lo, hi) = cw_bounds(&model, &ValueFunction::new(v).unwrap()).unwrap();
        let root = enumerate_min(&model).unwrap().lambda_star;
        prop_assert!(lo <= root * (1.0 + 1e-12) && root <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn cost_shift_multiplies_eigenvalue(seed in 0u64..10_000, shift in -2.0f64..2.0) {
        let model = random_model(seed, 4, 3, 0.05).unwrap();
        let a = solve_rvi(&model, &SolverConfig::default()).unwrap();
        let b = solve_rvi(&model.shift_costs(shift), &SolverConfig::default()).unwrap();
        prop_assert!((b.lambda_est.ln() - a.lambda_est.ln() - shift).abs() <= 1e-9);
        prop_assert_eq!(a.policy, b.policy);
    }
}
