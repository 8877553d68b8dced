use mrvi_core::diffusion::{build_chain, ou_model, solve_discretized, GridSpec};
use mrvi_core::mc::{
    chain_identity_check, sde_growth_estimate, sde_martingale_check, GridPolicy, McConfig,
};
use mrvi_core::{load_model, solve_rvi, SolverConfig};

#[test]
fn rank_one_identity_within_three_standard_errors() {
    let path =
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/rank_one.json");
    let m = load_model(std::fs::File::open(path).unwrap()).unwrap();
    let r = solve_rvi(&m, &SolverConfig::default()).unwrap();
    let mc = chain_identity_check(
        &m,
        &r.policy,
        &r.value,
        r.lambda_est,
        0,
        &McConfig::new(1, 100_000, 5.0),
    )
    .unwrap();
    assert!((mc.ratio_mean - 1.0).abs() <= 3.0 * mc.std_err, "{mc:?}");
    assert_eq!(mc.n_paths, 100_000);
    assert_eq!(mc.seed, 1);
}

#[test]
fn estimates_do_not_depend_on_thread_count() {
    let m = ou_model(3.0 / 16.0, 4.0);
    let p = build_chain(&m, &GridSpec::uniform(0.1)).unwrap();
    let sol = solve_discretized(&p, &SolverConfig::default()).unwrap();
    let policy = GridPolicy::new(&p, &sol.report.policy).unwrap();
    let cfg = McConfig::new(42, 2_000, 1.0).with_dt_sim(0.01);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                sde_martingale_check(&m, &policy, &sol.report.value, sol.lambda, &[0.5], &cfg)
                    .unwrap()
            })
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.ratio_mean.to_bits(), b.ratio_mean.to_bits());
    assert_eq!(a.std_err.to_bits(), b.std_err.to_bits());
}

#[test]
fn one_step_martingale_is_consistent() {
    let m = ou_model(3.0 / 16.0, 6.0);
    let p = build_chain(&m, &GridSpec::uniform(0.03)).unwrap();
    let sol = solve_discretized(&p, &SolverConfig::default()).unwrap();
    let policy = GridPolicy::constant(&p);
    let cfg = McConfig::new(7, 10_000, 0.01).with_dt_sim(0.01);
    let r = sde_martingale_check(&m, &policy, &sol.report.value, sol.lambda, &[1.0], &cfg).unwrap();
    assert!((r.ratio_mean - 1.0).abs() < 1e-3, "{r:?}");
}

#[test]
fn ou_growth_estimate_lands_in_band() {
    let m = ou_model(3.0 / 16.0, 6.0);
    let p = build_chain(&m, &GridSpec::uniform(0.03)).unwrap();
    let policy = GridPolicy::constant(&p);
    let cfg = McConfig::new(1, 100_000, 20.0).with_dt_sim(0.01);
    let r = sde_growth_estimate(&m, &policy, &[0.0], &cfg).unwrap();
    assert!((0.15..=0.35).contains(&r.lambda_hat), "{r:?}");
    assert!(r.ci_half_width > 0.0);
    assert_eq!(r.aborted_paths, 0);
}
