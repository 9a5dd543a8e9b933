mod common;

use mslca::asymptotics::elliptical_scale_plugin;
use mslca::estimation::{empirical_cov, whiten};
use mslca::simulate::{
    ks_distance, median, run, sample_gaussian, sample_student_t, ExperimentKind, SimulationPlan,
};
use mslca::noncorr::TestMethod;
use nalgebra::dmatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut plan = SimulationPlan::new(ExperimentKind::NullDist, vec![2, 1, 1], vec![60, 120], 12, 5);
    plan.methods = vec![TestMethod::Chi2, TestMethod::General];
    plan.mc_draws = 3_000;
    let a = in_pool(1, || run(&plan).unwrap());
    let b = in_pool(4, || run(&plan).unwrap());
    assert_eq!(a.records, b.records);
    assert_eq!(a.summary, b.summary);

    let mut plan = SimulationPlan::new(ExperimentKind::CltCheck, vec![1, 1, 1], vec![50], 8, 1);
    plan.z_draws = 10_000;
    let a = in_pool(1, || run(&plan).unwrap());
    let b = in_pool(3, || run(&plan).unwrap());
    assert_eq!(a.overall, b.overall);
    assert_eq!(a.records, b.records);
}

#[test]
fn different_seeds_give_different_records() {
    let plan = SimulationPlan::new(ExperimentKind::Power, vec![1, 1], vec![40], 4, 1);
    let mut other = plan.clone();
    other.seed = 2;
    assert_ne!(run(&plan).unwrap().records, run(&other).unwrap().records);
}

#[test]
fn gaussian_sampler_has_target_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = common::random_model(&mut rng, &[2, 2]);
    let data = sample_gaussian(&m, 200_000, 4).unwrap();
    let vhat = empirical_cov(&data).unwrap();
    let v = m.v().entries();
    for a in 0..4 {
        for b in 0..4 {
            let se = ((v[(a, a)] * v[(b, b)] + v[(a, b)].powi(2)) / data.n() as f64).sqrt();
            assert!((vhat.v().entries()[(a, b)] - v[(a, b)]).abs() < 4.0 * se);
        }
    }
}

#[test]
fn student_sampler_approaches_gaussian() {
    let m = mslca::CovarianceModel::new(
        mslca::BlockStructure::new(vec![1, 1]).unwrap(),
        dmatrix![1.0, 0.2; 0.2, 1.0],
    )
    .unwrap();
    let data = sample_student_t(&m, 1e4, 200_000, 3).unwrap();
    let scale = elliptical_scale_plugin(&whiten(&data).unwrap());
    assert!((scale - 1.0).abs() < 0.02, "{scale}");
}

#[test]
fn consistency_under_zero_t() {
    let plan = SimulationPlan::new(ExperimentKind::Consistency, vec![1, 2], vec![100, 1_000, 10_000], 200, 3);
    let res = run(&plan).unwrap();
    assert_eq!(res.records.len(), 3 * 200);
    let med: Vec<f64> = plan.sizes.iter().map(|&n| res.stat(n, "median_t_error").unwrap()).collect();
    assert!(med[0] > med[1] && med[1] > med[2], "{med:?}");
    // with T = 0 the coefficient errors are the estimates themselves, and
    // ‖T̂‖² = Σ ρ̂²
    for r in &res.records {
        let sum_sq: f64 = (0..3).map(|j| r.values[&format!("rho_error_{j}")].powi(2)).sum();
        assert!((sum_sq - r.values["t_error"].powi(2)).abs() < 1e-12);
    }

    let mut doubled = plan.clone();
    doubled.replications = 400;
    let res2 = run(&doubled).unwrap();
    for &n in &plan.sizes {
        let a = res.stat(n, "median_t_error").unwrap();
        let b = res2.stat(n, "median_t_error").unwrap();
        assert!((a / b - 1.0).abs() < 0.2, "n={n}: {a} vs {b}");
    }
}

#[test]
fn clt_under_null_has_unit_variance() {
    let mut plan = SimulationPlan::new(ExperimentKind::CltCheck, vec![1, 1], vec![2_000], 1_000, 4);
    plan.z_draws = 50_000;
    let res = run(&plan).unwrap();
    let var = res.stat(2_000, "t_cov_0_0").unwrap();
    assert!((var - 1.0).abs() < 0.15, "{var}");
    assert!((res.overall["z_cov_0_0"] - 1.0).abs() < 0.05);
    assert_eq!(res.stat(2_000, "diag_block_max").unwrap(), 0.0);
}

#[test]
fn plugin_sigma_tracks_population() {
    let v = dmatrix![1.0, 0.5, 0.2; 0.5, 1.0, -0.1; 0.2, -0.1, 1.0];
    let plan = SimulationPlan::new(ExperimentKind::CoeffClt, vec![1, 1, 1], vec![200_000], 2, 9)
        .with_covariance(&v);
    let res = run(&plan).unwrap();
    for j in 0..3 {
        let pop = res.overall[&format!("sigma_{j}")];
        let plug = res.stat(200_000, &format!("sigma_plugin_{j}")).unwrap();
        assert!((plug / pop - 1.0).abs() < 0.05, "j={j}: {plug} vs {pop}");
    }
    assert_eq!(res.stat(200_000, "sorted_fraction").unwrap(), 1.0);
}

#[test]
fn power_grows_with_n_and_matches_size_under_null() {
    let plan = SimulationPlan::new(ExperimentKind::Power, vec![1, 1], vec![50, 100, 200], 400, 6)
        .with_covariance(&dmatrix![1.0, 0.2; 0.2, 1.0]);
    let res = run(&plan).unwrap();
    let rates: Vec<f64> = plan.sizes.iter().map(|&n| res.stat(n, "reject_p_chi2@0.05").unwrap()).collect();
    assert!(rates[0] < rates[1] && rates[1] < rates[2], "{rates:?}");

    let null = SimulationPlan::new(ExperimentKind::Power, vec![1, 1], vec![200], 2_000, 6);
    let rate = run(&null).unwrap().stat(200, "reject_p_chi2@0.05").unwrap();
    assert!((rate - 0.05).abs() < 0.015, "{rate}");
}

#[test]
fn student_sampler_has_target_covariance_and_kurtosis() {
    let v = dmatrix![2.0, 0.5, 0.0; 0.5, 1.0, 0.3; 0.0, 0.3, 1.5];
    let m = mslca::CovarianceModel::new(mslca::BlockStructure::new(vec![1, 2]).unwrap(), v.clone()).unwrap();
    let data = sample_student_t(&m, 12.0, 400_000, 2).unwrap();
    let vhat = empirical_cov(&data).unwrap();
    assert!((vhat.v().entries() - &v).amax() < 0.03);
    let scale = elliptical_scale_plugin(&whiten(&data).unwrap());
    assert!((scale - 10.0 / 8.0).abs() < 0.03, "{scale}");
}

proptest! {
    #[test]
    fn summaries_ignore_record_order(seed in any::<u64>(), xs in prop::collection::vec(0.0f64..1.0, 1..200)) {
        let mut ys = xs.clone();
        ys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(median(&xs), median(&ys));
        prop_assert_eq!(ks_distance(&xs, |x| x), ks_distance(&ys, |x| x));
    }

    #[test]
    fn ks_is_a_distance(xs in prop::collection::vec(-3.0f64..3.0, 1..100)) {
        let d = ks_distance(&xs, |x| 1.0 / (1.0 + (-x).exp()));
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(d >= 0.5 / xs.len() as f64 - 1e-15);
    }
}
