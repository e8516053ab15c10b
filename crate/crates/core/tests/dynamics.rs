use approx::assert_relative_eq;
use proptest::prelude::*;
use randset::dynamics::{
    kl_brownian_prior, kl_expected_prior, kl_expected_prior_bound, kl_general_prior, kl_sgld, log_radon_nikodym_sgld,
    read_trajectory, run_cld_euler, run_sgld, write_trajectory, BatchSize, SgldConfig, Trajectory,
};
use randset::problem::{grad_empirical, grad_population, sample_dataset, DataDistribution, DataPoint, Dataset, LossModel};
use randset::rng::derive_seed;
use randset::Error;

fn regression(d: usize) -> DataDistribution<f64> {
    DataDistribution::LinearRegression {
        input_std: vec![1.0; d],
        weight: (0..d).map(|i| 0.5 - 0.25 * i as f64).collect(),
        noise_std: 0.3,
    }
}

fn quad() -> LossModel<f64> {
    LossModel::clipped_quadratic(4.0, 1.0, Some(2.0)).unwrap()
}

/// Trajectory with given gradients and noises; weights follow the recursion.
fn built(grads: Vec<Vec<f64>>, noises: Vec<Vec<f64>>, eta: f64, beta: f64) -> Trajectory<f64> {
    let d = grads[0].len();
    let sigma = (2.0 * eta / beta).sqrt();
    let mut weights = vec![vec![0.0; d]];
    for (g, e) in grads.iter().zip(&noises) {
        let last = weights.last().unwrap();
        weights.push((0..d).map(|i| last[i] - eta * g[i] + sigma * e[i]).collect());
    }
    let t = grads.len();
    Trajectory::from_parts(weights, grads, noises, vec![eta; t], beta, true, false).unwrap()
}

#[test]
fn constant_loss_noiseless_stays_put() {
    let m = LossModel::constant(0.5, 1.0).unwrap();
    let s = sample_dataset(&regression(2), 10, 1).unwrap();
    let mut cfg = SgldConfig::constant_step(5, 0.1, 1.0, vec![0.3, -0.2], 9);
    cfg.noiseless = true;
    let t = run_sgld(&cfg, &m, &s).unwrap();
    assert!(t.weights().iter().all(|w| w == &vec![0.3, -0.2]));
    assert_eq!(kl_sgld(&t), 0.0);
}

#[test]
fn noiseless_gradient_descent_halves() {
    // risk w^2/2 from a single point x = 1, y = 0
    let m = LossModel::clipped_quadratic(10.0, 1.0, None).unwrap();
    let s = Dataset::from_points(vec![DataPoint::new(vec![1.0], 0.0)], 0);
    let mut cfg = SgldConfig::constant_step(2, 0.5, 1.0, vec![1.0], 3);
    cfg.noiseless = true;
    let t = run_sgld(&cfg, &m, &s).unwrap();
    assert_eq!(t.weights()[1], vec![0.5]);
    assert_eq!(t.weights()[2], vec![0.25]);
    let c = run_cld_euler(&cfg, &m, &s).unwrap();
    assert_eq!(c.weights(), t.weights());
}

#[test]
fn same_seed_same_trajectory() {
    let s = sample_dataset(&regression(3), 30, 2).unwrap();
    let mut cfg = SgldConfig::constant_step(25, 0.05, 5.0, vec![0.0; 3], 77);
    cfg.batch_size = BatchSize::Size(4);
    let a = run_sgld(&cfg, &quad(), &s).unwrap();
    let b = run_sgld(&cfg, &quad(), &s).unwrap();
    assert_eq!(a, b);
    cfg.seed = 78;
    assert_ne!(run_sgld(&cfg, &quad(), &s).unwrap(), a);
}

#[test]
fn recursion_reconstructs() {
    let s = sample_dataset(&regression(3), 30, 2).unwrap();
    let mut cfg = SgldConfig::constant_step(40, 0.05, 3.0, vec![0.1; 3], 4);
    cfg.batch_size = BatchSize::Size(7);
    let t = run_sgld(&cfg, &quad(), &s).unwrap();
    assert!(t.reconstruction_error() <= 1e-12);
}

#[test]
fn divergence_carries_last_finite_step() {
    let m = LossModel::clipped_quadratic(4.0, 1.0, None).unwrap();
    let s = sample_dataset(&regression(2), 10, 5).unwrap();
    let cfg = SgldConfig::constant_step(20, 1e10, f64::MIN_POSITIVE, vec![0.0; 2], 1);
    match run_sgld(&cfg, &m, &s) {
        Err(Error::Divergence { last_finite_step }) => assert_eq!(last_finite_step, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn kl_sgld_examples() {
    let grads = vec![vec![1.0]; 10];
    let t = built(grads.clone(), vec![vec![0.0]; 10], 0.1, 4.0);
    assert_relative_eq!(kl_sgld(&t), 1.0, epsilon = 1e-14);
    let t2 = built(grads, vec![vec![0.0]; 10], 0.1, 8.0);
    assert_relative_eq!(kl_sgld(&t2), 2.0, epsilon = 1e-14);
    let z = built(vec![vec![0.0]; 3], vec![vec![1.0]; 3], 0.1, 4.0);
    assert_eq!(kl_sgld(&z), 0.0);
    assert_eq!(kl_brownian_prior(&z).unwrap(), 0.0);
}

#[test]
fn kl_brownian_single_step() {
    let t = built(vec![vec![2.0, 0.0]], vec![vec![0.0, 0.0]], 0.1, 2.0);
    assert_relative_eq!(kl_brownian_prior(&t).unwrap(), 0.2, epsilon = 1e-15);
}

#[test]
fn kl_brownian_rejects_minibatch() {
    let s = sample_dataset(&regression(2), 20, 5).unwrap();
    let mut cfg = SgldConfig::constant_step(5, 0.05, 3.0, vec![0.0; 2], 4);
    cfg.batch_size = BatchSize::Size(5);
    let t = run_sgld(&cfg, &quad(), &s).unwrap();
    assert!(matches!(kl_brownian_prior(&t), Err(Error::Misuse(_))));
}

#[test]
fn expected_prior_vanishes_on_empirical_distribution() {
    let s = sample_dataset(&regression(2), 20, 5).unwrap();
    let cfg = SgldConfig::constant_step(10, 0.05, 3.0, vec![0.0; 2], 4);
    let t = run_cld_euler(&cfg, &quad(), &s).unwrap();
    let e = DataDistribution::empirical(&s);
    assert_eq!(kl_expected_prior(&t, &quad(), &s, &e).unwrap(), 0.0);
    assert!(matches!(kl_expected_prior(&t, &quad(), &s, &regression(2)), Err(Error::Capability(_))));
}

#[test]
fn expected_prior_single_step_arithmetic() {
    // the empirical gradient at w = 0 is -y x; the population one is chosen
    // so the difference has norm 3
    let m = LossModel::clipped_quadratic(100.0, 1.0, None).unwrap();
    let s = Dataset::from_points(vec![DataPoint::new(vec![1.0], 3.0)], 0);
    let pop = DataDistribution::point_mass(DataPoint::new(vec![1.0], 0.0));
    let w0 = vec![0.0];
    let ge: Vec<f64> = grad_empirical(&m, &w0, &s).unwrap();
    let gp: Vec<f64> = grad_population(&m, &w0, &pop).unwrap();
    assert_eq!((ge[0] - gp[0]).powi(2), 9.0);
    let t = Trajectory::from_parts(vec![w0.clone(), vec![0.0]], vec![ge.clone()], vec![vec![0.0]], vec![0.2], 2.0, true, false)
        .unwrap();
    // the statistic only reads W_0, so W_1 need not follow the recursion
    assert_relative_eq!(kl_expected_prior(&t, &m, &s, &pop).unwrap(), 0.9, epsilon = 1e-14);
}

#[test]
fn general_prior_specializations() {
    let s = sample_dataset(&regression(2), 15, 8).unwrap();
    let cfg = SgldConfig::constant_step(12, 0.05, 4.0, vec![0.0; 2], 2);
    let m = quad();
    let t = run_cld_euler(&cfg, &m, &s).unwrap();
    let zero = kl_general_prior(&t, &m, &s, |_: &[f64]| vec![0.0; 2]).unwrap();
    assert_relative_eq!(zero, kl_brownian_prior(&t).unwrap(), max_relative = 1e-12);
    let matched = kl_general_prior(&t, &m, &s, |w: &[f64]| grad_empirical(&m, w, &s).unwrap()).unwrap();
    assert_eq!(matched, 0.0);
    let pop = regression(2).materialize(512, 3).unwrap();
    let expected = kl_general_prior(&t, &m, &s, |w: &[f64]| grad_population(&m, w, &pop).unwrap()).unwrap();
    assert_relative_eq!(expected, kl_expected_prior(&t, &m, &s, &pop).unwrap(), max_relative = 1e-12);
    assert!(matches!(
        kl_general_prior(&t, &m, &s, |_: &[f64]| vec![f64::NAN; 2]),
        Err(Error::Domain(_))
    ));
}

#[test]
fn general_prior_affine_field_by_hand() {
    let m = quad();
    let s = sample_dataset(&regression(1), 5, 1).unwrap();
    let cfg = SgldConfig::constant_step(2, 0.1, 2.0, vec![0.5], 6);
    let t = run_cld_euler(&cfg, &m, &s).unwrap();
    let field = |w: &[f64]| vec![2.0 * w[0] + 1.0];
    let mut hand = 0.0;
    for k in 0..2 {
        let w = &t.weights()[k];
        let d = grad_empirical(&m, w, &s).unwrap()[0] - field(w)[0];
        hand += 0.1 * d * d;
    }
    hand *= 2.0 / 4.0;
    assert_relative_eq!(kl_general_prior(&t, &m, &s, field).unwrap(), hand, max_relative = 1e-14);
}

#[test]
fn expected_prior_bound_examples() {
    let v = kl_expected_prior_bound(1.0, 1.0, 1.0, 1, (-1.0f64).exp()).unwrap();
    assert_relative_eq!(v.value, 4.0, epsilon = 1e-12);
    assert_relative_eq!(v.confidence, 1.0 - (-1.0f64).exp(), epsilon = 1e-15);
    let z = kl_expected_prior_bound(0.0, 2.0, 3.0, 10, 0.1).unwrap();
    assert_relative_eq!(z.value, 10f64.ln(), epsilon = 1e-15);
    let a = kl_expected_prior_bound(1.5, 2.0, 3.0, 10, 0.1).unwrap().value - 10f64.ln();
    let b = kl_expected_prior_bound(1.5, 2.0, 3.0, 100, 0.1).unwrap().value - 10f64.ln();
    assert_relative_eq!(a / b, 10.0, max_relative = 1e-12);
}

#[test]
fn log_likelihood_ratio_examples() {
    // eta = sigma = 1 needs beta = 2
    let t = built(vec![vec![1.0]], vec![vec![0.5]], 1.0, 2.0);
    assert_relative_eq!(log_radon_nikodym_sgld(&t).unwrap(), 0.0, epsilon = 1e-15);
    let z = built(vec![vec![0.0]; 3], vec![vec![0.7]; 3], 0.1, 1.0);
    assert_eq!(log_radon_nikodym_sgld(&z).unwrap(), 0.0);
    let s = sample_dataset(&regression(1), 5, 1).unwrap();
    let mut cfg = SgldConfig::constant_step(3, 0.1, 1.0, vec![0.0], 2);
    cfg.noiseless = true;
    let n = run_sgld(&cfg, &quad(), &s).unwrap();
    assert!(matches!(log_radon_nikodym_sgld(&n), Err(Error::Domain(_))));
}

#[test]
fn kl_matches_mean_negative_log_likelihood_ratio() {
    let s = sample_dataset(&regression(2), 10, 3).unwrap();
    let m = quad();
    let paths = 20_000;
    let (mut kl, mut nl) = (Vec::with_capacity(paths), Vec::with_capacity(paths));
    for p in 0..paths {
        let cfg = SgldConfig::constant_step(4, 0.1, 2.0, vec![1.0, -1.0], derive_seed(99, p as u64));
        let t = run_sgld(&cfg, &m, &s).unwrap();
        kl.push(kl_sgld(&t));
        nl.push(-log_radon_nikodym_sgld(&t).unwrap());
    }
    let diff: Vec<f64> = kl.iter().zip(&nl).map(|(a, b)| a - b).collect();
    let mean = diff.iter().sum::<f64>() / paths as f64;
    let var = diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (paths - 1) as f64;
    assert!(mean.abs() <= 3.0 * (var / paths as f64).sqrt(), "mean difference {mean}");
}

#[test]
fn trajectory_dump_round_trip() {
    let s = sample_dataset(&regression(3), 12, 3).unwrap();
    let mut cfg = SgldConfig::constant_step(6, 0.07, 3.0, vec![0.2, 0.0, -0.1], 5);
    cfg.batch_size = BatchSize::Size(3);
    let t = run_sgld(&cfg, &quad(), &s).unwrap();
    let mut buf = Vec::new();
    write_trajectory(&t, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("# randset trajectory v1"));
    assert_eq!(text.lines().count(), 2 + 7);
    assert_eq!(read_trajectory::<f64, _>(&buf[..]).unwrap(), t);
}

#[test]
fn config_validation() {
    let cfg = SgldConfig::constant_step(3, 0.1, 0.0, vec![0.0], 1);
    assert!(matches!(cfg.validate(5), Err(Error::Config(_))));
    let mut cfg = SgldConfig::constant_step(3, 0.1, 1.0, vec![0.0], 1);
    cfg.eta.pop();
    assert!(matches!(cfg.validate(5), Err(Error::Config(_))));
    let mut cfg = SgldConfig::constant_step(3, 0.1, 1.0, vec![0.0], 1);
    cfg.batch_size = BatchSize::Size(6);
    assert!(matches!(cfg.validate(5), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn full_batch_identity_and_reconstruction(
        seed in any::<u64>(),
        eta in 0.001f64..0.2,
        beta in 0.1f64..100.0,
        steps in 1usize..30,
    ) {
        let s = sample_dataset(&regression(2), 12, seed).unwrap();
        let cfg = SgldConfig::constant_step(steps, eta, beta, vec![0.0; 2], seed ^ 1);
        let t = run_cld_euler(&cfg, &quad(), &s).unwrap();
        prop_assert!(t.reconstruction_error() <= 1e-12);
        prop_assert!((kl_brownian_prior(&t).unwrap() - kl_sgld(&t)).abs() <= 1e-10);
        let e = DataDistribution::empirical(&s);
        prop_assert_eq!(kl_expected_prior(&t, &quad(), &s, &e).unwrap(), 0.0);
    }

    #[test]
    fn kl_is_linear_in_beta(k in 1.0f64..10.0, g in -3.0f64..3.0) {
        let a = built(vec![vec![g]; 4], vec![vec![0.1]; 4], 0.05, 2.0);
        let b = built(vec![vec![g]; 4], vec![vec![0.1]; 4], 0.05, 2.0 * k);
        prop_assert!((kl_sgld(&b) - k * kl_sgld(&a)).abs() <= 1e-12 * kl_sgld(&b).max(1.0));
    }
}
