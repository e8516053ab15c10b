//! Acceptance battery. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion. Numeric arguments restrict the run to the
//! listed criteria.

use std::f64::consts::E;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use randset::bounds::{
    covering_upper, cld_upper_brownian, fractal_upper, generic_subgaussian_bound, lower_bound, mgf_finite_upper,
    pacbayes_rademacher_upper, sgld_lipschitz_closed, sgld_upper, BoundReport, Lambda, Side,
};
use randset::complexity::{covering_curve, fit_box_dimension, rademacher_cld_bound, Geometry, Metric};
use randset::dynamics::{
    kl_brownian_prior, kl_expected_prior, kl_expected_prior_bound, kl_sgld, log_radon_nikodym_sgld, run_cld_euler,
    run_sgld, SgldConfig,
};
use randset::harness::{binomial_floor, run_trials, summarize, ExperimentConfig};
use randset::oracle;
use randset::problem::{sample_dataset, DataDistribution, LossModel};
use randset::rng::{derive_seed, rng_from_seed};

const SEED: u64 = 7;

type Formula = Box<dyn Fn(Lambda<f64>) -> BoundReport<f64>>;
/// `(id, name, budget in seconds, run)`
type Criterion = (usize, &'static str, Option<f64>, fn() -> Check);

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

fn battery_line(b: &oracle::BatteryResult) -> String {
    format!("{}: {}/{} ok, worst margin {:.3e}", b.name, b.cases - b.failures, b.cases, b.worst_margin)
}

fn c1() -> Check {
    let bs = oracle::lemma_batteries(SEED, 100).expect("lemma batteries");
    let pass = bs.iter().all(|b| b.passed() && b.worst_margin >= -1e-10);
    check(pass, bs.iter().map(battery_line).collect::<Vec<_>>().join("; "))
}

fn c2() -> Check {
    let b = oracle::coverage_battery(SEED, 50).expect("coverage battery");
    check(b.passed(), battery_line(&b))
}

fn c3() -> Check {
    let b = oracle::it_battery(SEED, 100).expect("it battery");
    check(b.passed(), battery_line(&b))
}

fn c4() -> Check {
    let bs = oracle::rademacher_batteries(SEED, 50, 100_000).expect("rademacher batteries");
    let pass = bs.iter().all(|b| b.passed());
    check(pass, bs.iter().map(battery_line).collect::<Vec<_>>().join("; "))
}

fn sgld_experiment() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
            "master_seed": 20240501,
            "distribution": {"kind": "gaussian_mixture",
                             "means": [[-0.5, 0.0, 0.0, 0.0, 0.0], [0.5, 0.0, 0.0, 0.0, 0.0]],
                             "scale": 0.5, "class_priors": [0.5, 0.5]},
            "population_atoms": 4096,
            "loss": {"kind": "clipped_logistic", "bound": 1.0, "margin": 0.25, "input_radius": 1.0},
            "n": 100,
            "dynamics": {"iterations": 50, "eta": 0.01, "beta": 10.0, "batch_size": 10},
            "bounds": [{"formula": "sgld_upper", "zeta": 0.05, "lambda": "optimize"}],
            "trials": 200,
            "replicates": 64
        }"#,
    )
    .expect("experiment config")
}

fn c5() -> Check {
    let cfg = sgld_experiment();
    let records = run_trials(&cfg).expect("trials");
    let s = summarize(&records, 0.05).expect("summary");
    let b = &s.bounds[0];
    let floor = binomial_floor(0.05, records.len() - s.flagged);
    let pass = b.coverage >= 0.9 && b.coverage >= floor && s.flagged == 0;
    check(
        pass,
        format!(
            "coverage {:.3} over {} trials (floor {:.3}), mean bound {:.4}, mean gap {:.4}, flagged {}",
            b.coverage, records.len(), floor, b.value.mean, s.gap.mean, s.flagged
        ),
    )
}

fn regression(d: usize, seed: u64) -> DataDistribution<f64> {
    let mut rng = rng_from_seed(seed);
    DataDistribution::LinearRegression {
        input_std: vec![1.0; d],
        weight: (0..d).map(|_| rng.random::<f64>() - 0.5).collect(),
        noise_std: 0.3,
    }
}

fn c6() -> Check {
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let mut rng = rng_from_seed(derive_seed(SEED, 600 + i));
        let d = rng.random_range(1..=4);
        let dist = regression(d, derive_seed(SEED, 700 + i));
        let data = sample_dataset(&dist, 30, derive_seed(SEED, 800 + i)).unwrap();
        let model = LossModel::clipped_quadratic(2.0, 0.5, Some(2.0)).unwrap();
        let eta = 0.005 + 0.05 * rng.random::<f64>();
        let beta = 1.0 + 50.0 * rng.random::<f64>();
        let cfg = SgldConfig::constant_step(20, eta, beta, vec![0.0; d], derive_seed(SEED, 900 + i));
        let traj = run_cld_euler(&cfg, &model, &data).unwrap();
        worst = worst.max((kl_brownian_prior(&traj).unwrap() - kl_sgld(&traj)).abs());
    }
    check(worst <= 1e-10, format!("max |difference| {worst:.3e} over 50 runs"))
}

fn c7() -> Check {
    let dist = regression(2, derive_seed(SEED, 1000));
    let data = sample_dataset(&dist, 10, derive_seed(SEED, 1001)).unwrap();
    let model = LossModel::clipped_quadratic(2.0, 0.5, Some(2.0)).unwrap();
    let paths = 100_000;
    let mut z = Vec::with_capacity(paths);
    for p in 0..paths {
        let cfg = SgldConfig::constant_step(3, 0.1, 2.0, vec![0.5, -0.5], derive_seed(SEED, 2_000_000 + p as u64));
        let traj = run_sgld(&cfg, &model, &data).unwrap();
        z.push(log_radon_nikodym_sgld(&traj).unwrap().exp());
    }
    let mean = z.iter().sum::<f64>() / paths as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (paths - 1) as f64;
    let se = (var / paths as f64).sqrt();
    check((mean - 1.0).abs() <= 3.0 * se, format!("mean {mean:.5}, SE {se:.2e}"))
}

fn geometric(start: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| start * ratio.powi(i as i32)).collect()
}

fn fit(points: &[Vec<f64>], scales: &[f64]) -> f64 {
    let curve = covering_curve(&Geometry::Points(points), scales).unwrap();
    fit_box_dimension(&curve, None).unwrap().dimension
}

fn cantor(depth: u32) -> Vec<Vec<f64>> {
    let mut left = vec![0.0];
    let mut width = 1.0;
    for _ in 0..depth {
        width /= 3.0;
        left = left.iter().flat_map(|&a| [a, a + 2.0 * width]).collect();
    }
    left.into_iter().map(|a| vec![a]).collect()
}

fn c8() -> Check {
    let segment: Vec<Vec<f64>> = (0..2048).map(|i| vec![i as f64 / 2047.0]).collect();
    let d_seg = fit(&segment, &geometric(0.25, 0.5, 6));
    let mut rng = rng_from_seed(derive_seed(SEED, 8));
    // stratified: one uniform point in each cell of a 64 x 64 grid
    let square: Vec<Vec<f64>> = (0..4096)
        .map(|k| {
            let (i, j) = ((k % 64) as f64, (k / 64) as f64);
            vec![(i + rng.random::<f64>()) / 64.0, (j + rng.random::<f64>()) / 64.0]
        })
        .collect();
    let d_sq = fit(&square, &geometric(0.25, 0.5f64.sqrt(), 9));
    let d_can = fit(&cantor(10), &geometric(1.0 / 3.0, 1.0 / 3.0, 9));
    let target = 2f64.ln() / 3f64.ln();
    let pass = (d_seg - 1.0).abs() <= 0.15 && (d_sq - 2.0).abs() <= 0.2 && (d_can - target).abs() <= 0.05;
    check(pass, format!("segment {d_seg:.4}, square {d_sq:.4}, cantor {d_can:.4} (target {target:.4})"))
}

fn log_grid() -> Vec<f64> {
    (0..200).map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / 199.0)).collect()
}

/// Worst relative shortfall of the optimized value against the grid: positive
/// means the grid won.
fn grid_gap(f: &dyn Fn(Lambda<f64>) -> BoundReport<f64>) -> f64 {
    let opt = f(Lambda::Optimize);
    let upper = opt.side == Side::Upper;
    let mut worst = f64::NEG_INFINITY;
    for l in log_grid() {
        let v = f(Lambda::Fixed(l)).value;
        let shortfall = if upper { opt.value - v } else { v - opt.value };
        worst = worst.max(shortfall / v.abs().max(1e-300));
    }
    worst
}

fn c9() -> Check {
    let mut rng = rng_from_seed(derive_seed(SEED, 9));
    let mut worst_identity: f64 = 0.0;
    for _ in 0..100 {
        let l = 0.1 + 3.0 * rng.random::<f64>();
        let beta = 0.5 + 20.0 * rng.random::<f64>();
        let t = rng.random_range(1..=500);
        let eta_sum = t as f64 * (0.001 + 0.05 * rng.random::<f64>());
        let b = 0.2 + 2.0 * rng.random::<f64>();
        let n = rng.random_range(10..=10_000);
        let zeta = 0.01 + 0.3 * rng.random::<f64>();
        let kl = beta * l * l * eta_sum / 4.0;
        let opt = sgld_upper(kl, t, b, n, zeta, Lambda::Optimize).unwrap().value;
        let closed = sgld_lipschitz_closed(l, beta, eta_sum, t, b, n, zeta).unwrap();
        worst_identity = worst_identity.max((opt - closed).abs() / closed);
    }
    let formulas: Vec<(&str, Formula)> = vec![
        ("generic", Box::new(|l| generic_subgaussian_bound(1.3, 0.05, l, 0.01).unwrap())),
        ("rademacher", Box::new(|l| pacbayes_rademacher_upper(0.1, 1.5, 1.0, 100, 0.05, l).unwrap())),
        ("mgf finite", Box::new(|l| mgf_finite_upper(5.0, 0.7, 1.0, 200, 0.1, l).unwrap())),
        (
            "covering",
            Box::new(|l| covering_upper(0.1, 16, 1.0, 100, 1.0, 0.1, l, Metric::DataDependent, None, 9.0 / 8.0).unwrap()),
        ),
        (
            "fractal",
            Box::new(|l| {
                fractal_upper(1.2, 0.1, 500, 1.0, 2.0, 0.05, 0.01, l, Metric::Euclidean, Some(1.5), 9.0 / 8.0).unwrap()
            }),
        ),
        ("lower", Box::new(|l| lower_bound(0.8, 1.0, 100, 0.5, 0.1, l, 9.0 / 8.0).unwrap())),
        ("sgld", Box::new(|l| sgld_upper(2.0, 50, 1.0, 100, 0.05, l).unwrap())),
        ("cld", Box::new(|l| cld_upper_brownian(0.2, 0.5, 1.0, 100, 0.1, l).unwrap())),
    ];
    let mut worst_grid = f64::NEG_INFINITY;
    let mut loser = "";
    for (name, f) in &formulas {
        let g = grid_gap(f.as_ref());
        if g > worst_grid {
            worst_grid = g;
            loser = name;
        }
    }
    check(
        worst_identity <= 1e-9 && worst_grid <= 1e-9,
        format!("identity max rel err {worst_identity:.2e}; worst grid shortfall {worst_grid:.2e} ({loser})"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let l = v.len();
    if l % 2 == 1 {
        v[l / 2]
    } else {
        0.5 * (v[l / 2 - 1] + v[l / 2])
    }
}

fn c10() -> Check {
    let p22 = kl_expected_prior_bound(1.0, 1.0, 1.0, 1, 1.0 / E).unwrap().value;
    let t23 = rademacher_cld_bound(1.0, 1.0, 1.0, 1, 1.0, 100, 1.0).unwrap();
    let t23_hand = 0.1 + (2.0 * 400f64.ln() / 100.0).sqrt();
    let model = LossModel::clipped_quadratic(2.0, 0.5, Some(2.0)).unwrap();
    let pop = regression(3, derive_seed(SEED, 10)).materialize(2048, derive_seed(SEED, 11)).unwrap();
    let med = |n: usize| {
        let v = (0..50u64)
            .map(|t| {
                let data = sample_dataset(&pop, n, derive_seed(SEED, 10_000 * n as u64 + t)).unwrap();
                let cfg = SgldConfig::constant_step(20, 0.05, 10.0, vec![0.0; 3], derive_seed(SEED, 20_000 + t));
                let traj = run_cld_euler(&cfg, &model, &data).unwrap();
                kl_expected_prior(&traj, &model, &data, &pop).unwrap()
            })
            .collect();
        median(v)
    };
    let (m20, m200) = (med(20), med(200));
    let pass = (p22 - 4.0).abs() <= 1e-12 && (t23 - t23_hand).abs() <= 1e-12 && m20 > m200;
    check(
        pass,
        format!(
            "closed form {p22:.15} (hand 4), CLD Rademacher {t23:.15} (hand {t23_hand:.15}); median KL n=20 {m20:.4e} > n=200 {m200:.4e}"
        ),
    )
}

fn c11() -> Check {
    let b = oracle::gibbs_battery(SEED, 100, 100).expect("gibbs battery");
    check(b.passed(), battery_line(&b))
}

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 11] = [
        (1, "exact lemma battery", Some(60.0), c1),
        (2, "exact bound coverage", Some(120.0), c2),
        (3, "information-term exactness", Some(30.0), c3),
        (4, "rademacher estimator calibration", Some(60.0), c4),
        (5, "sgld coverage experiment", Some(900.0), c5),
        (6, "brownian prior kl identity", None, c6),
        (7, "likelihood-ratio martingale", None, c7),
        (8, "dimension fits", Some(120.0), c8),
        (9, "lambda optimization", None, c9),
        (10, "closed-form evaluators and kl trend", None, c10),
        (11, "gibbs posterior optimality", None, c11),
    ];
    let mut failed = 0;
    for (id, name, limit, f) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let c = f();
        let secs = start.elapsed().as_secs_f64();
        let in_time = limit.is_none_or(|l| secs < l);
        let pass = c.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget = limit.map_or(String::new(), |l| format!(" / {l:.0}s"));
        println!(
            "criterion {id:>2} {}: {name} [{secs:.1}s{budget}] {}",
            if pass { "PASS" } else { "FAIL" },
            c.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
