//! Misretrieval bound: closed-loop inversion, Monte Carlo moments and the
//! pipeline bound report.

mod common;

use common::*;
use proteus::linalg;
use proteus::pipeline::bound_report;
use proteus::theory::{error_bound, mc_validate, min_delta, BoundParams, McConfig};
use rand::Rng;

#[test]
fn min_delta_closes_the_loop_on_a_seeded_grid() {
    let mut rng = linalg::rng(2024);
    let epss = [0.01, 0.05, 0.1];
    for i in 0..200 {
        let d = rng.random_range(4..=64usize);
        let sigma2 = rng.random_range(0.5..=8.0);
        let kappa = rng.random_range(-2.0..=2.0);
        let n = rng.random_range(1..=200usize);
        let eps = epss[i % 3];
        let delta = min_delta(eps, d, kappa, sigma2, n).unwrap();
        let b = error_bound(&BoundParams { d, delta, kappa, sigma2, false_components: n - 1 });
        assert!(!b.premise_violated);
        assert!(b.value <= eps, "d={d} s2={sigma2} k={kappa} n={n} eps={eps}: bound {} at delta {delta}", b.value);
    }
}

#[test]
fn hand_evaluated_branches() {
    // d=8, σ²=2, κ=0, N=1, ε=0.05: the variance branch is 3dσ²/2 = 24, the
    // count branch is L(1+√(1+4d/L)) with L = ln 20, so δ = (2/8)·24.
    let l = 20f64.ln();
    let count_branch = l * (1.0 + (1.0 + 32.0 / l).sqrt());
    assert!(count_branch < 24.0);
    let got = min_delta(0.05, 8, 0.0, 2.0, 1).unwrap();
    assert!((got - 6.0).abs() < 1e-12, "{got}");
    // tiny variance: the count branch binds
    let got = min_delta(0.05, 8, 0.0, 1e-3, 1).unwrap();
    assert!((got - 0.25 * count_branch).abs() < 1e-12);
}

#[test]
fn monte_carlo_moments_match_the_construction() {
    let r = mc_validate(&McConfig { d: 16, delta: 2.0, tasks: 3, components: 2, samples: 50_000, seed: 4 }).unwrap();
    assert_eq!(r.false_components, 4);
    assert_eq!(r.kappa, 0.0);
    // quadratic form of a unit-covariance Gaussian shifted by √(δd): variance 2d + 4δd
    assert!((r.sigma2 - (2.0 + 4.0 * 2.0)).abs() < 1e-12);
    assert!(r.passed);
    assert!(r.standard_error > 0.0);
}

#[test]
fn monte_carlo_error_decreases_with_separation() {
    let err = |delta| {
        mc_validate(&McConfig { d: 8, delta, tasks: 5, components: 1, samples: 20_000, seed: 1 })
            .unwrap()
            .empirical_error
    };
    assert!(err(4.0) < err(1.0));
}

#[test]
fn report_has_one_row_per_component_and_csv_agrees() {
    let t = small_trained();
    let r = bound_report(&t.kb, &t.tasks, 0.05).unwrap();
    let total: usize = t.kb.entries().iter().map(|e| e.multikey.len()).sum();
    assert_eq!(r.rows.len(), total);
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), total + 1);
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for (row, line) in r.rows.iter().zip(&lines[1..]) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[col("task")].parse::<usize>().unwrap(), row.task);
        assert_eq!(f[col("samples")].parse::<usize>().unwrap(), row.samples);
        match row.delta {
            Some(d) => assert_eq!(f[col("delta")].parse::<f64>().unwrap(), d),
            None => assert_eq!(f[col("delta")], ""),
        }
        match row.min_delta {
            Some(d) => assert_eq!(f[col("min_delta")].parse::<f64>().unwrap(), d),
            None => assert_eq!(f[col("min_delta")], ""),
        }
    }
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), total);
    let n: usize = r.rows.iter().map(|row| row.samples).sum();
    assert_eq!(n, t.tasks.iter().map(|t| t.test.len()).sum::<usize>());
}

fn identity_at(mean: nalgebra::DVector<f64>) -> proteus::signature::GaussianComponent {
    let d = mean.len();
    proteus::signature::GaussianComponent::new(1.0, mean, nalgebra::DMatrix::identity(d, d)).unwrap()
}

#[test]
fn own_samples_have_zero_separation_and_chi_square_variance() {
    let cloud = random_cloud(60, 100_000, 8, 1.0);
    let c = identity_at(nalgebra::DVector::zeros(8));
    let delta = proteus::theory::empirical_separation(&cloud, &c).unwrap();
    assert!(delta.abs() < 0.05, "{delta}");
    let s2 = proteus::theory::empirical_sigma2(&cloud, &c).unwrap();
    assert!((s2 - 2.0).abs() < 0.1, "{s2}");
}

#[test]
fn shifted_samples_recover_the_separation_and_its_variance() {
    let d = 8;
    for delta in [1.0, 4.0] {
        let shift = (delta * d as f64).sqrt();
        let mut mean = nalgebra::DVector::zeros(d);
        mean[0] = shift;
        let cloud = random_cloud(61, 100_000, d, 1.0);
        let c = identity_at(mean);
        let got = proteus::theory::empirical_separation(&cloud, &c).unwrap();
        assert!((got - delta).abs() < 0.05, "{got}");
        let s2 = proteus::theory::empirical_sigma2(&cloud, &c).unwrap();
        let want = 2.0 + 4.0 * delta;
        assert!((s2 - want).abs() < 0.05 * want, "{s2} vs {want}");
    }
}

#[test]
fn kappa_from_log_volume_gaps() {
    let d = 3;
    let t = identity_at(nalgebra::DVector::zeros(d));
    let scaled = |gap: f64| {
        proteus::signature::GaussianComponent::new(
            1.0,
            nalgebra::DVector::zeros(d),
            nalgebra::DMatrix::identity(d, d) * (gap / d as f64).exp(),
        )
        .unwrap()
    };
    let (a, b) = (scaled(3.0), scaled(-1.0));
    let k = proteus::theory::empirical_kappa(&t, &[&a, &b]).unwrap();
    assert!((k + 1.0).abs() < 1e-12);
}

#[test]
fn bound_is_non_decreasing_in_tasks_and_components() {
    for delta in [0.5, 2.0, 8.0] {
        for sigma2 in [1.0, 10.0] {
            let mut prev_n = 0.0;
            for n in 1..12 {
                let mut prev_tau = 0.0;
                for tau in 1..6 {
                    let b = error_bound(&BoundParams::uniform(16, delta, 0.0, sigma2, n, tau)).value;
                    assert!(b >= prev_tau);
                    prev_tau = b;
                }
                let b = error_bound(&BoundParams::uniform(16, delta, 0.0, sigma2, n, 2)).value;
                assert!(b >= prev_n);
                prev_n = b;
            }
        }
    }
}

#[test]
fn monte_carlo_stays_under_the_bound_at_d16() {
    let r = mc_validate(&McConfig { d: 16, delta: 4.0, tasks: 5, components: 2, samples: 100_000, seed: 3 }).unwrap();
    assert_eq!(r.false_components, 8);
    assert!(r.passed);
    assert!(r.empirical_error <= r.bound.value);
}
