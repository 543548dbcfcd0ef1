//! Randomized invariants.

mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proteus::lda::{LdaSample, LdaStats};
use proteus::linalg;
use proteus::lora::{lora_cosine, lora_inner_product, project_new_directions, LoraUnit};
use proteus::metrics::{average_accuracy, forgetting, AccMatrix};
use proteus::signature::{fit_gaussian, Ridge};
use proteus::taskgen::{generate_stream, read_stream, reference_spec, write_stream, Gap, StreamSpec};
use proteus::theory::{empirical_separation, error_bound, min_delta, BoundParams};

fn cloud(seed: u64, n: usize, d: usize) -> Vec<DVector<f64>> {
    common::random_cloud(seed, n, d, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bound_is_a_probability_and_shrinks_with_separation(
        d in 1usize..64, delta in 0.0f64..50.0, step in 0.0f64..10.0,
        kappa in -3.0f64..3.0, sigma2 in 0.01f64..20.0, n in 0usize..100,
    ) {
        let p = BoundParams { d, delta, kappa, sigma2, false_components: n };
        let b = error_bound(&p);
        prop_assert!((0.0..=1.0).contains(&b.value));
        if !b.premise_violated {
            let q = error_bound(&BoundParams { delta: delta + step, ..p });
            prop_assert!(q.raw.unwrap() <= b.raw.unwrap() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn min_delta_meets_its_target(
        d in 1usize..128, kappa in -4.0f64..4.0, sigma2 in 0.05f64..16.0,
        n in 1usize..500, eps in 0.001f64..0.5,
    ) {
        let delta = min_delta(eps, d, kappa, sigma2, n).unwrap();
        let b = error_bound(&BoundParams { d, delta, kappa, sigma2, false_components: n - 1 });
        prop_assert!(b.value <= eps, "bound {} > {eps} at {delta}", b.value);
    }

    #[test]
    fn inner_product_is_symmetric_and_cosine_bounded(su in 0u64..1000, sv in 0u64..1000, r in 1usize..4) {
        let shapes = [(6, 4), (3, 6)];
        let u = LoraUnit::init(0, &shapes, r, su).unwrap();
        let v = LoraUnit::init(1, &shapes, 2, sv).unwrap();
        let uv = lora_inner_product(&u, &v).unwrap();
        let vu = lora_inner_product(&v, &u).unwrap();
        for (a, b) in uv.iter().zip(&vu) {
            prop_assert!(common::rel_close(*a, *b, 1e-12));
        }
        for c in lora_cosine(&u, &v).unwrap() {
            prop_assert!(c.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn projection_removes_the_past_span(seed in 0u64..10_000, q in 4usize..12, k in 1usize..4, r in 1usize..4) {
        let past = common::random_matrix(seed, q, k, 1.0);
        let basis = linalg::orthonormal_basis(&past, 1e-10);
        let a = common::random_matrix(seed + 1, q, r, 1.0);
        let p = project_new_directions(&a, &basis);
        prop_assert!((past.transpose() * &p).amax() < 1e-10);
        // projecting twice changes nothing
        prop_assert!((project_new_directions(&p, &basis) - &p).amax() < 1e-12);
    }

    #[test]
    fn lda_statistics_do_not_depend_on_order(seed in 0u64..10_000, n in 2usize..40) {
        let hs = cloud(seed, n, 3);
        let samples: Vec<LdaSample> = hs.into_iter().enumerate()
            .map(|(i, h)| LdaSample { h, label: i % 3, task_size: n })
            .collect();
        let mut fwd = LdaStats::new(3, 3);
        let mut rev = LdaStats::new(3, 3);
        for s in &samples {
            fwd.accumulate(&s.h, s.label, s.task_size, 2).unwrap();
        }
        for s in samples.iter().rev() {
            rev.accumulate(&s.h, s.label, s.task_size, 2).unwrap();
        }
        prop_assert!((fwd.gram() - rev.gram()).amax() < 1e-10);
        prop_assert_eq!(fwd.counts(), rev.counts());
        let g = fwd.gram();
        prop_assert!((g - g.transpose()).amax() == 0.0);
    }

    #[test]
    fn gaussian_fit_is_translation_equivariant(seed in 0u64..10_000, shift in -5.0f64..5.0) {
        let c = cloud(seed, 30, 3);
        let moved: Vec<DVector<f64>> = c.iter().map(|h| h.add_scalar(shift)).collect();
        let a = fit_gaussian(&c, Ridge::Absolute(1e-4)).unwrap();
        let b = fit_gaussian(&moved, Ridge::Absolute(1e-4)).unwrap();
        prop_assert!((b.mean() - a.mean()).add_scalar(-shift).amax() < 1e-10);
        prop_assert!((b.cov() - a.cov()).amax() < 1e-10);
    }

    #[test]
    fn own_cloud_has_no_positive_separation(seed in 0u64..10_000, n in 10usize..60) {
        let c = cloud(seed, n, 4);
        let g = fit_gaussian(&c, Ridge::Absolute(1e-9)).unwrap();
        let delta = empirical_separation(&c, &g).unwrap();
        // the MLE covariance makes the mean quadratic form exactly d, less the ridge
        prop_assert!(delta <= 1e-9 && delta > -1e-3, "{delta}");
    }

    #[test]
    fn accuracy_metrics_stay_in_range(vals in prop::collection::vec(0.0f64..=1.0, 15)) {
        let m = AccMatrix::from_fn(5, |t, k| vals[(k - 1) * k / 2 + t - 1]).unwrap();
        for k in 1..=5 {
            let a = average_accuracy(&m, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            if k >= 2 {
                let f = forgetting(&m, k).unwrap();
                prop_assert!((-1.0..=1.0).contains(&f));
            }
        }
    }

    #[test]
    fn constant_history_means_no_forgetting(vals in prop::collection::vec(0.0f64..=1.0, 5)) {
        let m = AccMatrix::from_fn(5, |t, _| vals[t - 1]).unwrap();
        for k in 2..=5 {
            prop_assert_eq!(forgetting(&m, k).unwrap(), 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn streams_round_trip_through_json_lines(
        seed in 0u64..1000, tasks in 1usize..4, classes in 1usize..4,
        gap in prop_oneof![Just(Gap::Mild), Just(Gap::Abrupt), Just(Gap::Varying)],
    ) {
        let spec = StreamSpec {
            tasks, classes_per_task: classes, train_per_class: 5, test_per_class: 3,
            input_dim: 6, gap, seed, ..reference_spec()
        };
        let a = generate_stream(&spec).unwrap();
        let mut buf = Vec::new();
        write_stream(&a, &mut buf).unwrap();
        let b = read_stream(buf.as_slice()).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.classes, &y.classes);
            prop_assert_eq!(x.train.len(), y.train.len());
            for (p, q) in x.train.iter().zip(&y.train) {
                prop_assert_eq!(p.label, q.label);
                prop_assert_eq!(&p.x, &q.x);
            }
        }
    }
}

#[test]
fn cholesky_solves_agree_with_inverse() {
    let m = common::random_matrix(1, 5, 5, 1.0);
    let spd = &m * m.transpose() + DMatrix::identity(5, 5);
    let chol = linalg::cholesky(&spd, "test").unwrap();
    let x = DVector::from_row_slice(&[1.0, -2.0, 0.5, 3.0, 0.0]);
    let direct = (x.transpose() * spd.clone().try_inverse().unwrap() * &x)[0];
    assert!(common::rel_close(linalg::chol_quad_form(&chol, &x), direct, 1e-12));
    assert!(common::rel_close(linalg::chol_log_det(&chol), spd.determinant().ln(), 1e-12));
}
