//! Streaming LDA statistics and prediction.

mod common;

use nalgebra::{DMatrix, DVector};
use proteus::lda::{batch_stats, LdaSample, LdaStats};

fn samples(seed: u64, n: usize, d: usize, classes: usize) -> Vec<LdaSample> {
    common::random_cloud(seed, n, d, 1.0)
        .into_iter()
        .enumerate()
        .map(|(i, h)| LdaSample { h, label: i % classes, task_size: n })
        .collect()
}

#[test]
fn streaming_matches_batch_up_to_ten_thousand_samples() {
    for n in [500, 10_000] {
        let data = samples(n as u64, n, 6, 4);
        let mut s = LdaStats::new(6, 4);
        for x in &data {
            s.accumulate(&x.h, x.label, x.task_size, 1).unwrap();
        }
        let b = batch_stats(&data, 1, 4).unwrap();
        assert!((s.gram() - b.gram()).amax() < 1e-10, "n={n}");
        for (a, c) in s.class_sums().iter().zip(b.class_sums()) {
            assert!((a - c).amax() < 1e-10);
        }
    }
}

#[test]
fn gram_is_psd_and_regularized_gram_is_spd() {
    let data = samples(3, 4, 6, 2); // fewer samples than dimensions: rank deficient
    let s = batch_stats(&data, 1, 2).unwrap();
    let eig = s.gram().clone().symmetric_eigen();
    assert!(eig.eigenvalues.iter().all(|&l| l > -1e-9));
    for gamma in [1e-8, 1e-4, 1.0] {
        assert!((s.gram() + DMatrix::identity(6, 6) * gamma).cholesky().is_some());
        assert!(s.predictor(gamma).is_ok());
    }
}

#[test]
fn argmax_ignores_positive_scaling() {
    let data = samples(4, 300, 5, 3);
    let s = batch_stats(&data, 2, 3).unwrap();
    let scaled = LdaStats::from_parts(
        s.gram().clone(),
        s.class_sums().iter().map(|e| e * 7.5).collect(),
        s.counts().to_vec(),
        s.tasks_seen(),
        s.gamma(),
    )
    .unwrap();
    let p = s.predictor(1e-2).unwrap();
    let q = scaled.predictor(1e-2).unwrap();
    for x in samples(5, 50, 5, 3) {
        let c = p.predict(&x.h).unwrap();
        assert_eq!(c, q.predict(&x.h).unwrap());
        assert_eq!(c, p.predict(&(&x.h * 3.0)).unwrap());
    }
}

#[test]
fn zero_embedding_ties_to_the_first_class() {
    let s = batch_stats(&samples(6, 60, 3, 3), 1, 3).unwrap();
    assert_eq!(s.predict(&DVector::zeros(3), 1e-2).unwrap(), 0);
}
