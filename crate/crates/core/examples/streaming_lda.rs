//! Accumulates LDA statistics one sample at a time, checks them against a
//! batch pass over the same data and classifies a few points.

use nalgebra::DVector;
use proteus::lda::{batch_stats, LdaSample, LdaStats};
use proteus::linalg;

fn main() -> proteus::Result<()> {
    let mut rng = linalg::rng(5);
    let means = [DVector::from_row_slice(&[2.0, 0.0]), DVector::from_row_slice(&[-2.0, 1.0])];
    let samples: Vec<LdaSample> = (0..200)
        .map(|i| LdaSample {
            h: &means[i % 2] + linalg::normal_vector(&mut rng, 2, 0.7),
            label: i % 2,
            task_size: 200,
        })
        .collect();

    let mut stream = LdaStats::new(2, 2);
    for s in &samples {
        stream.accumulate(&s.h, s.label, s.task_size, 1)?;
    }
    let batch = batch_stats(&samples, 1, 2)?;
    println!("max |G_stream - G_batch| = {:.2e}", (stream.gram() - batch.gram()).amax());

    let predictor = stream.predictor(1e-2)?;
    for p in [[1.5, 0.2], [-1.0, 1.5], [0.1, 0.4]] {
        let h = DVector::from_row_slice(&p);
        println!("{p:?} -> class {}", predictor.predict(&h)?);
    }
    Ok(())
}
