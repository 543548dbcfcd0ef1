//! Fits a multi-key signature to a three-cluster cloud and prints the BIC
//! curve that picked the component count.

use nalgebra::DVector;
use proteus::linalg;
use proteus::signature::{fit_multikey_detailed, Ridge, Strategy};

fn main() -> proteus::Result<()> {
    let mut rng = linalg::rng(3);
    let centers = [[0.0, 0.0, 0.0], [4.0, 0.0, 1.0], [0.0, 5.0, -2.0]];
    let cloud: Vec<DVector<f64>> = (0..300)
        .map(|i| DVector::from_row_slice(&centers[i % 3]) + linalg::normal_vector(&mut rng, 3, 0.5))
        .collect();

    let fit = fit_multikey_detailed(0, &cloud, 6, Ridge::default(), 11, Strategy::EmBic)?;
    for c in &fit.candidates {
        println!(
            "k={} fitted={} loglik={:>9.2} bic={:>9.2} iterations={}",
            c.requested, c.fitted, c.log_likelihood, c.bic, c.trace.iterations
        );
    }
    println!("chose {} components (ridge {:.2e})", fit.signature.len(), fit.ridge);
    for c in fit.signature.components() {
        println!("  weight {:.3} mean {:.2?}", c.weight(), c.mean().as_slice());
    }
    Ok(())
}
