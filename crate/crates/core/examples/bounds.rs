//! Evaluates the misretrieval bound, inverts it for the separation needed
//! at a target error, and checks it against a Monte Carlo simulation.

use proteus::theory::{error_bound, mc_validate, min_delta, BoundParams, McConfig};

fn main() -> proteus::Result<()> {
    let d = 16;
    for delta in [2.0, 4.0, 8.0, 16.0] {
        let p = BoundParams::uniform(d, delta, 0.0, 2.0 + 4.0 * delta, 10, 2);
        println!("delta {delta}: bound {:.4}", error_bound(&p).value);
    }
    for eps in [0.1, 0.05, 0.01] {
        let need = min_delta(eps, d, 0.0, 1.0, 20)?;
        println!("eps {eps}: need delta >= {need:.3}");
    }
    let report = mc_validate(&McConfig { d, delta: 2.0, tasks: 5, components: 2, samples: 100_000, seed: 1 })?;
    println!(
        "monte carlo: empirical {:.5} ± {:.5}, bound {:.5}, passed {}",
        report.empirical_error, report.standard_error, report.bound.value, report.passed
    );
    Ok(())
}
