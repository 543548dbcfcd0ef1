//! Average accuracy, forgetting and retrieval accuracy gain on a small
//! hand-written accuracy matrix.

use proteus::metrics::{average_accuracy, forgetting, retrieval_accuracy_gain, AccMatrix};

fn main() -> proteus::Result<()> {
    // rows: after task κ; columns: task τ
    let table = [[0.95, 0.0, 0.0], [0.90, 0.93, 0.0], [0.88, 0.91, 0.94]];
    let m = AccMatrix::from_fn(3, |t, k| table[k - 1][t - 1])?;
    for k in 1..=3 {
        print!("ACC_{k} = {:.4}", average_accuracy(&m, k)?);
        if k >= 2 {
            print!(", F_{k} = {:.4}", forgetting(&m, k)?);
        }
        println!();
    }
    let gain = retrieval_accuracy_gain(96.0, 38.59, 3.576, 1.0)?;
    println!("gain of a slower but more accurate retriever: {gain:.2} points per second");
    Ok(())
}
