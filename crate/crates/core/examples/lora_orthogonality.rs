//! Trains a short stream with and without the orthogonality constraint and
//! prints the largest cosine between each new unit and its predecessors.

use proteus::lora::Ortho;
use proteus::pipeline::{train_stream, PipelineConfig};
use proteus::taskgen::{generate_stream, reference_spec, StreamSpec};

fn main() -> proteus::Result<()> {
    let spec = StreamSpec { tasks: 4, train_per_class: 60, test_per_class: 20, ..reference_spec() };
    let tasks = generate_stream(&spec)?;
    for ortho in [Ortho::On, Ortho::Off] {
        let mut cfg = PipelineConfig::default();
        cfg.train.ortho = ortho;
        cfg.train.epochs = 15;
        let (_, reports) = train_stream(&cfg, &tasks)?;
        println!("ortho {ortho:?}");
        for r in &reports {
            let cos: Vec<String> = r.max_ortho_cosine.iter().map(|c| format!("{c:.1e}")).collect();
            println!("  task {}: max |cos| per layer [{}], |S|_1 {:.4}", r.train.task, cos.join(", "), r.transfer_l1);
        }
    }
    Ok(())
}
