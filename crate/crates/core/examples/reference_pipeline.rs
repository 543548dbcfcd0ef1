//! Trains the reference stream end to end and prints retrieval, accuracy
//! and bound summaries for every retrieval mode.

use std::time::Instant;

use proteus::pipeline::{bound_report, evaluate, train_stream, EvalOptions, PipelineConfig, RetrievalMode};
use proteus::taskgen::reference_stream;

fn main() -> proteus::Result<()> {
    let tasks = reference_stream();
    let cfg = PipelineConfig::default();
    let start = Instant::now();
    let (kb, reports) = train_stream(&cfg, &tasks)?;
    println!("trained {} tasks in {:.1?}", kb.len(), start.elapsed());
    for r in &reports {
        println!(
            "task {:>2}: loss {:.4} -> {:.4}, train acc {:.3}, components {}, |S|_1 {:.3}",
            r.train.task,
            r.train.epoch_loss.first().unwrap_or(&f64::NAN),
            r.train.epoch_loss.last().unwrap_or(&f64::NAN),
            r.train.train_accuracy,
            r.components,
            r.transfer_l1
        );
    }
    for mode in [RetrievalMode::Signature, RetrievalMode::Oracle, RetrievalMode::LastTask, RetrievalMode::None] {
        let opts = EvalOptions { retrieval: mode, ..EvalOptions::default() };
        let e = evaluate(&kb, &tasks, &opts)?;
        println!("{mode:?}: accuracy {:.4}, retrieval {:.4}", e.accuracy, e.retrieval_accuracy);
    }
    let b = bound_report(&kb, &tasks, 0.05)?;
    for v in &b.tasks {
        println!(
            "task {:>2}: min delta {:?} required {:?} exceeds {}",
            v.task, v.min_delta_measured, v.min_delta_required, v.exceeds
        );
    }
    Ok(())
}
