//! Builds a knowledge base on a short stream and routes a few test inputs
//! through signature retrieval, showing the winning entry, component and
//! score under both scoring rules.

use proteus::kb::ScoreRule;
use proteus::pipeline::{train_stream, PipelineConfig};
use proteus::taskgen::{generate_stream, reference_spec, StreamSpec};

fn main() -> proteus::Result<()> {
    let spec = StreamSpec { tasks: 4, train_per_class: 60, test_per_class: 20, ..reference_spec() };
    let tasks = generate_stream(&spec)?;
    let mut cfg = PipelineConfig::default();
    cfg.train.epochs = 15;
    let (kb, _) = train_stream(&cfg, &tasks)?;

    for t in &tasks {
        let x = &t.test[0].x;
        let m = kb.retrieve(x, ScoreRule::Mahalanobis)?;
        let l = kb.retrieve(x, ScoreRule::Loglik)?;
        let top = kb.retrieve_topk(x, 2)?;
        println!(
            "true task {}: mahalanobis -> task {} (component {}, score {:.2}); loglik -> task {}; top-2 -> task {}",
            t.task, m.task, m.component, m.score, l.task, top
        );
    }
    Ok(())
}
