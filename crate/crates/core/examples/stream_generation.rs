//! Generates streams under each domain-gap regime and shows how far apart
//! the task centroids sit, then round-trips one stream through the
//! JSON-lines format.

use nalgebra::DVector;
use proteus::taskgen::{generate_stream, read_stream, reference_spec, write_stream, Gap, TaskDataset};

fn centroid(t: &TaskDataset) -> DVector<f64> {
    let n = t.train.len() as f64;
    t.train.iter().fold(DVector::zeros(t.train[0].x.len()), |a, s| a + &s.x) / n
}

fn main() -> proteus::Result<()> {
    for gap in [Gap::Mild, Gap::Varying, Gap::Abrupt] {
        let spec = proteus::taskgen::StreamSpec { gap, tasks: 5, ..reference_spec() };
        let tasks = generate_stream(&spec)?;
        let cs: Vec<_> = tasks.iter().map(centroid).collect();
        let mut nearest = f64::INFINITY;
        for i in 0..cs.len() {
            for j in i + 1..cs.len() {
                nearest = nearest.min((&cs[i] - &cs[j]).norm());
            }
        }
        println!("{gap:?}: closest pair of task centroids {nearest:.3} apart");
    }

    let tasks = generate_stream(&reference_spec())?;
    let mut buf = Vec::new();
    write_stream(&tasks, &mut buf).expect("in-memory write");
    let back = read_stream(buf.as_slice())?;
    println!(
        "reference stream: {} tasks, {} bytes as JSON lines, classes of task 3: {:?}",
        back.len(),
        buf.len(),
        back[3].classes
    );
    Ok(())
}
