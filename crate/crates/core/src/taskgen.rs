//! Seeded synthetic task streams.
//!
//! Every task owns an anchor on a scaled `{−1, 0, 1}^q` lattice; its classes
//! sit on a finer lattice around the anchor and each class is a union of
//! Gaussian clusters. The gap setting scales the anchor lattice, so tasks
//! drift apart mildly, abruptly, or (in `varying` mode) partly repeat the
//! previous task's class geometry under new labels.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::DVector;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gap {
    Mild,
    Abrupt,
    Varying,
}

impl Gap {
    /// Scale of the task-anchor lattice.
    pub fn task_spread(self) -> f64 {
        match self {
            Gap::Mild => 0.5,
            Gap::Abrupt => 2.0,
            Gap::Varying => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub clusters_per_class: usize,
    pub input_dim: usize,
    pub gap: Gap,
    /// Scale of the class lattice around each task anchor.
    #[serde(default = "default_class_spread")]
    pub class_spread: f64,
    /// Scale of the cluster lattice around each class center.
    #[serde(default = "default_cluster_spread")]
    pub cluster_spread: f64,
    pub cluster_sigma: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Overrides the gap's task-anchor scale.
    #[serde(default)]
    pub task_spread: Option<f64>,
}

fn default_class_spread() -> f64 {
    1.0
}

fn default_cluster_spread() -> f64 {
    0.25
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("clusters_per_class", self.clusters_per_class),
            ("input_dim", self.input_dim),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("cluster_sigma", self.cluster_sigma),
            ("class_spread", self.class_spread),
            ("cluster_spread", self.cluster_spread),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DVector<f64>,
    pub label: usize,
    /// Generating cluster, global across the stream; unknown for loaded files.
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: usize,
    /// Global labels owned by this task, ascending.
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskDataset {
    pub fn local_label(&self, label: usize) -> Option<usize> {
        self.classes.binary_search(&label).ok()
    }
}

/// Distinct random points of `{−1, 0, 1}^q` excluding the origin.
fn lattice_points(rng: &mut Rng, q: usize, count: usize) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(count);
    let max_distinct = 3f64.powi(q.min(40) as i32) - 1.0;
    while out.len() < count {
        let p = DVector::from_fn(q, |_, _| rng.random_range(-1i32..=1) as f64);
        let unique = out.iter().all(|o| o != &p) || out.len() as f64 >= max_distinct;
        if p.iter().any(|&v| v != 0.0) && unique {
            out.push(p);
        }
    }
    out
}

struct ClassGeometry {
    clusters: Vec<DVector<f64>>,
}

pub fn generate_stream(spec: &StreamSpec) -> Result<Vec<TaskDataset>> {
    spec.validate()?;
    let q = spec.input_dim;
    let c = spec.classes_per_task;
    let mut anchor_rng = linalg::rng(linalg::derive_seed(spec.seed, u64::MAX));
    let anchors: Vec<DVector<f64>> = lattice_points(&mut anchor_rng, q, spec.tasks)
        .into_iter()
        .map(|p| p * spec.task_spread.unwrap_or(spec.gap.task_spread()))
        .collect();

    let mut out = Vec::with_capacity(spec.tasks);
    let mut previous: Vec<ClassGeometry> = Vec::new();
    for (task, anchor) in anchors.iter().enumerate() {
        let mut rng = linalg::rng(linalg::derive_seed(spec.seed, task as u64));
        let class_offsets = lattice_points(&mut rng, q, c);
        let reuse = if spec.gap == Gap::Varying && task > 0 { c / 2 } else { 0 };
        let mut geometry = Vec::with_capacity(c);
        for (j, off) in class_offsets.iter().enumerate() {
            if j < reuse {
                geometry.push(ClassGeometry {
                    clusters: previous[c - 1 - j].clusters.clone(),
                });
                continue;
            }
            let center = anchor + off * spec.class_spread;
            let cluster_offsets = lattice_points(&mut rng, q, spec.clusters_per_class);
            let clusters = cluster_offsets
                .iter()
                .map(|o| {
                    let jitter = linalg::normal_vector(&mut rng, q, 0.1 * spec.cluster_spread);
                    &center + o * spec.cluster_spread + jitter
                })
                .collect();
            geometry.push(ClassGeometry { clusters });
        }

        let classes: Vec<usize> = (0..c).map(|j| task * c + j).collect();
        let draw = |rng: &mut Rng, per_class: usize| {
            let mut samples = Vec::with_capacity(per_class * c);
            for (j, g) in geometry.iter().enumerate() {
                for i in 0..per_class {
                    let t = i % g.clusters.len();
                    let x = &g.clusters[t] + linalg::normal_vector(rng, q, spec.cluster_sigma);
                    samples.push(Sample {
                        x,
                        label: classes[j],
                        cluster: Some((task * c + j) * spec.clusters_per_class + t),
                    });
                }
            }
            samples
        };
        let train = draw(&mut rng, spec.train_per_class);
        let test = draw(&mut rng, spec.test_per_class);
        out.push(TaskDataset {
            task,
            classes,
            train,
            test,
        });
        previous = geometry;
    }
    Ok(out)
}

pub fn reference_spec() -> StreamSpec {
    StreamSpec {
        tasks: 10,
        classes_per_task: 4,
        clusters_per_class: 2,
        input_dim: 16,
        gap: Gap::Abrupt,
        class_spread: default_class_spread(),
        cluster_spread: default_cluster_spread(),
        cluster_sigma: 0.4,
        train_per_class: 200,
        test_per_class: 100,
        seed: 42,
        task_spread: None,
    }
}

/// The fixed acceptance stream.
pub fn reference_stream() -> Vec<TaskDataset> {
    generate_stream(&reference_spec()).expect("reference spec is valid")
}

#[derive(Serialize, Deserialize)]
struct Record {
    task: usize,
    split: String,
    label: usize,
    x: Vec<f64>,
}

/// One JSON object per line: `{"task", "split", "label", "x"}`.
pub fn write_stream<W: Write>(tasks: &[TaskDataset], mut w: W) -> std::io::Result<()> {
    for t in tasks {
        for (split, samples) in [("train", &t.train), ("test", &t.test)] {
            for s in samples {
                let rec = Record {
                    task: t.task,
                    split: split.to_string(),
                    label: s.label,
                    x: s.x.iter().copied().collect(),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

pub fn read_stream<R: BufRead>(r: R) -> Result<Vec<TaskDataset>> {
    let mut by_task: BTreeMap<usize, TaskDataset> = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Malformed(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(format!("line {}: {e}", i + 1)))?;
        if *dim.get_or_insert(rec.x.len()) != rec.x.len() || rec.x.is_empty() {
            return Err(Error::Shape(format!("line {}: inconsistent input dimension", i + 1)));
        }
        if rec.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed(format!("line {}: non-finite input", i + 1)));
        }
        let entry = by_task.entry(rec.task).or_insert_with(|| TaskDataset {
            task: rec.task,
            classes: Vec::new(),
            train: Vec::new(),
            test: Vec::new(),
        });
        let sample = Sample {
            x: DVector::from_vec(rec.x),
            label: rec.label,
            cluster: None,
        };
        match rec.split.as_str() {
            "train" => entry.train.push(sample),
            "test" => entry.test.push(sample),
            other => {
                return Err(Error::Malformed(format!("line {}: unknown split {other:?}", i + 1)))
            }
        }
    }
    if by_task.is_empty() {
        return Err(Error::InsufficientData("stream file has no samples".into()));
    }
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(by_task.len());
    for (expected, (task, mut t)) in by_task.into_iter().enumerate() {
        if task != expected {
            return Err(Error::Data(format!("task ids must be 0..m without gaps; missing {expected}")));
        }
        let mut classes: Vec<usize> = t.train.iter().chain(&t.test).map(|s| s.label).collect();
        classes.sort_unstable();
        classes.dedup();
        for &c in &classes {
            if let Some(prev) = owner.insert(c, task) {
                return Err(Error::Data(format!("label {c} appears in tasks {prev} and {task}")));
            }
        }
        t.classes = classes;
        out.push(t);
    }
    Ok(out)
}
