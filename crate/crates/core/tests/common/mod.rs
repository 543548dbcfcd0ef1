#![allow(dead_code)]

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use proteus::kb::KnowledgeBase;
use proteus::linalg;
use proteus::pipeline::{train_stream, PipelineConfig, TaskReport};
use proteus::taskgen::{generate_stream, reference_spec, StreamSpec, TaskDataset};

pub fn small_spec() -> StreamSpec {
    StreamSpec {
        tasks: 4,
        classes_per_task: 3,
        train_per_class: 40,
        test_per_class: 15,
        seed: 9,
        ..reference_spec()
    }
}

pub fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.train.epochs = 10;
    cfg.signature.max_components = 6;
    cfg
}

pub struct Trained {
    pub tasks: Vec<TaskDataset>,
    pub kb: KnowledgeBase,
    pub reports: Vec<TaskReport>,
}

/// A small stream trained once per test binary.
pub fn small_trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let tasks = generate_stream(&small_spec()).unwrap();
        let (kb, reports) = train_stream(&small_config(), &tasks).unwrap();
        Trained { tasks, kb, reports }
    })
}

pub fn random_cloud(seed: u64, n: usize, d: usize, scale: f64) -> Vec<DVector<f64>> {
    let mut rng = linalg::rng(seed);
    (0..n).map(|_| linalg::normal_vector(&mut rng, d, scale)).collect()
}

pub fn random_matrix(seed: u64, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    linalg::normal_matrix(&mut linalg::rng(seed), r, c, scale)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

use proteus::backbone::{Backbone, Gradients, LinearHead};
use proteus::lora::{compose_update, LoraUnit, TransferCoefficients};

/// Mean cross-entropy computed from a plain forward pass.
pub fn task_loss(
    backbone: &Backbone,
    xs: &DMatrix<f64>,
    labels: &[usize],
    past: &[LoraUnit],
    s: &TransferCoefficients,
    unit: &LoraUnit,
    head: &LinearHead,
) -> f64 {
    let adapted = backbone.adapted(&compose_update(past, s, unit).unwrap()).unwrap();
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let h = adapted.embed(&xs.column(j).into_owned(), None).unwrap();
        let z = &head.weight * h + &head.bias;
        let zmax = z.max();
        let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    total / labels.len() as f64
}

/// Largest relative gap between `grads` and central differences of
/// [`task_loss`] over every learnable coordinate. Coordinates whose
/// gradient is below 1e-4 in magnitude are measured against 1e-4, since
/// the difference quotient itself carries about 1e-11 of rounding noise.
#[allow(clippy::too_many_arguments)]
pub fn max_fd_error(
    backbone: &Backbone,
    xs: &DMatrix<f64>,
    labels: &[usize],
    past: &[LoraUnit],
    s: &TransferCoefficients,
    unit: &LoraUnit,
    head: &LinearHead,
    grads: &Gradients,
    h: f64,
) -> f64 {
    let loss = |s: &TransferCoefficients, u: &LoraUnit, hd: &LinearHead| task_loss(backbone, xs, labels, past, s, u, hd);
    let rel = |a: f64, plus: f64, minus: f64| {
        let fd = (plus - minus) / (2.0 * h);
        (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4)
    };
    let mut worst = 0.0f64;
    for l in 0..unit.layers.len() {
        for t in 0..past.len() {
            for i in 0..s.block(l, t).len() {
                let (mut sp, mut sm) = (s.clone(), s.clone());
                sp.block_mut(l, t)[i] += h;
                sm.block_mut(l, t)[i] -= h;
                worst = worst.max(rel(grads.transfer.block(l, t)[i], loss(&sp, unit, head), loss(&sm, unit, head)));
            }
        }
        for b_side in [true, false] {
            let g = if b_side { &grads.new_b[l] } else { &grads.new_a[l] };
            for idx in 0..g.len() {
                let (mut up, mut um) = (unit.clone(), unit.clone());
                if b_side {
                    up.layers[l].b[idx] += h;
                    um.layers[l].b[idx] -= h;
                } else {
                    up.layers[l].a[idx] += h;
                    um.layers[l].a[idx] -= h;
                }
                worst = worst.max(rel(g[idx], loss(s, &up, head), loss(s, &um, head)));
            }
        }
    }
    for idx in 0..head.weight.len() {
        let (mut hp, mut hm) = (head.clone(), head.clone());
        hp.weight[idx] += h;
        hm.weight[idx] -= h;
        worst = worst.max(rel(grads.head.weight[idx], loss(s, unit, &hp), loss(s, unit, &hm)));
    }
    for idx in 0..head.bias.len() {
        let (mut hp, mut hm) = (head.clone(), head.clone());
        hp.bias[idx] += h;
        hm.bias[idx] -= h;
        worst = worst.max(rel(grads.head.bias[idx], loss(s, unit, &hp), loss(s, unit, &hm)));
    }
    worst
}
