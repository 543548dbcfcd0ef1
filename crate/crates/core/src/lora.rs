//! Low-rank tuning directions, transfer coefficients and the per-task
//! training loop.
//!
//! A task's update for every weight matrix is
//!
//! ```text
//! Δω_{k+1} = Σ_τ B_τ S_τ A_τᵀ + B_{k+1} A_{k+1}ᵀ
//! ```
//!
//! where the past pairs `(B_τ, A_τ)` are frozen, `S_τ` are learnable
//! diagonal transfer coefficients and `(B_{k+1}, A_{k+1})` are the new
//! directions. New `A` columns are kept in the orthogonal complement of all
//! previous `A` columns of the same layer, which makes
//! `⟨B_{k+1}A_{k+1}ᵀ, B_τA_τᵀ⟩ = tr((A_{k+1}ᵀA_τ)(B_τᵀB_{k+1})) = 0` exact.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{backprop, Backbone, LinearHead, LoraOverlay};
use crate::error::{Error, Result};
use crate::linalg;

/// Columns below this fraction of their original norm after projection count
/// as numerically zero.
const DEGENERATE_COLUMN_TOL: f64 = 1e-10;

/// One rank-1 factor `b aᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningDirection {
    pub b: DVector<f64>,
    pub a: DVector<f64>,
    pub owner_task: usize,
    pub index: usize,
}

impl TuningDirection {
    pub fn outer(&self) -> DMatrix<f64> {
        &self.b * self.a.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    /// `p × r`.
    pub b: DMatrix<f64>,
    /// `q × r`.
    pub a: DMatrix<f64>,
}

impl LoraLayer {
    pub fn new(b: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self> {
        if b.ncols() != a.ncols() {
            return Err(Error::Shape(format!(
                "B has {} columns, A has {}",
                b.ncols(),
                a.ncols()
            )));
        }
        Ok(LoraLayer { b, a })
    }

    pub fn rank(&self) -> usize {
        self.b.ncols()
    }

    /// `Δω⊥ = B Aᵀ`.
    pub fn delta(&self) -> DMatrix<f64> {
        &self.b * self.a.transpose()
    }
}

/// Per-layer `(B, A)` pairs of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraUnit {
    pub task: usize,
    pub layers: Vec<LoraLayer>,
}

impl LoraUnit {
    /// `B ~ N(0, 1/r)` and `A ~ N(0, 1/q)` (fan-in scaling of each factor).
    pub fn init(task: usize, shapes: &[(usize, usize)], rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        let mut rng = linalg::rng(seed);
        let layers = shapes
            .iter()
            .map(|&(p, q)| LoraLayer {
                b: linalg::normal_matrix(&mut rng, p, rank, 1.0 / (rank as f64).sqrt()),
                a: linalg::normal_matrix(&mut rng, q, rank, 1.0 / (q as f64).sqrt()),
            })
            .collect();
        Ok(LoraUnit { task, layers })
    }

    pub fn zeros(task: usize, shapes: &[(usize, usize)], rank: usize) -> Self {
        LoraUnit {
            task,
            layers: shapes
                .iter()
                .map(|&(p, q)| LoraLayer {
                    b: DMatrix::zeros(p, rank),
                    a: DMatrix::zeros(q, rank),
                })
                .collect(),
        }
    }

    pub fn rank(&self) -> usize {
        self.layers.first().map_or(0, LoraLayer::rank)
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.b.nrows(), l.a.nrows())).collect()
    }

    pub fn directions(&self, layer: usize) -> Vec<TuningDirection> {
        let l = &self.layers[layer];
        (0..l.rank())
            .map(|i| TuningDirection {
                b: l.b.column(i).into_owned(),
                a: l.a.column(i).into_owned(),
                owner_task: self.task,
                index: i,
            })
            .collect()
    }

    /// The unit's own update `B Aᵀ` per layer, as an overlay.
    pub fn overlay(&self) -> LoraOverlay {
        LoraOverlay {
            task: Some(self.task),
            deltas: self.layers.iter().map(LoraLayer::delta).collect(),
        }
    }
}

/// Diagonal transfer coefficients: `blocks[layer][past_task]` holds
/// `diag(S_τ)` for that layer. Off-diagonal entries are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferCoefficients {
    blocks: Vec<Vec<DVector<f64>>>,
}

impl TransferCoefficients {
    pub fn from_blocks(blocks: Vec<Vec<DVector<f64>>>) -> Self {
        TransferCoefficients { blocks }
    }

    fn filled(past: &[LoraUnit], layers: usize, value: f64) -> Self {
        TransferCoefficients {
            blocks: (0..layers)
                .map(|l| {
                    past.iter()
                        .map(|u| DVector::from_element(u.layers[l].rank(), value))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn zeros(past: &[LoraUnit], layers: usize) -> Self {
        Self::filled(past, layers, 0.0)
    }

    pub fn identity(past: &[LoraUnit], layers: usize) -> Self {
        Self::filled(past, layers, 1.0)
    }

    pub fn zeros_like(&self) -> Self {
        TransferCoefficients {
            blocks: self
                .blocks
                .iter()
                .map(|l| l.iter().map(|b| DVector::zeros(b.len())).collect())
                .collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn past_tasks(&self) -> usize {
        self.blocks.first().map_or(0, Vec::len)
    }

    pub fn blocks(&self) -> &[Vec<DVector<f64>>] {
        &self.blocks
    }

    pub fn block(&self, layer: usize, task: usize) -> &DVector<f64> {
        &self.blocks[layer][task]
    }

    pub fn block_mut(&mut self, layer: usize, task: usize) -> &mut DVector<f64> {
        &mut self.blocks[layer][task]
    }

    /// All coefficients of one layer, concatenated over past tasks.
    pub fn layer_values(&self, layer: usize) -> Vec<f64> {
        self.blocks[layer].iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().flatten().flat_map(|b| b.iter().copied())
    }

    /// `S = blkdiag[S_1, …, S_k]` for one layer.
    pub fn blkdiag(&self, layer: usize) -> DMatrix<f64> {
        let values = self.layer_values(layer);
        DMatrix::from_diagonal(&DVector::from_vec(values))
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &TransferCoefficients) {
        for (ls, lo) in self.blocks.iter_mut().zip(&other.blocks) {
            for (bs, bo) in ls.iter_mut().zip(lo) {
                bs.axpy(scale, bo, 1.0);
            }
        }
    }
}

/// `Δω = Σ_τ B_τ S_τ A_τᵀ + B_new A_newᵀ`, materialized per layer.
pub fn compose_update(
    past: &[LoraUnit],
    transfer: &TransferCoefficients,
    new_unit: &LoraUnit,
) -> Result<LoraOverlay> {
    let layers = new_unit.layers.len();
    if transfer.past_tasks() != past.len() && !(past.is_empty() && transfer.layers() == 0) {
        return Err(Error::Shape(format!(
            "transfer coefficients cover {} past tasks, {} given",
            transfer.past_tasks(),
            past.len()
        )));
    }
    if !past.is_empty() && transfer.layers() != layers {
        return Err(Error::Shape(format!(
            "transfer coefficients have {} layers, unit has {}",
            transfer.layers(),
            layers
        )));
    }
    let mut deltas = Vec::with_capacity(layers);
    for l in 0..layers {
        let new = &new_unit.layers[l];
        let mut delta = new.delta();
        for (t, unit) in past.iter().enumerate() {
            let lay = unit.layers.get(l).ok_or_else(|| {
                Error::Shape(format!("past unit {} has no layer {l}", unit.task))
            })?;
            if lay.b.nrows() != new.b.nrows() || lay.a.nrows() != new.a.nrows() {
                return Err(Error::Shape(format!(
                    "layer {l}: past unit {} is {}x{}, new unit is {}x{}",
                    unit.task,
                    lay.b.nrows(),
                    lay.a.nrows(),
                    new.b.nrows(),
                    new.a.nrows()
                )));
            }
            let s = transfer.block(l, t);
            if s.len() != lay.rank() {
                return Err(Error::Shape(format!(
                    "layer {l}: S block for task {} has {} entries, rank is {}",
                    unit.task,
                    s.len(),
                    lay.rank()
                )));
            }
            if s.iter().all(|&v| v == 0.0) {
                continue;
            }
            // B diag(s) Aᵀ
            let mut bs = lay.b.clone();
            for (i, mut col) in bs.column_iter_mut().enumerate() {
                col *= s[i];
            }
            delta.gemm(1.0, &bs, &lay.a.transpose(), 1.0);
        }
        deltas.push(delta);
    }
    Ok(LoraOverlay {
        task: Some(new_unit.task),
        deltas,
    })
}

/// `⟨B_u A_uᵀ, B_v A_vᵀ⟩` per layer, as `tr((A_uᵀA_v)(B_vᵀB_u))`.
pub fn lora_inner_product(u: &LoraUnit, v: &LoraUnit) -> Result<Vec<f64>> {
    if u.layers.len() != v.layers.len() {
        return Err(Error::Shape(format!(
            "units have {} and {} layers",
            u.layers.len(),
            v.layers.len()
        )));
    }
    u.layers
        .iter()
        .zip(&v.layers)
        .enumerate()
        .map(|(l, (lu, lv))| {
            if lu.b.nrows() != lv.b.nrows() || lu.a.nrows() != lv.a.nrows() {
                return Err(Error::Shape(format!("layer {l}: unit shapes differ")));
            }
            let aa = lu.a.transpose() * &lv.a;
            let bb = lv.b.transpose() * &lu.b;
            Ok((aa * bb).trace())
        })
        .collect()
}

/// Per-layer cosine `⟨Δu, Δv⟩ / (‖Δu‖ ‖Δv‖)`; zero when either update vanishes.
pub fn lora_cosine(u: &LoraUnit, v: &LoraUnit) -> Result<Vec<f64>> {
    let uv = lora_inner_product(u, v)?;
    let uu = lora_inner_product(u, u)?;
    let vv = lora_inner_product(v, v)?;
    Ok(uv
        .iter()
        .zip(uu.iter().zip(&vv))
        .map(|(&x, (&a, &b))| {
            let denom = (a.max(0.0) * b.max(0.0)).sqrt();
            if denom == 0.0 {
                0.0
            } else {
                x / denom
            }
        })
        .collect())
}

/// Orthonormal basis of the span of every previous `A` column of `layer`.
pub fn past_a_basis(past: &[LoraUnit], layer: usize, q: usize) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = past
        .iter()
        .flat_map(|u| u.layers[layer].a.column_iter().map(|c| c.into_owned()))
        .collect();
    if cols.is_empty() {
        return DMatrix::zeros(q, 0);
    }
    linalg::orthonormal_basis(&DMatrix::from_columns(&cols), DEGENERATE_COLUMN_TOL)
}

/// `a' = a − Q(Qᵀa)` for each column; no renormalization. When the basis
/// spans the whole space the result is exactly zero.
pub fn project_new_directions(a_columns: &DMatrix<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
    if basis.ncols() == 0 {
        return a_columns.clone();
    }
    if basis.ncols() >= a_columns.nrows() {
        return DMatrix::zeros(a_columns.nrows(), a_columns.ncols());
    }
    let mut out = a_columns.clone();
    // two passes keep the residual at rounding level
    for _ in 0..2 {
        let coeffs = basis.transpose() * &out;
        out.gemm(-1.0, basis, &coeffs, 1.0);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticNet {
    pub penalty: f64,
    pub subgradient: TransferCoefficients,
}

/// `λ(α‖s‖₁ + (1−α)‖s‖₂)` summed over layers, where `s` is a layer's
/// diagonal; the ℓ2 term is the non-squared Euclidean norm.
pub fn elastic_net(s: &TransferCoefficients, lambda: f64, alpha: f64) -> ElasticNet {
    let mut sub = s.zeros_like();
    let mut penalty = 0.0;
    for l in 0..s.layers() {
        let values = s.layer_values(l);
        let l1: f64 = values.iter().map(|v| v.abs()).sum();
        let l2 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        penalty += lambda * (alpha * l1 + (1.0 - alpha) * l2);
        for t in 0..s.past_tasks() {
            let src = s.block(l, t);
            let dst = sub.block_mut(l, t);
            for i in 0..src.len() {
                let v = src[i];
                let sign = if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let radial = if l2 > 0.0 { v / l2 } else { 0.0 };
                dst[i] = lambda * (alpha * sign + (1.0 - alpha) * radial);
            }
        }
    }
    ElasticNet {
        penalty,
        subgradient: sub,
    }
}

/// `max(1, round(r₀ · exp(−α_decay (m − 1))))` for task index `m ≥ 1`.
pub fn rank_schedule(r0: usize, alpha_decay: f64, m: usize) -> usize {
    let m = m.max(1);
    let r = (r0 as f64 * (-alpha_decay * (m as f64 - 1.0)).exp()).round();
    (r as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    #[default]
    Learned,
    Zero,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Ortho {
    #[default]
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub lambda_decay: f64,
    pub rank: usize,
    pub rank_decay: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub transfer_mode: TransferMode,
    pub ortho: Ortho,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.006,
            alpha: 0.8,
            lambda_decay: 0.8,
            rank: 4,
            rank_decay: 0.0,
            epochs: 50,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
            transfer_mode: TransferMode::Learned,
            ortho: Ortho::On,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if !(self.lambda_decay >= 0.0) {
            return Err(Error::Config("lambda_decay must be >= 0".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if !(self.rank_decay >= 0.0) {
            return Err(Error::Config("rank_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }

    /// λ for the task that follows `past_tasks` committed ones.
    pub fn lambda_for(&self, past_tasks: usize) -> f64 {
        self.lambda * self.lambda_decay.powi(past_tasks as i32)
    }

    pub fn rank_for(&self, past_tasks: usize) -> usize {
        rank_schedule(self.rank, self.rank_decay, past_tasks + 1)
    }
}

/// Inputs as columns (`q × n`) with task-local labels `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl TrainingSet {
    pub fn new(inputs: DMatrix<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InsufficientData("empty training set".into()));
        }
        if inputs.ncols() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs, {} labels",
                inputs.ncols(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::Label { label: bad, classes });
        }
        Ok(TrainingSet {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub task: usize,
    pub lambda: f64,
    pub rank: usize,
    pub epoch_loss: Vec<f64>,
    pub final_penalty: f64,
    pub train_accuracy: f64,
    /// Layers whose new `A` columns were projected to zero.
    pub degenerate_layers: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub unit: LoraUnit,
    pub transfer: TransferCoefficients,
    pub head: LinearHead,
    pub log: TrainLog,
}

/// Trains the update for task `task` on top of the frozen `past` units by
/// mini-batch projected gradient descent.
pub fn train_task(
    task: usize,
    data: &TrainingSet,
    past: &[LoraUnit],
    backbone: &Backbone,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if data.inputs.nrows() != backbone.input_dim() {
        return Err(Error::Shape(format!(
            "inputs have dim {}, backbone expects {}",
            data.inputs.nrows(),
            backbone.input_dim()
        )));
    }
    let shapes = backbone.layer_shapes();
    for u in past {
        if u.shapes() != shapes {
            return Err(Error::Shape(format!(
                "past unit {} does not fit the backbone",
                u.task
            )));
        }
    }
    let k = past.len();
    let lambda = cfg.lambda_for(k);
    let rank = cfg.rank_for(k);
    let seed = linalg::derive_seed(cfg.seed, task as u64);
    let mut rng = linalg::rng(linalg::derive_seed(seed, 1));

    let mut unit = LoraUnit::init(task, &shapes, rank, seed)?;
    let bases: Vec<DMatrix<f64>> = match cfg.ortho {
        Ortho::On => shapes
            .iter()
            .enumerate()
            .map(|(l, &(_, q))| past_a_basis(past, l, q))
            .collect(),
        Ortho::Off => Vec::new(),
    };
    let project = |unit: &mut LoraUnit| {
        for (lay, basis) in unit.layers.iter_mut().zip(&bases) {
            lay.a = project_new_directions(&lay.a, basis);
        }
    };
    project(&mut unit);

    let layers = shapes.len();
    let mut transfer = match cfg.transfer_mode {
        TransferMode::Identity => TransferCoefficients::identity(past, layers),
        TransferMode::Learned | TransferMode::Zero => TransferCoefficients::zeros(past, layers),
    };
    let learn_transfer = cfg.transfer_mode == TransferMode::Learned && k > 0;
    let mut head = LinearHead::zeros(data.classes, backbone.embedding_dim());

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let lr = cfg.learning_rate;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xs = data.inputs.select_columns(chunk.iter());
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let grads = backprop(backbone, &xs, &labels, past, &transfer, &unit, &head)?;
            if !grads.loss.is_finite() {
                return Err(Error::Numerical(format!("task {task}: loss diverged")));
            }
            loss_sum += grads.loss * chunk.len() as f64;

            if learn_transfer {
                let en = elastic_net(&transfer, lambda, cfg.alpha);
                transfer.axpy(-lr, &grads.transfer);
                transfer.axpy(-lr, &en.subgradient);
            }
            for (l, lay) in unit.layers.iter_mut().enumerate() {
                lay.b -= &grads.new_b[l] * lr;
                lay.a -= &grads.new_a[l] * lr;
            }
            head.weight -= &grads.head.weight * lr;
            head.bias.axpy(-lr, &grads.head.bias, 1.0);
            project(&mut unit);
        }
        epoch_loss.push(loss_sum / data.len() as f64);
    }

    let mut degenerate_layers = Vec::new();
    let mut warnings = Vec::new();
    for (l, lay) in unit.layers.iter().enumerate() {
        if lay.a.iter().all(|&v| v == 0.0) {
            degenerate_layers.push(l);
            warnings.push(format!(
                "task {task}, layer {l}: new directions lie in the span of past directions (degenerate rank)"
            ));
        }
    }

    let overlay = compose_update(past, &transfer, &unit)?;
    let adapted = backbone.adapted(&overlay)?;
    let mut correct = 0usize;
    for (j, &label) in data.labels.iter().enumerate() {
        let h = adapted.embed(&data.inputs.column(j).into_owned(), None)?;
        if head.predict(&h) == label {
            correct += 1;
        }
    }
    let final_penalty = if learn_transfer {
        elastic_net(&transfer, lambda, cfg.alpha).penalty
    } else {
        0.0
    };

    Ok(TrainOutcome {
        log: TrainLog {
            task,
            lambda,
            rank,
            epoch_loss,
            final_penalty,
            train_accuracy: correct as f64 / data.len() as f64,
            degenerate_layers,
            warnings,
        },
        unit,
        transfer,
        head,
    })
}
