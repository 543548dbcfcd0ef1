//! Frozen feature extractor `h(x; ω₀ + Δω)`.
//!
//! A small multilayer perceptron with `tanh` between layers and a linear
//! output layer. The base weights are immutable once built; task-specific
//! updates are applied as additive overlays, either on the fly ([`Backbone::embed`])
//! or materialized once ([`Backbone::adapted`]) when the same overlay is
//! reused for many inputs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::lora::{compose_update, LoraUnit, TransferCoefficients};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub(crate) weight: DMatrix<f64>,
    pub(crate) bias: DVector<f64>,
}

impl Layer {
    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

/// Dense per-layer additive weight updates for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraOverlay {
    pub task: Option<usize>,
    pub deltas: Vec<DMatrix<f64>>,
}

impl LoraOverlay {
    pub fn zeros(backbone: &Backbone) -> Self {
        LoraOverlay {
            task: None,
            deltas: backbone
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    /// Sum of two overlays; the result carries no task provenance.
    pub fn sum(&self, other: &LoraOverlay) -> Result<LoraOverlay> {
        if self.deltas.len() != other.deltas.len()
            || self
                .deltas
                .iter()
                .zip(&other.deltas)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape("overlays have different layer shapes".into()));
        }
        Ok(LoraOverlay {
            task: None,
            deltas: self
                .deltas
                .iter()
                .zip(&other.deltas)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

impl Backbone {
    /// Seeded initialization; weights are `N(0, 1/fan_in)`, biases zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "backbone needs at least input and output dims, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("backbone dims must be >= 1, got {dims:?}")));
        }
        let mut rng = linalg::rng(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                Layer {
                    weight: linalg::normal_matrix(&mut rng, fan_out, fan_in, 1.0 / (fan_in as f64).sqrt()),
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Ok(Backbone {
            dims: dims.to_vec(),
            layers,
        })
    }

    /// Builds a backbone from explicit `(weight, bias)` pairs.
    pub fn from_parts(parts: Vec<(DMatrix<f64>, DVector<f64>)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        let mut dims = vec![parts[0].0.ncols()];
        for (i, (w, b)) in parts.iter().enumerate() {
            if w.ncols() != *dims.last().unwrap() {
                return Err(Error::Shape(format!(
                    "layer {i}: weight has {} inputs, previous layer emits {}",
                    w.ncols(),
                    dims.last().unwrap()
                )));
            }
            if b.len() != w.nrows() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} != weight rows {}",
                    b.len(),
                    w.nrows()
                )));
            }
            if w.nrows() == 0 || w.ncols() == 0 {
                return Err(Error::Config(format!("layer {i}: empty weight matrix")));
            }
            dims.push(w.nrows());
        }
        Ok(Backbone {
            dims,
            layers: parts
                .into_iter()
                .map(|(weight, bias)| Layer { weight, bias })
                .collect(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// `(rows, cols)` of every weight matrix, i.e. `(p, q)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.shape()).collect()
    }

    pub fn check_overlay(&self, overlay: &LoraOverlay) -> Result<()> {
        if overlay.deltas.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "overlay has {} layers, backbone has {}",
                overlay.deltas.len(),
                self.layers.len()
            )));
        }
        for (i, (d, l)) in overlay.deltas.iter().zip(&self.layers).enumerate() {
            if d.shape() != l.weight.shape() {
                return Err(Error::Shape(format!(
                    "overlay layer {i} is {:?}, weight is {:?}",
                    d.shape(),
                    l.weight.shape()
                )));
            }
        }
        Ok(())
    }

    /// A copy with `W_l + Δω_l` baked in. Intended for repeated embedding
    /// under one overlay.
    pub fn adapted(&self, overlay: &LoraOverlay) -> Result<Backbone> {
        self.check_overlay(overlay)?;
        Ok(Backbone {
            dims: self.dims.clone(),
            layers: self
                .layers
                .iter()
                .zip(&overlay.deltas)
                .map(|(l, d)| Layer {
                    weight: &l.weight + d,
                    bias: l.bias.clone(),
                })
                .collect(),
        })
    }

    pub fn embed(&self, x: &DVector<f64>, overlay: Option<&LoraOverlay>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has dim {}, backbone expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if let Some(o) = overlay {
            self.check_overlay(o)?;
        }
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = match overlay {
                Some(o) => (&layer.weight + &o.deltas[i]) * &a,
                None => &layer.weight * &a,
            };
            z += &layer.bias;
            if i < last {
                z.apply(|v| *v = v.tanh());
            }
            a = z;
        }
        Ok(a)
    }

    /// Embeds the columns of `xs` (`input_dim × n`) without an overlay.
    pub fn embed_batch(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if xs.nrows() != self.input_dim() {
            return Err(Error::Shape(format!(
                "inputs have dim {}, backbone expects {}",
                xs.nrows(),
                self.input_dim()
            )));
        }
        Ok(self.forward(xs, None).pop().unwrap())
    }

    /// Layer activations for a batch; element 0 is the input, the last is
    /// the embedding. `weights` overrides the layer weights when given.
    fn forward(&self, xs: &DMatrix<f64>, weights: Option<&[DMatrix<f64>]>) -> Vec<DMatrix<f64>> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(xs.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let w = weights.map_or(&layer.weight, |ws| &ws[i]);
            let mut z = w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if i < last {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }
}

/// Temporary per-task linear classifier used only for the training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `classes × d`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LinearHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LinearHead {
            weight: DMatrix::zeros(classes, dim),
            bias: DVector::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn predict(&self, h: &DVector<f64>) -> usize {
        let logits = &self.weight * h + &self.bias;
        logits.argmax().0
    }
}

/// Gradient blocks of the task loss. Only the learnable parameters have a
/// block; frozen past units never appear here.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub transfer: TransferCoefficients,
    /// Per layer, `p × r`.
    pub new_b: Vec<DMatrix<f64>>,
    /// Per layer, `q × r`.
    pub new_a: Vec<DMatrix<f64>>,
    pub head: LinearHead,
}

/// Mean cross-entropy of `head` over a batch embedded under
/// `Σ_τ B_τ S_τ A_τᵀ + B_new A_newᵀ`, with analytic gradients for the
/// transfer coefficients, the new unit and the head. Base weights and past
/// units are constants, so no gradient blocks exist for them.
pub fn backprop(
    backbone: &Backbone,
    xs: &DMatrix<f64>,
    labels: &[usize],
    past: &[LoraUnit],
    transfer: &TransferCoefficients,
    new_unit: &LoraUnit,
    head: &LinearHead,
) -> Result<Gradients> {
    let n = labels.len();
    if n == 0 || xs.ncols() != n {
        return Err(Error::InsufficientData(format!(
            "batch has {} inputs and {} labels",
            xs.ncols(),
            n
        )));
    }
    if xs.nrows() != backbone.input_dim() {
        return Err(Error::Shape(format!(
            "inputs have dim {}, backbone expects {}",
            xs.nrows(),
            backbone.input_dim()
        )));
    }
    if head.weight.ncols() != backbone.embedding_dim() {
        return Err(Error::Shape(format!(
            "head expects dim {}, embedding is {}",
            head.weight.ncols(),
            backbone.embedding_dim()
        )));
    }
    let classes = head.classes();
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::Label { label: bad, classes });
    }

    let overlay = compose_update(past, transfer, new_unit)?;
    backbone.check_overlay(&overlay)?;
    let weights: Vec<DMatrix<f64>> = backbone
        .layers
        .iter()
        .zip(&overlay.deltas)
        .map(|(l, d)| &l.weight + d)
        .collect();
    let acts = backbone.forward(xs, Some(&weights));
    let emb = acts.last().unwrap();

    // softmax cross-entropy
    let mut logits = &head.weight * emb;
    for mut col in logits.column_iter_mut() {
        col += &head.bias;
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut dlogits = DMatrix::zeros(classes, n);
    for (j, &label) in labels.iter().enumerate() {
        let col = logits.column(j);
        let max = col.max();
        let sum: f64 = col.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss -= col[label] - log_z;
        for c in 0..classes {
            let p = (col[c] - log_z).exp();
            dlogits[(c, j)] = (p - if c == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    loss *= inv_n;

    let head_grad = LinearHead {
        weight: &dlogits * emb.transpose(),
        bias: DVector::from_iterator(classes, dlogits.row_iter().map(|r| r.sum())),
    };

    // backward through the layers; delta holds dL/dz for the current layer
    let last = backbone.layers.len() - 1;
    let mut delta = head.weight.transpose() * &dlogits;
    let mut weight_grads = vec![DMatrix::zeros(0, 0); backbone.layers.len()];
    for l in (0..=last).rev() {
        if l < last {
            // z was passed through tanh: a = tanh(z), da/dz = 1 - a²
            let a = &acts[l + 1];
            delta.zip_apply(a, |d, av| *d *= 1.0 - av * av);
        }
        weight_grads[l] = &delta * acts[l].transpose();
        if l > 0 {
            delta = weights[l].transpose() * &delta;
        }
    }

    let mut transfer_grad = transfer.zeros_like();
    let mut new_b = Vec::with_capacity(weight_grads.len());
    let mut new_a = Vec::with_capacity(weight_grads.len());
    for (l, g) in weight_grads.iter().enumerate() {
        for (t, unit) in past.iter().enumerate() {
            let lay = &unit.layers[l];
            // ∂L/∂s_i = b_iᵀ G a_i
            let ga = g * &lay.a;
            let block = transfer_grad.block_mut(l, t);
            for i in 0..lay.rank() {
                block[i] = lay.b.column(i).dot(&ga.column(i));
            }
        }
        let lay = &new_unit.layers[l];
        new_b.push(g * &lay.a);
        new_a.push(g.transpose() * &lay.b);
    }

    Ok(Gradients {
        loss,
        transfer: transfer_grad,
        new_b,
        new_a,
        head: head_grad,
    })
}
