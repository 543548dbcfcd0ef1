//! Streaming Gram and class-mean statistics with ridge-regularized linear
//! discriminant prediction: `c* = argmax_c hᵀ(G + γI)⁻¹ e(c)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_GAMMA: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct LdaStats {
    gram: DMatrix<f64>,
    class_sums: Vec<DVector<f64>>,
    counts: Vec<u64>,
    tasks_seen: usize,
    gamma: f64,
}

/// One embedded training sample together with the size of its task.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaSample {
    pub h: DVector<f64>,
    pub label: usize,
    pub task_size: usize,
}

impl LdaStats {
    pub fn new(dim: usize, classes: usize) -> Self {
        LdaStats {
            gram: DMatrix::zeros(dim, dim),
            class_sums: vec![DVector::zeros(dim); classes],
            counts: vec![0; classes],
            tasks_seen: 0,
            gamma: DEFAULT_GAMMA,
        }
    }

    /// Rebuilds statistics from stored parts (used when loading a KB).
    pub fn from_parts(
        gram: DMatrix<f64>,
        class_sums: Vec<DVector<f64>>,
        counts: Vec<u64>,
        tasks_seen: usize,
        gamma: f64,
    ) -> Result<Self> {
        let d = gram.nrows();
        if !gram.is_square() || class_sums.iter().any(|e| e.len() != d) {
            return Err(Error::Shape("LDA statistics have inconsistent dimensions".into()));
        }
        if counts.len() != class_sums.len() {
            return Err(Error::Shape("LDA counts do not match class count".into()));
        }
        if !(gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
        }
        if linalg::max_asymmetry(&gram) > 1e-9 * gram.amax().max(1.0) {
            return Err(Error::NotSpd("LDA Gram matrix is not symmetric".into()));
        }
        Ok(LdaStats {
            gram,
            class_sums,
            counts,
            tasks_seen,
            gamma,
        })
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn classes(&self) -> usize {
        self.class_sums.len()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn class_sums(&self) -> &[DVector<f64>] {
        &self.class_sums
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn tasks_seen(&self) -> usize {
        self.tasks_seen
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        if !(gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
        }
        self.gamma = gamma;
        Ok(())
    }

    /// Extends the label range to `classes` (new classes start empty).
    pub fn register_classes(&mut self, classes: usize) {
        let d = self.dim();
        while self.class_sums.len() < classes {
            self.class_sums.push(DVector::zeros(d));
            self.counts.push(0);
        }
    }

    pub fn mark_task_done(&mut self) {
        self.tasks_seen += 1;
    }

    /// `G += hhᵀ`, `e(c) += h / (m |D_τ|)`.
    pub fn accumulate(&mut self, h: &DVector<f64>, label: usize, task_size: usize, m: usize) -> Result<()> {
        if h.len() != self.dim() {
            return Err(Error::Shape(format!(
                "embedding has dim {}, statistics have dim {}",
                h.len(),
                self.dim()
            )));
        }
        if label >= self.classes() {
            return Err(Error::Label {
                label,
                classes: self.classes(),
            });
        }
        if task_size == 0 || m == 0 {
            return Err(Error::Config("task size and task count must be positive".into()));
        }
        self.gram.ger(1.0, h, h, 1.0);
        self.class_sums[label].axpy(1.0 / (m as f64 * task_size as f64), h, 1.0);
        self.counts[label] += 1;
        Ok(())
    }

    /// Solves once for `W = (G + γI)⁻¹ [e(0) … e(C−1)]`.
    pub fn predictor(&self, gamma: f64) -> Result<LdaPredictor> {
        if !(gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
        }
        if self.class_sums.iter().all(|e| e.iter().all(|&v| v == 0.0)) {
            return Err(Error::Data("no class has a nonzero mean statistic".into()));
        }
        let d = self.dim();
        let mut reg = self.gram.clone();
        for i in 0..d {
            reg[(i, i)] += gamma;
        }
        let chol = linalg::cholesky(&reg, "G + γI")?;
        let e = DMatrix::from_columns(&self.class_sums);
        Ok(LdaPredictor {
            weights: chol.solve(&e),
        })
    }

    pub fn predict(&self, h: &DVector<f64>, gamma: f64) -> Result<usize> {
        self.predictor(gamma)?.predict(h)
    }
}

#[derive(Debug, Clone)]
pub struct LdaPredictor {
    weights: DMatrix<f64>,
}

impl LdaPredictor {
    pub fn scores(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        if h.len() != self.weights.nrows() {
            return Err(Error::Shape(format!(
                "embedding has dim {}, predictor expects {}",
                h.len(),
                self.weights.nrows()
            )));
        }
        Ok(self.weights.tr_mul(h))
    }

    /// Highest score wins; ties go to the lowest class id.
    pub fn predict(&self, h: &DVector<f64>) -> Result<usize> {
        let s = self.scores(h)?;
        let mut best = 0;
        for c in 1..s.len() {
            if s[c] > s[best] {
                best = c;
            }
        }
        Ok(best)
    }
}

/// Direct double-sum evaluation over a canonically sorted copy of the data,
/// so the result does not depend on input order.
pub fn batch_stats(samples: &[LdaSample], m: usize, classes: usize) -> Result<LdaStats> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InsufficientData("empty LDA dataset".into()))?;
    let d = first.h.len();
    let mut sorted: Vec<&LdaSample> = samples.iter().collect();
    sorted.sort_by(|a, b| {
        a.label
            .cmp(&b.label)
            .then(a.task_size.cmp(&b.task_size))
            .then_with(|| {
                a.h.iter()
                    .zip(b.h.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    let mut stats = LdaStats::new(d, classes);
    for s in sorted {
        stats.accumulate(&s.h, s.label, s.task_size, m)?;
    }
    Ok(stats)
}
