//! Continual-learning metrics over the accuracy matrix.
//!
//! Task indices are 1-based in the public API to match how accuracy
//! matrices are usually written: `acc(τ, κ)` is the accuracy on task `τ`
//! after training through task `κ`, defined for `τ ≤ κ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccMatrix {
    /// `rows[κ−1][τ−1] = acc(τ, κ)`, a lower-triangular ragged layout.
    rows: Vec<Vec<Option<f64>>>,
}

impl AccMatrix {
    pub fn new(tasks: usize) -> Self {
        AccMatrix {
            rows: (1..=tasks).map(|k| vec![None; k]).collect(),
        }
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, tau: usize, kappa: usize, acc: f64) -> Result<()> {
        self.check(tau, kappa)?;
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Data(format!("accuracy {acc} outside [0, 1]")));
        }
        self.rows[kappa - 1][tau - 1] = Some(acc);
        Ok(())
    }

    pub fn get(&self, tau: usize, kappa: usize) -> Result<f64> {
        self.check(tau, kappa)?;
        self.rows[kappa - 1][tau - 1]
            .ok_or_else(|| Error::Data(format!("acc({tau}, {kappa}) is missing")))
    }

    fn check(&self, tau: usize, kappa: usize) -> Result<()> {
        if tau == 0 || tau > kappa || kappa > self.tasks() {
            return Err(Error::Data(format!(
                "acc({tau}, {kappa}) is outside the lower triangle of a {}-task matrix",
                self.tasks()
            )));
        }
        Ok(())
    }

    /// Filled matrix for `tasks` tasks from `f(τ, κ)`.
    pub fn from_fn(tasks: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut m = AccMatrix::new(tasks);
        for k in 1..=tasks {
            for t in 1..=k {
                m.set(t, k, f(t, k))?;
            }
        }
        Ok(m)
    }
}

/// `ACC_κ = (1/κ) Σ_{τ≤κ} acc(τ, κ)`.
pub fn average_accuracy(m: &AccMatrix, kappa: usize) -> Result<f64> {
    if kappa == 0 {
        return Err(Error::Data("kappa must be at least 1".into()));
    }
    let mut sum = 0.0;
    for t in 1..=kappa {
        sum += m.get(t, kappa)?;
    }
    Ok(sum / kappa as f64)
}

/// `F_κ = (1/(κ−1)) Σ_{τ<κ} (max_{τ≤τ′<κ} acc(τ, τ′) − acc(τ, κ))`, unclamped.
pub fn forgetting(m: &AccMatrix, kappa: usize) -> Result<f64> {
    if kappa < 2 {
        return Err(Error::Data("forgetting needs kappa >= 2".into()));
    }
    let mut sum = 0.0;
    for t in 1..kappa {
        let mut best = f64::NEG_INFINITY;
        for tp in t..kappa {
            best = best.max(m.get(t, tp)?);
        }
        sum += best - m.get(t, kappa)?;
    }
    Ok(sum / (kappa - 1) as f64)
}

pub fn retrieval_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InsufficientData("no retrieval targets".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `(acc_a − acc_b) / (time_a − time_b)`.
pub fn retrieval_accuracy_gain(acc_a: f64, acc_b: f64, time_a: f64, time_b: f64) -> Result<f64> {
    let dt = time_a - time_b;
    if dt == 0.0 {
        return Err(Error::Data("equal times make the gain undefined".into()));
    }
    Ok((acc_a - acc_b) / dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_examples() {
        let mut m = AccMatrix::new(2);
        m.set(1, 1, 0.9).unwrap();
        assert_eq!(average_accuracy(&m, 1).unwrap(), 0.9);
        m.set(1, 2, 0.8).unwrap();
        m.set(2, 2, 0.7).unwrap();
        assert!((average_accuracy(&m, 2).unwrap() - 0.75).abs() < 1e-15);
        let ones = AccMatrix::from_fn(4, |_, _| 1.0).unwrap();
        assert_eq!(average_accuracy(&ones, 4).unwrap(), 1.0);
    }

    #[test]
    fn missing_entry_is_an_error() {
        let m = AccMatrix::new(2);
        assert!(average_accuracy(&m, 2).is_err());
        assert!(m.get(2, 1).is_err());
    }

    #[test]
    fn forgetting_examples() {
        let mut m = AccMatrix::new(2);
        m.set(1, 1, 0.9).unwrap();
        m.set(1, 2, 0.8).unwrap();
        assert!((forgetting(&m, 2).unwrap() - 0.1).abs() < 1e-15);
        m.set(1, 1, 0.8).unwrap();
        m.set(1, 2, 0.9).unwrap();
        assert!((forgetting(&m, 2).unwrap() + 0.1).abs() < 1e-15);
        m.set(1, 2, 0.8).unwrap();
        assert_eq!(forgetting(&m, 2).unwrap(), 0.0);
        assert!(forgetting(&m, 1).is_err());
    }

    #[test]
    fn retrieval_examples() {
        assert_eq!(retrieval_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(retrieval_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(retrieval_accuracy(&[1, 2, 3, 0], &[1, 2, 3, 4]).unwrap(), 0.75);
        assert!(retrieval_accuracy(&[], &[]).is_err());
        assert!(retrieval_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn gain_examples() {
        assert!(retrieval_accuracy_gain(5.0, 5.0, 2.0, 1.0).unwrap() == 0.0);
        assert!(retrieval_accuracy_gain(2.0, 1.0, 1.0, 2.0).unwrap() < 0.0);
        assert!(retrieval_accuracy_gain(2.0, 1.0, 1.0, 1.0).is_err());
    }
}
