//! Retrieval-error bounds: measured separation, log-volume gap and variance
//! factors, the closed-form misretrieval bound, the minimum separation that
//! guarantees a target error, and a Monte Carlo check in a world that meets
//! the bound's assumptions exactly.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::signature::GaussianComponent;

/// Substituted for a measured σ² of zero.
pub const SIGMA2_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub d: usize,
    pub delta: f64,
    pub kappa: f64,
    pub sigma2: f64,
    /// Number of competing (false) components; `N − 1`.
    pub false_components: usize,
}

impl BoundParams {
    /// `n` tasks with `τ` components each: `(n − 1)τ` false components.
    pub fn uniform(d: usize, delta: f64, kappa: f64, sigma2: f64, n: usize, tau: usize) -> Self {
        BoundParams {
            d,
            delta,
            kappa,
            sigma2,
            false_components: n.saturating_sub(1) * tau,
        }
    }

    /// Total candidate count `N`.
    pub fn candidates(&self) -> usize {
        self.false_components + 1
    }

    pub fn premise_floor(&self) -> f64 {
        premise_floor(self.d, self.kappa)
    }
}

/// `max(0, −2κ/d)`, the smallest δ for which the bound is stated.
pub fn premise_floor(d: usize, kappa: f64) -> f64 {
    (-2.0 * kappa / d as f64).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    /// Clamped to `[0, 1]`.
    pub value: f64,
    /// Unclamped closed form; `None` when the premise fails.
    pub raw: Option<f64>,
    pub premise_violated: bool,
}

/// `exp(−dδ²/(4δ+16)) + (N−1)·exp(−(dδ/2+κ)²/(2σ²d + (2/3)(dδ/2+κ)))`.
pub fn error_bound(p: &BoundParams) -> BoundValue {
    let d = p.d as f64;
    let violated = p.d == 0
        || !p.delta.is_finite()
        || p.delta < p.premise_floor()
        || !(p.sigma2 > 0.0);
    if violated {
        return BoundValue {
            value: 1.0,
            raw: None,
            premise_violated: true,
        };
    }
    let first = (-d * p.delta * p.delta / (4.0 * p.delta + 16.0)).exp();
    let u = d * p.delta / 2.0 + p.kappa;
    let second = if p.false_components == 0 {
        0.0
    } else {
        p.false_components as f64 * (-(u * u) / (2.0 * p.sigma2 * d + 2.0 / 3.0 * u)).exp()
    };
    let raw = first + second;
    BoundValue {
        value: raw.clamp(0.0, 1.0),
        raw: Some(raw),
        premise_violated: false,
    }
}

/// Smallest δ that drives the bound to `eps` for `n_candidates` candidates.
pub fn min_delta(eps: f64, d: usize, kappa: f64, sigma2: f64, n_candidates: usize) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("target error must lie in (0, 1), got {eps}")));
    }
    if d == 0 || n_candidates == 0 {
        return Err(Error::Config("d and N must be at least 1".into()));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Config(format!("sigma2 must be positive, got {sigma2}")));
    }
    let df = d as f64;
    let m = 3.0 * df * sigma2 - kappa;
    let disc = m * m - 24.0 * df * sigma2 * kappa;
    let branch1 = if disc < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.25 * (m + disc.sqrt()) - kappa
    };
    let l = (n_candidates as f64 / eps).ln();
    let branch2 = l * (1.0 + (1.0 + 4.0 * df / l).sqrt());
    let delta = 2.0 / df * branch1.max(branch2);
    Ok(delta.max(premise_floor(d, kappa)))
}

fn mahalanobis_all(embeddings: &[DVector<f64>], c: &GaussianComponent) -> Result<Vec<f64>> {
    embeddings
        .iter()
        .map(|h| crate::signature::signature_score(h, c))
        .collect()
}

/// `δ = mean((h−m)ᵀΛ⁻¹(h−m))/d − 1`; may be negative.
pub fn empirical_separation(embeddings: &[DVector<f64>], false_component: &GaussianComponent) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::InsufficientData("separation needs at least one embedding".into()));
    }
    let q = mahalanobis_all(embeddings, false_component)?;
    let mean = q.iter().sum::<f64>() / q.len() as f64;
    Ok(mean / false_component.dim() as f64 - 1.0)
}

/// `min over false components of log|Λ_false| − log|Λ_true|`.
pub fn empirical_kappa(true_component: &GaussianComponent, others: &[&GaussianComponent]) -> Result<f64> {
    if others.is_empty() {
        return Err(Error::InsufficientData("kappa needs at least one false component".into()));
    }
    Ok(others
        .iter()
        .map(|c| c.log_volume() - true_component.log_volume())
        .fold(f64::INFINITY, f64::min))
}

/// `tr Cov[h] / d` of a cloud of embeddings (unbiased).
pub fn embedding_variance(embeddings: &[DVector<f64>]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::InsufficientData("variance needs at least two embeddings".into()));
    }
    let n = embeddings.len() as f64;
    let d = embeddings[0].len();
    let mean = embeddings.iter().fold(DVector::zeros(d), |a, h| a + h) / n;
    let ss: f64 = embeddings.iter().map(|h| (h - &mean).norm_squared()).sum();
    Ok(ss / (n - 1.0) / d as f64)
}

/// Sample variance of the Mahalanobis form, divided by `d`.
pub fn empirical_sigma2(embeddings: &[DVector<f64>], component: &GaussianComponent) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::InsufficientData("sigma2 needs at least two embeddings".into()));
    }
    let q = mahalanobis_all(embeddings, component)?;
    let n = q.len() as f64;
    let mean = q.iter().sum::<f64>() / n;
    let var = q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(var / component.dim() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub d: usize,
    pub delta: f64,
    pub tasks: usize,
    pub components: usize,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub config: McConfig,
    pub false_components: usize,
    pub sigma2: f64,
    pub kappa: f64,
    pub empirical_error: f64,
    pub standard_error: f64,
    pub bound: BoundValue,
    /// `empirical ≤ bound + 3·SE`.
    pub passed: bool,
}

/// Simulates retrieval with identity covariances: the true component sits at
/// the origin and every false mean at distance `√(δd)` along a seeded random
/// direction, so the measured δ equals the target, κ = 0 and σ² = 2 + 4δ.
pub fn mc_validate(cfg: &McConfig) -> Result<McReport> {
    if cfg.d == 0 {
        return Err(Error::Config("d must be at least 1".into()));
    }
    if cfg.tasks == 0 || cfg.components == 0 || cfg.samples == 0 {
        return Err(Error::Config("tasks, components and samples must be positive".into()));
    }
    if !(cfg.delta >= 0.0) {
        return Err(Error::Config(format!("delta must be non-negative, got {}", cfg.delta)));
    }
    let d = cfg.d;
    let false_components = (cfg.tasks - 1) * cfg.components;
    let radius2 = cfg.delta * d as f64;
    let mut rng = linalg::rng(linalg::derive_seed(cfg.seed, 0));
    let means: Vec<DVector<f64>> = (0..false_components)
        .map(|_| loop {
            let u = linalg::normal_vector(&mut rng, d, 1.0);
            let n = u.norm();
            if n > 0.0 {
                break u * (radius2.sqrt() / n);
            }
        })
        .collect();

    // ‖x − μ‖² < ‖x‖²  ⇔  2xᵀμ > ‖μ‖²
    let mut rng = linalg::rng(linalg::derive_seed(cfg.seed, 1));
    let mut x = DVector::zeros(d);
    let mut errors = 0usize;
    for _ in 0..cfg.samples {
        for v in x.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        if means.iter().any(|mu| 2.0 * x.dot(mu) > radius2) {
            errors += 1;
        }
    }
    let n = cfg.samples as f64;
    let p = errors as f64 / n;
    let se = (p * (1.0 - p) / n).sqrt();
    let sigma2 = 2.0 + 4.0 * cfg.delta;
    let bound = error_bound(&BoundParams {
        d,
        delta: cfg.delta,
        kappa: 0.0,
        sigma2,
        false_components,
    });
    Ok(McReport {
        config: *cfg,
        false_components,
        sigma2,
        kappa: 0.0,
        empirical_error: p,
        standard_error: se,
        passed: p <= bound.value + 3.0 * se,
        bound,
    })
}

/// One (task, component) row of a pipeline bound report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub task: usize,
    pub component: usize,
    pub samples: usize,
    pub delta: Option<f64>,
    pub kappa: Option<f64>,
    pub sigma2: Option<f64>,
    pub candidates: usize,
    pub min_delta: Option<f64>,
    pub bound: Option<BoundValue>,
    pub empirical_error: Option<f64>,
    pub exceeds: Option<bool>,
    /// Largest `tr Cov[h_i(x)] / d` over false modules: the variance of the
    /// embedding vector itself rather than of the quadratic form.
    pub sigma2_vector: Option<f64>,
    /// Required separation when `sigma2_vector` stands in for σ².
    pub min_delta_vector: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVerdict {
    pub task: usize,
    pub min_delta_measured: Option<f64>,
    pub min_delta_required: Option<f64>,
    pub exceeds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub eps: f64,
    pub rows: Vec<BoundRow>,
    pub tasks: Vec<TaskVerdict>,
    pub all_tasks_exceed: bool,
}

impl BoundReport {
    pub fn to_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| format!("{x}")).unwrap_or_default()
        }
        let mut out = String::from(
            "task,component,samples,delta,kappa,sigma2,candidates,min_delta,bound,premise_violated,empirical_error,exceeds,sigma2_vector,min_delta_vector\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.task,
                r.component,
                r.samples,
                opt(r.delta),
                opt(r.kappa),
                opt(r.sigma2),
                r.candidates,
                opt(r.min_delta),
                opt(r.bound.map(|b| b.value)),
                r.bound.map(|b| b.premise_violated.to_string()).unwrap_or_default(),
                opt(r.empirical_error),
                r.exceeds.map(|b| b.to_string()).unwrap_or_default(),
                opt(r.sigma2_vector),
                opt(r.min_delta_vector),
            ));
        }
        out
    }
}
