//! Gaussian and Gaussian-mixture task signatures.
//!
//! A task's signature is a set of full-covariance Gaussian components fitted
//! to its embeddings. The number of components is chosen by running EM for
//! every candidate count up to a maximum and keeping the fit with the lowest
//! BIC.
//!
//! Covariances carry a ridge `εI`. Inside EM the ridge is the exact M-step of
//! a penalized objective, `Σ_i log Σ_k π_k N(x_i; μ_k, Σ_k) − ½ ε Σ_k N_k tr(Σ_k⁻¹)`,
//! so every EM iteration is monotone in that objective.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Rng};

/// Smallest ridge ever applied; keeps degenerate clouds invertible.
pub const RIDGE_FLOOR: f64 = 1e-12;

const EM_MAX_ITER: usize = 200;
const EM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ridge {
    /// `εI` with the given ε.
    Absolute(f64),
    /// `ε = factor · tr(Λ̂)/d` of the data covariance.
    Relative(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-6)
    }
}

impl Ridge {
    fn resolve(self, data_cov_trace: f64, d: usize) -> f64 {
        let eps = match self {
            Ridge::Absolute(e) => e,
            Ridge::Relative(f) => f * data_cov_trace / d as f64,
        };
        eps.max(RIDGE_FLOOR)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// EM for every component count in `1..=T`, lowest BIC wins.
    #[default]
    EmBic,
    /// EM with exactly this many components (clamped to `1..=T`).
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl PartialEq for GaussianComponent {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight && self.mean == other.mean && self.cov == other.cov
    }
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Shape("component mean is empty".into()));
        }
        if cov.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "covariance is {:?}, mean has dim {d}",
                cov.shape()
            )));
        }
        if !(weight > 0.0 && weight <= 1.0 + 1e-12) {
            return Err(Error::Data(format!("component weight {weight} outside (0, 1]")));
        }
        let scale = cov.amax().max(1.0);
        let asym = linalg::max_asymmetry(&cov);
        if asym > 1e-12 * scale {
            return Err(Error::NotSpd(format!("covariance asymmetric by {asym:e}")));
        }
        let chol = linalg::cholesky(&cov, "component covariance")?;
        let log_det = linalg::chol_log_det(&chol);
        Ok(GaussianComponent {
            weight,
            mean,
            cov,
            chol,
            log_det,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `log|Λ|`, cached.
    pub fn log_volume(&self) -> f64 {
        self.log_det
    }

    pub(crate) fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    /// `(h − m)ᵀ Λ⁻¹ (h − m)` without dimension checks.
    pub(crate) fn mahalanobis(&self, h: &DVector<f64>) -> f64 {
        linalg::chol_quad_form(&self.chol, &(h - &self.mean))
    }

    /// Gaussian log-density of `h` (mixture weight not included).
    pub fn log_density(&self, h: &DVector<f64>) -> Result<f64> {
        let q = signature_score(h, self)?;
        Ok(-0.5 * (self.dim() as f64 * (2.0 * PI).ln() + self.log_det + q))
    }
}

/// Mahalanobis signature score of `h` against a component.
pub fn signature_score(h: &DVector<f64>, c: &GaussianComponent) -> Result<f64> {
    if h.len() != c.dim() {
        return Err(Error::Shape(format!(
            "embedding has dim {}, component has dim {}",
            h.len(),
            c.dim()
        )));
    }
    Ok(c.mahalanobis(h))
}

pub fn log_volume(c: &GaussianComponent) -> f64 {
    c.log_volume()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiKeySignature {
    pub task: usize,
    components: Vec<GaussianComponent>,
}

impl MultiKeySignature {
    pub fn new(task: usize, components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Data(format!("task {task}: signature has no components")));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::Shape(format!("task {task}: components differ in dimension")));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "task {task}: component weights sum to {total}"
            )));
        }
        Ok(MultiKeySignature { task, components })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Lowest-scoring component `(t, score)`; ties go to the lower index.
    pub fn nearest(&self, h: &DVector<f64>) -> Result<(usize, f64)> {
        let mut best = (0, f64::INFINITY);
        for (t, c) in self.components.iter().enumerate() {
            let s = signature_score(h, c)?;
            if s < best.1 {
                best = (t, s);
            }
        }
        Ok(best)
    }
}

fn check_cloud(embeddings: &[DVector<f64>]) -> Result<usize> {
    if embeddings.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 embeddings, got {}",
            embeddings.len()
        )));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|h| h.len() != d) {
        return Err(Error::Shape("embeddings differ in dimension".into()));
    }
    Ok(d)
}

fn to_columns(embeddings: &[DVector<f64>]) -> DMatrix<f64> {
    DMatrix::from_columns(embeddings)
}

/// Weighted mean and scatter `Σ r (x−m)(x−m)ᵀ` of the columns of `x`.
fn weighted_moments(x: &DMatrix<f64>, r: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = x.nrows();
    let nk: f64 = r.iter().sum();
    let mut mean = DVector::zeros(d);
    for (j, &w) in r.iter().enumerate() {
        if w != 0.0 {
            mean.axpy(w, &x.column(j), 1.0);
        }
    }
    mean /= nk;
    let mut centered = x.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col -= &mean;
        col *= r[j].sqrt();
    }
    let scatter = &centered * centered.transpose();
    (nk, mean, scatter)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn ridge_for(x: &DMatrix<f64>, ridge: Ridge) -> f64 {
    let n = x.ncols();
    let (_, _, scatter) = weighted_moments(x, &vec![1.0; n]);
    ridge.resolve(scatter.trace() / n as f64, x.nrows())
}

fn component_from_moments(
    weight: f64,
    nk: f64,
    mean: DVector<f64>,
    scatter: &DMatrix<f64>,
    eps: f64,
) -> Result<GaussianComponent> {
    let d = mean.len();
    let mut cov = scatter / nk;
    symmetrize(&mut cov);
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    GaussianComponent::new(weight, mean, cov)
}

/// Maximum-likelihood Gaussian: sample mean, `(1/N)Σ(h−m)(h−m)ᵀ + εI`.
pub fn fit_gaussian(embeddings: &[DVector<f64>], ridge: Ridge) -> Result<GaussianComponent> {
    check_cloud(embeddings)?;
    let x = to_columns(embeddings);
    let eps = ridge_for(&x, ridge);
    let (nk, mean, scatter) = weighted_moments(&x, &vec![1.0; x.ncols()]);
    component_from_moments(1.0, nk, mean, &scatter, eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmTrace {
    pub components: usize,
    /// Penalized objective after each E-step.
    pub objective: Vec<f64>,
    /// Iterations (by index into `objective`) that followed a component drop.
    pub drops: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub requested: usize,
    pub fitted: usize,
    pub log_likelihood: f64,
    pub bic: f64,
    pub trace: EmTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiKeyFit {
    pub signature: MultiKeySignature,
    pub candidates: Vec<Candidate>,
    pub ridge: f64,
}

struct Mixture {
    components: Vec<GaussianComponent>,
}

impl Mixture {
    fn from_responsibilities(
        x: &DMatrix<f64>,
        resp: &[Vec<f64>],
        eps: f64,
        min_count: f64,
    ) -> Result<(Self, bool)> {
        let n = x.ncols() as f64;
        let mut components = Vec::with_capacity(resp.len());
        let mut dropped = false;
        for r in resp {
            let (nk, mean, scatter) = weighted_moments(x, r);
            if !(nk >= min_count) {
                dropped = true;
                continue;
            }
            components.push(component_from_moments(nk / n, nk, mean, &scatter, eps)?);
        }
        if components.is_empty() {
            return Err(Error::Numerical("every mixture component collapsed".into()));
        }
        // renormalize after drops
        let total: f64 = components.iter().map(|c| c.weight).sum();
        let components = components
            .into_iter()
            .map(|c| {
                let w = c.weight / total;
                c.with_weight(w)
            })
            .collect();
        Ok((Mixture { components }, dropped))
    }

    /// Per-component log densities (weights included) as rows `k × n`.
    fn log_joint(&self, x: &DMatrix<f64>, eps: Option<f64>) -> DMatrix<f64> {
        let d = x.nrows();
        let n = x.ncols();
        let c0 = d as f64 * (2.0 * PI).ln();
        let mut out = DMatrix::zeros(self.components.len(), n);
        for (k, c) in self.components.iter().enumerate() {
            let mut centered = x.clone();
            for mut col in centered.column_iter_mut() {
                col -= &c.mean;
            }
            let l = c.chol.l_dirty();
            let y = l
                .solve_lower_triangular(&centered)
                .expect("Cholesky factor has a positive diagonal");
            let penalty = match eps {
                Some(e) => {
                    let inv = c.chol.inverse();
                    0.5 * e * inv.trace()
                }
                None => 0.0,
            };
            let base = c.weight.ln() - 0.5 * (c0 + c.log_det);
            for j in 0..n {
                let q: f64 = y.column(j).norm_squared();
                out[(k, j)] = base - 0.5 * q - penalty;
            }
        }
        out
    }

    /// Returns (Σ log-sum-exp, responsibilities).
    fn e_step(&self, x: &DMatrix<f64>, eps: Option<f64>) -> (f64, Vec<Vec<f64>>) {
        let lj = self.log_joint(x, eps);
        let (k, n) = lj.shape();
        let mut total = 0.0;
        let mut resp = vec![vec![0.0; n]; k];
        for j in 0..n {
            let col = lj.column(j);
            let max = col.max();
            let s: f64 = col.iter().map(|v| (v - max).exp()).sum();
            let lse = max + s.ln();
            total += lse;
            for (i, r) in resp.iter_mut().enumerate() {
                r[j] = (col[i] - lse).exp();
            }
        }
        (total, resp)
    }

    fn log_likelihood(&self, x: &DMatrix<f64>) -> f64 {
        self.e_step(x, None).0
    }
}

/// k-means++ seeding; returns hard assignments of every column to the
/// nearest chosen center. May return fewer than `k` groups when the data has
/// fewer distinct points.
#[allow(clippy::needless_range_loop)]
fn kmeans_pp_assign(x: &DMatrix<f64>, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = x.ncols();
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|j| (x.column(j) - x.column(centers[0])).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (j, &dj) in dist.iter().enumerate() {
            if dj <= 0.0 {
                continue;
            }
            if target < dj {
                pick = j;
                break;
            }
            target -= dj;
        }
        centers.push(pick);
        for (j, dj) in dist.iter_mut().enumerate() {
            let nd = (x.column(j) - x.column(pick)).norm_squared();
            if nd < *dj {
                *dj = nd;
            }
        }
    }
    let mut resp = vec![vec![0.0; n]; centers.len()];
    for j in 0..n {
        let mut best = (0, f64::INFINITY);
        for (c, &ci) in centers.iter().enumerate() {
            let dd = (x.column(j) - x.column(ci)).norm_squared();
            if dd < best.1 {
                best = (c, dd);
            }
        }
        resp[best.0][j] = 1.0;
    }
    resp
}

fn run_em(
    x: &DMatrix<f64>,
    k: usize,
    eps: f64,
    seed: u64,
) -> Result<(Mixture, EmTrace)> {
    let d = x.nrows();
    let min_count = (d + 1) as f64;
    let mut rng = linalg::rng(seed);
    let init = kmeans_pp_assign(x, k, &mut rng);
    let (mut mix, mut dropped) = Mixture::from_responsibilities(x, &init, eps, min_count.min(x.ncols() as f64))?;
    let mut trace = EmTrace {
        components: mix.components.len(),
        objective: Vec::new(),
        drops: Vec::new(),
        iterations: 0,
        converged: false,
    };
    let n = x.ncols() as f64;
    let mut prev: Option<f64> = None;
    for it in 0..EM_MAX_ITER {
        let (obj, resp) = mix.e_step(x, Some(eps));
        trace.objective.push(obj);
        if dropped {
            trace.drops.push(it);
        }
        trace.iterations = it + 1;
        if let Some(p) = prev {
            if !dropped && ((obj - p) / n).abs() < EM_TOL {
                trace.converged = true;
                break;
            }
        }
        prev = Some(obj);
        let (next, d) = Mixture::from_responsibilities(x, &resp, eps, min_count.min(n))?;
        mix = next;
        dropped = d;
    }
    trace.components = mix.components.len();
    Ok((mix, trace))
}

fn bic(ll: f64, k: usize, d: usize, n: usize) -> f64 {
    let params = k * (d + d * (d + 1) / 2) + k - 1;
    -2.0 * ll + params as f64 * (n as f64).ln()
}

/// Fits a multi-key signature and returns every EM candidate alongside it.
pub fn fit_multikey_detailed(
    task: usize,
    embeddings: &[DVector<f64>],
    max_components: usize,
    ridge: Ridge,
    seed: u64,
    strategy: Strategy,
) -> Result<MultiKeyFit> {
    if max_components < 1 {
        return Err(Error::Config("max_components must be >= 1".into()));
    }
    let d = check_cloud(embeddings)?;
    let x = to_columns(embeddings);
    let n = x.ncols();
    let eps = ridge_for(&x, ridge);

    let first = &embeddings[0];
    if embeddings.iter().all(|h| h == first) {
        let cov = DMatrix::identity(d, d) * eps;
        let c = GaussianComponent::new(1.0, first.clone(), cov)?;
        return Ok(MultiKeyFit {
            signature: MultiKeySignature::new(task, vec![c])?,
            candidates: Vec::new(),
            ridge: eps,
        });
    }

    let counts: Vec<usize> = match strategy {
        Strategy::EmBic => (1..=max_components.min(n)).collect(),
        Strategy::Fixed(k) => vec![k.clamp(1, max_components.min(n))],
    };
    let mut candidates = Vec::with_capacity(counts.len());
    let mut best: Option<(f64, Mixture)> = None;
    for k in counts {
        let (mix, trace) = run_em(&x, k, eps, linalg::derive_seed(seed, k as u64))?;
        let fitted = mix.components.len();
        let ll = mix.log_likelihood(&x);
        let score = bic(ll, fitted, d, n);
        candidates.push(Candidate {
            requested: k,
            fitted,
            log_likelihood: ll,
            bic: score,
            trace,
        });
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, mix));
        }
    }
    let (_, mix) = best.expect("at least one candidate");
    Ok(MultiKeyFit {
        signature: MultiKeySignature::new(task, mix.components)?,
        candidates,
        ridge: eps,
    })
}

pub fn fit_multikey(
    task: usize,
    embeddings: &[DVector<f64>],
    max_components: usize,
    ridge: Ridge,
    seed: u64,
    strategy: Strategy,
) -> Result<MultiKeySignature> {
    fit_multikey_detailed(task, embeddings, max_components, ridge, seed, strategy).map(|f| f.signature)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn closed_form_moments() {
        let pts = vec![v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[-1.0, 0.0]), v(&[0.0, -1.0])];
        let c = fit_gaussian(&pts, Ridge::Absolute(0.0)).unwrap();
        assert!(c.mean().norm() < 1e-15);
        let expected = DMatrix::from_diagonal(&v(&[0.5, 0.5]));
        assert!((c.cov() - expected).amax() < 1e-10 + RIDGE_FLOOR);
        assert_eq!(c.weight(), 1.0);
    }

    #[test]
    fn degenerate_cloud_gets_ridge() {
        let pts = vec![v(&[2.0, -1.0]); 5];
        let c = fit_gaussian(&pts, Ridge::Absolute(1e-6)).unwrap();
        assert_eq!(c.mean(), &v(&[2.0, -1.0]));
        assert!((c.cov() - DMatrix::identity(2, 2) * 1e-6).amax() < 1e-18);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            fit_gaussian(&[v(&[1.0])], Ridge::default()),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            fit_multikey(0, &[v(&[1.0, 2.0])], 3, Ridge::default(), 1, Strategy::EmBic),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn score_examples() {
        let c = GaussianComponent::new(1.0, v(&[0.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(signature_score(&v(&[0.0, 0.0]), &c).unwrap(), 0.0);
        assert!((signature_score(&v(&[1.0, 0.0]), &c).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(signature_score(&v(&[1.0]), &c), Err(Error::Shape(_))));
    }

    #[test]
    fn log_volume_examples() {
        let id = GaussianComponent::new(1.0, v(&[0.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(log_volume(&id), 0.0);
        let e = std::f64::consts::E;
        let c = GaussianComponent::new(1.0, v(&[0.0, 0.0]), DMatrix::from_diagonal(&v(&[e, e]))).unwrap();
        assert!((log_volume(&c) - 2.0).abs() < 1e-14);
        let c = GaussianComponent::new(1.0, v(&[0.0; 3]), DMatrix::identity(3, 3) * 2.0).unwrap();
        assert!((log_volume(&c) - 3.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cached_log_det_matches_factor() {
        let cov = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let c = GaussianComponent::new(1.0, v(&[0.0; 3]), cov).unwrap();
        let l = c.cholesky_factor();
        let direct: f64 = 2.0 * (0..3).map(|i| l[(i, i)].ln()).sum::<f64>();
        assert!((c.log_volume() - direct).abs() < 1e-10);
    }

    #[test]
    fn rejects_non_spd_and_asymmetric() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianComponent::new(1.0, v(&[0.0, 0.0]), bad),
            Err(Error::NotSpd(_))
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(
            GaussianComponent::new(1.0, v(&[0.0, 0.0]), asym),
            Err(Error::NotSpd(_))
        ));
    }

    #[test]
    fn identical_embeddings_single_component() {
        let pts = vec![v(&[1.0, 1.0, 1.0]); 10];
        let sig = fit_multikey(3, &pts, 5, Ridge::default(), 0, Strategy::EmBic).unwrap();
        assert_eq!(sig.len(), 1);
        assert_eq!(sig.components()[0].cov()[(0, 0)], RIDGE_FLOOR);
    }

    #[test]
    fn zero_max_components_is_config_error() {
        let pts = vec![v(&[1.0]), v(&[2.0])];
        assert!(matches!(
            fit_multikey(0, &pts, 0, Ridge::default(), 0, Strategy::EmBic),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn weights_must_sum_to_one() {
        let c = GaussianComponent::new(0.5, v(&[0.0]), DMatrix::identity(1, 1)).unwrap();
        assert!(MultiKeySignature::new(0, vec![c]).is_err());
    }
}
