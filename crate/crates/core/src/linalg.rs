//! Small dense linear-algebra and RNG helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer; used to derive independent sub-seeds from a base seed.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    // column-major fill order is part of the determinism contract
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

pub fn normal_vector(rng: &mut Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "{what}: expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what}: non-finite entry")));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotSpd(what.to_string()))
}

/// log-determinant from a Cholesky factor: 2 Σ log L_ii.
pub fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Mahalanobis quadratic form (x)ᵀ Λ⁻¹ (x) given the Cholesky factor of Λ,
/// via one forward triangular solve: ‖L⁻¹x‖².
pub fn chol_quad_form(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>) -> f64 {
    let l = chol.l_dirty();
    let n = x.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = x[i];
        for (k, yk) in y.iter().enumerate().take(i) {
            s -= l[(i, k)] * yk;
        }
        y[i] = s / l[(i, i)];
    }
    y.iter().map(|v| v * v).sum()
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Orthonormal basis for the span of the columns of `cols` by modified
/// Gram-Schmidt with re-orthogonalization. Columns whose residual norm falls
/// below `tol` relative to their original norm are skipped.
pub fn orthonormal_basis(cols: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = cols.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for j in 0..cols.ncols() {
        let original = cols.column(j).into_owned();
        let norm0 = original.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = original;
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > tol * norm0 && basis.len() < n {
            basis.push(v / norm);
        }
    }
    if basis.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&basis)
    }
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Malformed(format!("{what}: ragged matrix rows")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Malformed(format!("{what}: non-finite entry")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Like [`from_rows`] but keeps the declared column count for empty matrices.
pub fn from_rows_with_cols(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Malformed(format!(
            "{what}: expected {ncols} columns per row"
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Malformed(format!("{what}: non-finite entry")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}
