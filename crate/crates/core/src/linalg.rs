//! Thin helpers over `faer` shared by the solver modules.

use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted nonincreasing.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Mat<f64>,
}

/// Eigendecomposition of a symmetric matrix, largest eigenvalue first.
///
/// Only the lower triangle of `a` is read.
pub fn sym_eigen_desc(a: MatRef<'_, f64>) -> Result<SymEigen> {
    let n = a.nrows();
    if n == 0 {
        return Ok(SymEigen { values: Vec::new(), vectors: Mat::zeros(0, 0) });
    }
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("symmetric eigendecomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    // faer returns ascending order
    let values = (0..n).map(|k| s[n - 1 - k]).collect();
    let vectors = Mat::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
    Ok(SymEigen { values, vectors })
}

/// Eigenvalues of a symmetric matrix, largest first.
pub fn sym_eigenvalues_desc(a: MatRef<'_, f64>) -> Result<Vec<f64>> {
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    let mut v = a
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Numerical(format!("symmetric eigenvalue computation failed: {e:?}")))?;
    v.reverse();
    Ok(v)
}

/// Flips column signs so that the largest-magnitude entry of every column is
/// positive (first such entry on exact ties). Returns the applied signs.
pub fn normalize_column_signs(m: &mut Mat<f64>) -> Vec<f64> {
    let mut signs = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..m.nrows() {
            let v = m[(i, j)];
            if v.abs() > best {
                best = v.abs();
                sign = if v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        if sign < 0.0 {
            for i in 0..m.nrows() {
                m[(i, j)] = -m[(i, j)];
            }
        }
        signs.push(sign);
    }
    signs
}

pub fn trace(a: MatRef<'_, f64>) -> f64 {
    (0..a.nrows().min(a.ncols())).map(|i| a[(i, i)]).sum()
}

/// Copies the lower triangle onto the upper one.
pub fn symmetrize_from_lower(a: &mut Mat<f64>) {
    for j in 0..a.ncols() {
        for i in 0..j {
            a[(i, j)] = a[(j, i)];
        }
    }
}

pub fn max_abs(a: MatRef<'_, f64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max(a[(i, j)].abs());
        }
    }
    m
}

pub fn diag(values: &[f64]) -> Mat<f64> {
    let n = values.len();
    Mat::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
}

/// ‖XᵀX − 𝟙‖∞ (max-entry norm).
pub fn orthonormality_defect(x: MatRef<'_, f64>) -> f64 {
    let g = x.transpose() * x;
    let mut m = 0.0f64;
    for j in 0..g.ncols() {
        for i in 0..g.nrows() {
            let target = if i == j { 1.0 } else { 0.0 };
            m = m.max((g[(i, j)] - target).abs());
        }
    }
    m
}

/// Relative Frobenius distance ‖a − b‖_F / max(‖b‖_F, tiny).
pub fn relative_frobenius(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    let diff = a - b;
    let denom = b.norm_l2().max(f64::MIN_POSITIVE);
    diff.norm_l2() / denom
}

pub fn max_abs_diff(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    m
}
