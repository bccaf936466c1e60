//! Seeded synthetic data drawn from the random-effect model.

use faer::{Mat, MatRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::model::{default_labels, ExpressionMatrix, SampleCovariance};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random `n × k` matrix with orthonormal columns.
pub fn random_orthonormal<R: Rng>(n: usize, k: usize, rng: &mut R) -> Mat<f64> {
    if k == 0 {
        return Mat::zeros(n, 0);
    }
    gaussian_matrix(n, k, rng).qr().compute_thin_Q()
}

/// `Q diag(values) Qᵀ` with a random orthogonal `Q`.
pub fn covariance_with_spectrum<R: Rng>(values: &[f64], rng: &mut R) -> Result<SampleCovariance> {
    let q = random_orthonormal(values.len(), values.len(), rng);
    spectral_covariance(values, q.as_ref())
}

/// `Q diag(values) Qᵀ` for a given orthogonal `Q`.
pub fn spectral_covariance(values: &[f64], q: MatRef<'_, f64>) -> Result<SampleCovariance> {
    let scaled = Mat::from_fn(q.nrows(), values.len(), |i, j| q[(i, j)] * values[j]);
    SampleCovariance::from_matrix(&scaled * q.transpose())
}

/// Covariance with a random spectrum: a few spikes above a noise floor.
pub fn random_covariance<R: Rng>(n: usize, rng: &mut R) -> Result<SampleCovariance> {
    let spikes = rng.random_range(1..=n.div_ceil(2));
    let mut values: Vec<f64> = (0..n)
        .map(|i| if i < spikes { 1.0 + 9.0 * rng.random::<f64>() } else { 0.2 + 0.8 * rng.random::<f64>() })
        .collect();
    values.sort_by(|a, b| b.total_cmp(a));
    covariance_with_spectrum(&values, rng)
}

/// Sample-centered expression from `Y = Z V + X W + E`, together with the
/// generating covariates and factors.
#[derive(Debug, Clone)]
pub struct Planted {
    pub y: ExpressionMatrix,
    pub known: Mat<f64>,
    pub latent: Mat<f64>,
}

/// Draws `m` genes for `n` samples with `d` known and `p` latent effects.
/// Effect scales decrease geometrically from `top_scale`; noise has unit
/// variance.
pub fn planted_expression<R: Rng>(
    n: usize,
    m: usize,
    d: usize,
    p: usize,
    top_scale: f64,
    rng: &mut R,
) -> Planted {
    let known = gaussian_matrix(n, d, rng);
    let latent = gaussian_matrix(n, p, rng);
    let mut y = gaussian_matrix(n, m, rng);
    for k in 0..d + p {
        let scale = top_scale * 0.8f64.powi(k as i32) / (n as f64).sqrt();
        let col = |i: usize| if k < d { known[(i, k)] } else { latent[(i, k - d)] };
        for g in 0..m {
            let w: f64 = StandardNormal.sample(rng);
            for i in 0..n {
                y[(i, g)] += scale * w * col(i);
            }
        }
    }
    for i in 0..n {
        let mean = (0..m).map(|g| y[(i, g)]).sum::<f64>() / m as f64;
        for g in 0..m {
            y[(i, g)] -= mean;
        }
    }
    let y = ExpressionMatrix::assume_centered(y, default_labels("s", n), default_labels("g", m))
        .expect("labels match dimensions");
    Planted { y, known, latent }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;

    #[test]
    fn orthonormal_columns() {
        let q = random_orthonormal(7, 3, &mut rng(1));
        assert!(linalg::orthonormality_defect(q.as_ref()) < 1e-14);
    }

    #[test]
    fn spectrum_is_reproduced() {
        let c = covariance_with_spectrum(&[4.0, 2.0, 1.0], &mut rng(2)).unwrap();
        let ev = linalg::sym_eigenvalues_desc(c.matrix()).unwrap();
        for (a, b) in ev.iter().zip([4.0, 2.0, 1.0]) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn planted_data_is_centered_and_seeded() {
        let a = planted_expression(6, 50, 1, 2, 3.0, &mut rng(3));
        let b = planted_expression(6, 50, 1, 2, 3.0, &mut rng(3));
        assert!(a.y.max_abs_sample_mean() < 1e-14);
        assert_eq!(linalg::max_abs_diff(a.y.values(), b.y.values()), 0.0);
    }
}
