//! Per-gene analyses under a fitted sample covariance: variance fits,
//! confounder-corrected residuals, and association statistics.
//!
//! All per-gene work reuses one eigendecomposition `K̂ = Q Λ Qᵀ`, in which
//! `σ²_c K̂ + σ²_e 𝟙` is diagonal.

use faer::linalg::solvers::SolveLstsq;
use faer::{Mat, MatRef};

use crate::error::{Error, Result};
use crate::linalg::{self, SymEigen};
use crate::model::{numerical_rank, ExpressionMatrix, ModelFit, DEFAULT_TOLERANCE};

const LOG_RATIO_MIN: f64 = -12.0;
const LOG_RATIO_MAX: f64 = 12.0;
const LOG_RATIO_TOL: f64 = 1e-8;
const GRID_POINTS: usize = 49;

/// A fitted covariance `K̂` prepared for per-gene work.
#[derive(Debug, Clone)]
pub struct GeneModel {
    k: Mat<f64>,
    eigen: SymEigen,
    isotropic: bool,
}

impl GeneModel {
    /// `k` must be symmetric positive semi-definite.
    pub fn new(k: Mat<f64>) -> Result<Self> {
        if k.nrows() != k.ncols() || k.nrows() == 0 {
            return Err(Error::Shape(format!("K must be square, got {}x{}", k.nrows(), k.ncols())));
        }
        let scale = linalg::max_abs(k.as_ref()).max(f64::MIN_POSITIVE);
        let asym = linalg::max_abs_diff(k.as_ref(), k.transpose());
        if asym > 1e-10 * scale {
            return Err(Error::ConstraintViolation { what: "K must be symmetric", deviation: asym });
        }
        let mut eigen = linalg::sym_eigen_desc(k.as_ref())?;
        let top = eigen.values[0];
        let bottom = eigen.values[eigen.values.len() - 1];
        if bottom < -1e-8 * top.abs() {
            return Err(Error::NotPositiveDefinite { eigenvalue: bottom });
        }
        for v in eigen.values.iter_mut() {
            *v = v.max(0.0);
        }
        let isotropic = top - bottom <= DEFAULT_TOLERANCE * top.abs();
        Ok(Self { k, eigen, isotropic })
    }

    pub fn from_fit(fit: &ModelFit) -> Result<Self> {
        Self::new(fit.k().to_owned())
    }

    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    pub fn k(&self) -> MatRef<'_, f64> {
        self.k.as_ref()
    }

    /// Eigenvalues of `K̂`, nonincreasing.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigen.values
    }

    fn rotate(&self, y: &[f64]) -> Vec<f64> {
        let q = &self.eigen.vectors;
        (0..self.n()).map(|j| (0..self.n()).map(|i| q[(i, j)] * y[i]).sum()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneFitStatus {
    Regular,
    /// `K̂ ∝ 𝟙`: only `σ²_c + σ²_e` is identified; the `σ²_c = 0` boundary
    /// is returned.
    NonIdentifiable,
    /// All-zero profile: both variances are zero and the likelihood is
    /// unbounded.
    Degenerate,
}

/// Per-gene variance parameters of `y ~ N(0, σ²_c K̂ + σ²_e 𝟙)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneVarianceFit {
    pub sigma2_c: f64,
    pub sigma2_e: f64,
    /// Gaussian log-likelihood (natural log, including `2π`).
    pub loglik: f64,
    pub status: GeneFitStatus,
}

/// Maximizes the single-gene likelihood over `σ²_c, σ²_e ≥ 0`; the scale is
/// profiled out and the ratio `σ²_c/σ²_e` found by golden-section search on
/// its logarithm, bracketed by a coarse grid and compared with the
/// `σ²_c = 0` boundary.
pub fn fit_gene_variances(model: &GeneModel, y: &[f64]) -> Result<GeneVarianceFit> {
    let n = model.n();
    if y.len() != n {
        return Err(Error::Shape(format!("gene profile has {} entries, expected {n}", y.len())));
    }
    let r = model.rotate(y);
    let r2: Vec<f64> = r.iter().map(|v| v * v).collect();
    let total: f64 = r2.iter().sum();
    if total == 0.0 {
        return Ok(GeneVarianceFit {
            sigma2_c: 0.0,
            sigma2_e: 0.0,
            loglik: f64::INFINITY,
            status: GeneFitStatus::Degenerate,
        });
    }
    let lambda = model.eigenvalues();
    let profile = |delta: f64| -> (f64, f64) {
        let mut log_det = 0.0;
        let mut quad = 0.0;
        for (l, q) in lambda.iter().zip(&r2) {
            let w = delta * l + 1.0;
            log_det += w.ln();
            quad += q / w;
        }
        let scale = quad / n as f64;
        let nf = n as f64;
        let ll = -0.5 * (nf * (2.0 * std::f64::consts::PI).ln() + log_det + nf * scale.ln() + nf);
        (ll, scale)
    };

    let (ll0, s0) = profile(0.0);
    if model.isotropic {
        return Ok(GeneVarianceFit {
            sigma2_c: 0.0,
            sigma2_e: s0,
            loglik: ll0,
            status: GeneFitStatus::NonIdentifiable,
        });
    }

    let step = (LOG_RATIO_MAX - LOG_RATIO_MIN) / (GRID_POINTS - 1) as f64;
    let grid = |i: usize| LOG_RATIO_MIN + i as f64 * step;
    let best_i = (0..GRID_POINTS)
        .max_by(|&a, &b| profile(grid(a).exp()).0.total_cmp(&profile(grid(b).exp()).0))
        .unwrap_or(0);
    let lo = grid(best_i.saturating_sub(1));
    let hi = grid((best_i + 1).min(GRID_POINTS - 1));
    let t = golden_section_max(|t| profile(t.exp()).0, lo, hi, LOG_RATIO_TOL);
    let t = refine_stationary(|t| profile_slope(lambda, &r2, t.exp()), t, LOG_RATIO_TOL, hi - lo);
    let delta = t.exp();
    let (ll, scale) = profile(delta);
    if ll0 >= ll {
        return Ok(GeneVarianceFit {
            sigma2_c: 0.0,
            sigma2_e: s0,
            loglik: ll0,
            status: GeneFitStatus::Regular,
        });
    }
    Ok(GeneVarianceFit {
        sigma2_c: delta * scale,
        sigma2_e: scale,
        loglik: ll,
        status: GeneFitStatus::Regular,
    })
}

/// Derivative of the profile log-likelihood with respect to `log δ`.
fn profile_slope(lambda: &[f64], r2: &[f64], delta: f64) -> f64 {
    let (mut trace, mut quad, mut quad_l) = (0.0, 0.0, 0.0);
    for (l, q) in lambda.iter().zip(r2) {
        let w = delta * l + 1.0;
        trace += l / w;
        quad += q / w;
        quad_l += q * l / (w * w);
    }
    -0.5 * delta * (trace - lambda.len() as f64 * quad_l / quad)
}

/// Bisects on the sign of `slope` around `t` when it brackets a maximum, so
/// the result is set by the stationarity condition rather than by value
/// comparisons near a flat optimum.
fn refine_stationary<F: Fn(f64) -> f64>(slope: F, t: f64, tol: f64, max_width: f64) -> f64 {
    let mut width = tol;
    let (mut a, mut b) = loop {
        let (a, b) = (t - width, t + width);
        if slope(a) > 0.0 && slope(b) < 0.0 {
            break (a, b);
        }
        if width > max_width {
            return t;
        }
        width *= 4.0;
    };
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if slope(mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

fn golden_section_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// `ŷᵢ = K̂ (σ²_{c,i} K̂ + σ²_{e,i} 𝟙)⁻¹ yᵢ` for every gene, followed by
/// re-centering of the samples.
pub fn correct_residuals(
    model: &GeneModel,
    y: &ExpressionMatrix,
    gene_fits: &[GeneVarianceFit],
) -> Result<ExpressionMatrix> {
    let (n, m) = (y.n_samples(), y.n_genes());
    if n != model.n() {
        return Err(Error::Shape(format!(
            "expression has {n} samples, fitted covariance has {}",
            model.n()
        )));
    }
    if gene_fits.len() != m {
        return Err(Error::Shape(format!("{} gene fits for {m} genes", gene_fits.len())));
    }
    for (g, fit) in gene_fits.iter().enumerate() {
        if fit.sigma2_c == 0.0 && fit.sigma2_e == 0.0 {
            return Err(Error::DegenerateGene { gene: y.gene_ids()[g].clone() });
        }
    }
    let q = &model.eigen.vectors;
    let lambda = model.eigenvalues();
    let values = y.values();
    let mut rotated = q.transpose() * values;
    for (g, fit) in gene_fits.iter().enumerate() {
        for i in 0..n {
            rotated[(i, g)] *= lambda[i] / (fit.sigma2_c * lambda[i] + fit.sigma2_e);
        }
    }
    let mut out = q * &rotated;
    for (g, fit) in gene_fits.iter().enumerate() {
        if fit.sigma2_e == 0.0 {
            for i in 0..n {
                out[(i, g)] = values[(i, g)] / fit.sigma2_c;
            }
        } else if fit.sigma2_c == 0.0 {
            let ky = model.k() * values.col(g);
            for i in 0..n {
                out[(i, g)] = ky[i] / fit.sigma2_e;
            }
        }
    }
    let means: Vec<f64> = (0..n)
        .map(|i| (0..m).map(|g| out[(i, g)]).sum::<f64>() / m as f64)
        .collect();
    for g in 0..m {
        for i in 0..n {
            out[(i, g)] -= means[i];
        }
    }
    Ok(ExpressionMatrix::from_centered_parts(
        out,
        y.sample_ids().to_vec(),
        y.gene_ids().to_vec(),
        means,
    ))
}

/// Log-likelihood ratio (natural log) of `y ~ N(θ s, Σ)` against
/// `y ~ N(0, Σ)` with `Σ = σ²_c K̂ + σ²_e 𝟙` and `θ` the generalized
/// least-squares estimate: `½ (sᵀΣ⁻¹y)² / (sᵀΣ⁻¹s)`.
pub fn lod_score(
    model: &GeneModel,
    y: &[f64],
    s: &[f64],
    gene_fit: &GeneVarianceFit,
) -> Result<f64> {
    let n = model.n();
    if y.len() != n || s.len() != n {
        return Err(Error::Shape(format!(
            "profile lengths {} and {}, expected {n}",
            y.len(),
            s.len()
        )));
    }
    if gene_fit.sigma2_c == 0.0 && gene_fit.sigma2_e == 0.0 {
        return Err(Error::NotPositiveDefinite { eigenvalue: 0.0 });
    }
    let ry = model.rotate(y);
    let rs = model.rotate(s);
    let lambda = model.eigenvalues();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut max_w = 0.0f64;
    for i in 0..n {
        let v = gene_fit.sigma2_c * lambda[i] + gene_fit.sigma2_e;
        if !(v > 0.0) {
            continue;
        }
        let w = 1.0 / v;
        max_w = max_w.max(w);
        num += w * rs[i] * ry[i];
        den += w * rs[i] * rs[i];
    }
    let s_norm2: f64 = s.iter().map(|v| v * v).sum();
    if !(s_norm2 > 0.0) || !(den > 1e-14 * max_w * s_norm2) {
        return Err(Error::DegenerateCovariate);
    }
    Ok(0.5 * num * num / den)
}

/// Ordinary least-squares effect of a predictor adjusted for known and
/// latent covariates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Association {
    pub beta: f64,
    pub std_error: f64,
    pub t_statistic: f64,
}

/// Regresses `y` on `[s, Z, X]` and reports the coefficient of `s`.
pub fn linear_association(
    y: &[f64],
    s: &[f64],
    known: MatRef<'_, f64>,
    latent: MatRef<'_, f64>,
) -> Result<Association> {
    let n = y.len();
    let (d, p) = (known.ncols(), latent.ncols());
    if s.len() != n || known.nrows() != n || latent.nrows() != n {
        return Err(Error::Shape("association inputs have inconsistent sample counts".into()));
    }
    let k = 1 + d + p;
    if n <= k {
        return Err(Error::LatentDimension { p: k, dim: n });
    }
    let g = Mat::from_fn(n, k, |i, j| match j {
        0 => s[i],
        j if j <= d => known[(i, j - 1)],
        j => latent[(i, j - 1 - d)],
    });
    let sv = g
        .singular_values()
        .map_err(|e| Error::Numerical(format!("SVD of design failed: {e:?}")))?;
    let rank = numerical_rank(&sv, DEFAULT_TOLERANCE);
    if rank < k {
        return Err(Error::RankDeficient { requested: k, achievable: rank });
    }
    let rhs = Mat::from_fn(n, 1, |i, _| y[i]);
    let coef = g.qr().solve_lstsq(&rhs);
    let fitted = &g * &coef;
    let rss: f64 = (0..n).map(|i| (y[i] - fitted[(i, 0)]).powi(2)).sum();
    let sigma2 = rss / (n - k) as f64;
    // (GᵀG)⁻¹₀₀ from the orthogonal complement of s against the other columns
    let others = Mat::from_fn(n, k - 1, |i, j| g[(i, j + 1)]);
    let s_col = Mat::from_fn(n, 1, |i, _| s[i]);
    let resid = if k > 1 {
        let proj = others.qr().solve_lstsq(&s_col);
        &s_col - &others * &proj
    } else {
        s_col
    };
    let s_resid2 = resid.col(0).squared_norm_l2();
    let beta = coef[(0, 0)];
    let std_error = (sigma2 / s_resid2).sqrt();
    Ok(Association { beta, std_error, t_statistic: beta / std_error })
}
