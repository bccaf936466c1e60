//! Domain types of the random-effect model and the log-likelihood objective.
//!
//! The model describes every gene's expression profile `yᵢ ∈ ℝⁿ` as
//! `yᵢ = Z vᵢ + X wᵢ + εᵢ` with jointly Gaussian effects, which integrates
//! out to a shared sample covariance
//!
//! ```text
//! K = Z B Zᵀ + Z D Xᵀ + X Dᵀ Zᵀ + X A Xᵀ + σ² 𝟙
//! ```
//!
//! and the objective `−log det K − tr(K⁻¹ C)` with `C = Y Yᵀ / m`.

use faer::{Mat, MatRef};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative eigenvalue floor below which a covariance is treated as singular.
pub const PD_TOLERANCE: f64 = 1e-12;

/// Default relative tolerance for rank and eigenvalue-tie decisions.
pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// Samples × genes data matrix.
#[derive(Debug, Clone)]
pub struct ExpressionMatrix {
    values: Mat<f64>,
    sample_ids: Vec<String>,
    gene_ids: Vec<String>,
    centered: bool,
    sample_means: Option<Vec<f64>>,
}

impl ExpressionMatrix {
    /// Wraps raw (uncentered) values.
    pub fn new(values: Mat<f64>, sample_ids: Vec<String>, gene_ids: Vec<String>) -> Result<Self> {
        if sample_ids.len() != values.nrows() || gene_ids.len() != values.ncols() {
            return Err(Error::Shape(format!(
                "{}x{} expression values with {} sample and {} gene labels",
                values.nrows(),
                values.ncols(),
                sample_ids.len(),
                gene_ids.len()
            )));
        }
        Ok(Self { values, sample_ids, gene_ids, centered: false, sample_means: None })
    }

    /// Wraps values that the caller guarantees to be sample-centered already
    /// (e.g. centered upstream). No check is performed.
    pub fn assume_centered(
        values: Mat<f64>,
        sample_ids: Vec<String>,
        gene_ids: Vec<String>,
    ) -> Result<Self> {
        let mut y = Self::new(values, sample_ids, gene_ids)?;
        y.centered = true;
        Ok(y)
    }

    /// Uses generated labels `s1..sn` and `g1..gm`.
    pub fn unlabeled(values: Mat<f64>) -> Self {
        let sample_ids = default_labels("s", values.nrows());
        let gene_ids = default_labels("g", values.ncols());
        Self { values, sample_ids, gene_ids, centered: false, sample_means: None }
    }

    pub(crate) fn from_centered_parts(
        values: Mat<f64>,
        sample_ids: Vec<String>,
        gene_ids: Vec<String>,
        sample_means: Vec<f64>,
    ) -> Self {
        Self { values, sample_ids, gene_ids, centered: true, sample_means: Some(sample_means) }
    }

    pub fn values(&self) -> MatRef<'_, f64> {
        self.values.as_ref()
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.values.ncols()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// Per-sample means removed by centering, when known.
    pub fn sample_means(&self) -> Option<&[f64]> {
        self.sample_means.as_deref()
    }

    /// Largest absolute per-sample mean across genes.
    pub fn max_abs_sample_mean(&self) -> f64 {
        let m = self.n_genes().max(1) as f64;
        (0..self.n_samples())
            .map(|i| ((0..self.n_genes()).map(|j| self.values[(i, j)]).sum::<f64>() / m).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn default_labels(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}{i}")).collect()
}

/// The `n × n` sample covariance `C = Y Yᵀ / m`.
#[derive(Debug, Clone)]
pub struct SampleCovariance {
    c: Mat<f64>,
    trace: f64,
}

impl SampleCovariance {
    /// Accepts a precomputed covariance. It must be square and symmetric to
    /// `1e-12` relative; the lower triangle is mirrored to make it exact.
    pub fn from_matrix(mut c: Mat<f64>) -> Result<Self> {
        if c.nrows() != c.ncols() {
            return Err(Error::Shape(format!(
                "covariance must be square, got {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        let scale = linalg::max_abs(c.as_ref()).max(f64::MIN_POSITIVE);
        let asym = linalg::max_abs_diff(c.as_ref(), c.transpose());
        if asym > 1e-12 * scale {
            return Err(Error::ConstraintViolation { what: "covariance symmetry", deviation: asym });
        }
        linalg::symmetrize_from_lower(&mut c);
        let trace = linalg::trace(c.as_ref());
        Ok(Self { c, trace })
    }

    pub fn matrix(&self) -> MatRef<'_, f64> {
        self.c.as_ref()
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    /// Blocks `Cᵢⱼ = UᵢᵀCUⱼ` in the basis adapted to the known covariates.
    pub fn blocks(&self, basis: &CovariateBasis) -> Result<CovarianceBlocks> {
        if basis.n() != self.n() {
            return Err(Error::Shape(format!(
                "covariate basis has {} samples, covariance has {}",
                basis.n(),
                self.n()
            )));
        }
        if basis.d() == 0 {
            return Ok(CovarianceBlocks {
                c11: Mat::zeros(0, 0),
                c12: Mat::zeros(0, self.n()),
                c22: self.c.clone(),
            });
        }
        let u1 = basis.u1();
        let u2 = basis.u2();
        let cu1 = &self.c * u1;
        let cu2 = &self.c * u2;
        let mut c11 = u1.transpose() * &cu1;
        let c12 = u1.transpose() * &cu2;
        let mut c22 = u2.transpose() * &cu2;
        linalg::symmetrize_from_lower(&mut c11);
        linalg::symmetrize_from_lower(&mut c22);
        Ok(CovarianceBlocks { c11, c12, c22 })
    }
}

/// Block decomposition of `C` relative to a covariate basis.
#[derive(Debug, Clone)]
pub struct CovarianceBlocks {
    pub c11: Mat<f64>,
    pub c12: Mat<f64>,
    pub c22: Mat<f64>,
}

/// Computes `C = Y Yᵀ / m` from sample-centered data.
pub fn sample_covariance(y: &ExpressionMatrix) -> Result<SampleCovariance> {
    if !y.is_centered() {
        return Err(Error::CenteringRequired);
    }
    let (n, m) = (y.n_samples(), y.n_genes());
    if n < 2 || m < 1 {
        return Err(Error::Shape(format!("need at least 2 samples and 1 gene, got {n}x{m}")));
    }
    let v = y.values();
    let mut c = v * v.transpose() * faer::Scale(1.0 / m as f64);
    linalg::symmetrize_from_lower(&mut c);
    let trace = linalg::trace(c.as_ref());
    Ok(SampleCovariance { c, trace })
}

/// Known covariates `Z` together with the thin SVD `Z = U₁ Γ₁ Vᵀ` and an
/// orthonormal basis `U₂` of the orthogonal complement of their span.
#[derive(Debug, Clone)]
pub struct CovariateBasis {
    z: Mat<f64>,
    u1: Mat<f64>,
    u2: Mat<f64>,
    gamma: Vec<f64>,
    right: Mat<f64>,
}

impl CovariateBasis {
    /// Builds the basis; `z` must have full column rank (smallest singular
    /// value above `1e-10` times the largest).
    pub fn new(z: Mat<f64>) -> Result<Self> {
        let (n, d) = (z.nrows(), z.ncols());
        if d == 0 {
            return Ok(Self::empty(n));
        }
        if d > n {
            return Err(Error::RankDeficient { requested: d, achievable: n });
        }
        if !z.as_ref().is_all_finite() {
            return Err(Error::Shape("covariates contain non-finite values".into()));
        }
        let svd = z
            .thin_svd()
            .map_err(|e| Error::Numerical(format!("SVD of covariates failed: {e:?}")))?;
        let gamma: Vec<f64> = svd.S().column_vector().iter().copied().collect();
        let rank = numerical_rank(&gamma, DEFAULT_TOLERANCE);
        if rank < d {
            return Err(Error::RankDeficient { requested: d, achievable: rank });
        }
        let u1 = svd.U().to_owned();
        let right = svd.V().to_owned();
        let q = u1.qr().compute_Q();
        let u2 = q.subcols(d, n - d).to_owned();
        Ok(Self { z, u1, u2, gamma, right })
    }

    /// Basis without known covariates: `U₂ = 𝟙ₙ`.
    pub fn empty(n: usize) -> Self {
        Self {
            z: Mat::zeros(n, 0),
            u1: Mat::zeros(n, 0),
            u2: Mat::identity(n, n),
            gamma: Vec::new(),
            right: Mat::zeros(0, 0),
        }
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn d(&self) -> usize {
        self.z.ncols()
    }

    pub fn z(&self) -> MatRef<'_, f64> {
        self.z.as_ref()
    }

    pub fn u1(&self) -> MatRef<'_, f64> {
        self.u1.as_ref()
    }

    pub fn u2(&self) -> MatRef<'_, f64> {
        self.u2.as_ref()
    }

    /// Singular values of `Z`, nonincreasing.
    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    /// Right singular vectors `V` of `Z`.
    pub fn right_factors(&self) -> MatRef<'_, f64> {
        self.right.as_ref()
    }

    /// `V Γ₁⁻¹ M Γ₁⁻¹ Vᵀ` for a `d × d` matrix `M` (maps sample-space blocks
    /// back to covariate coordinates on both sides).
    pub(crate) fn pull_back_both(&self, m: MatRef<'_, f64>) -> Mat<f64> {
        let left = self.pull_back_left(m);
        let scaled = Mat::from_fn(left.nrows(), left.ncols(), |i, j| left[(i, j)] / self.gamma[j]);
        let mut out = scaled * self.right.transpose();
        linalg::symmetrize_from_lower(&mut out);
        out
    }

    /// `V Γ₁⁻¹ M` for a `d × k` matrix `M`.
    pub(crate) fn pull_back_left(&self, m: MatRef<'_, f64>) -> Mat<f64> {
        let scaled = Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / self.gamma[i]);
        &self.right * scaled
    }
}

pub(crate) fn numerical_rank(singular_values: &[f64], tol: f64) -> usize {
    match singular_values.first() {
        None => 0,
        Some(&top) if top <= 0.0 => 0,
        Some(&top) => singular_values.iter().filter(|&&s| s > tol * top).count(),
    }
}

/// Covariance parameters `(B, A, D, σ²)` of the joint effect distribution.
#[derive(Debug, Clone)]
pub struct CovarianceParams {
    known_cov: Mat<f64>,
    latent_var: Vec<f64>,
    cross_cov: Mat<f64>,
    sigma2: f64,
}

impl CovarianceParams {
    /// `known_cov` is `B` (`d × d`), `latent_var` the diagonal of `A`,
    /// `cross_cov` is `D` (`d × p`).
    pub fn new(
        known_cov: Mat<f64>,
        latent_var: Vec<f64>,
        cross_cov: Mat<f64>,
        sigma2: f64,
    ) -> Result<Self> {
        let d = known_cov.nrows();
        let p = latent_var.len();
        if known_cov.ncols() != d || cross_cov.nrows() != d || cross_cov.ncols() != p {
            return Err(Error::Shape(format!(
                "B is {}x{}, D is {}x{}, A has {} entries",
                known_cov.nrows(),
                known_cov.ncols(),
                cross_cov.nrows(),
                cross_cov.ncols(),
                p
            )));
        }
        if !(sigma2 >= 0.0) || latent_var.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::ConstraintViolation {
                what: "variances must be nonnegative",
                deviation: latent_var.iter().copied().fold(sigma2, f64::min),
            });
        }
        Ok(Self { known_cov, latent_var, cross_cov, sigma2 })
    }

    /// Noise-only parameters.
    pub fn noise_only(sigma2: f64) -> Result<Self> {
        Self::new(Mat::zeros(0, 0), Vec::new(), Mat::zeros(0, 0), sigma2)
    }

    pub fn known_cov(&self) -> MatRef<'_, f64> {
        self.known_cov.as_ref()
    }

    pub fn latent_var(&self) -> &[f64] {
        &self.latent_var
    }

    pub fn cross_cov(&self) -> MatRef<'_, f64> {
        self.cross_cov.as_ref()
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn d(&self) -> usize {
        self.known_cov.nrows()
    }

    pub fn p(&self) -> usize {
        self.latent_var.len()
    }

    /// The stacked effect covariance `[[B, D], [Dᵀ, A]]`.
    pub fn stacked(&self) -> Mat<f64> {
        let (d, p) = (self.d(), self.p());
        Mat::from_fn(d + p, d + p, |i, j| match (i < d, j < d) {
            (true, true) => self.known_cov[(i, j)],
            (true, false) => self.cross_cov[(i, j - d)],
            (false, true) => self.cross_cov[(j, i - d)],
            (false, false) => {
                if i == j {
                    self.latent_var[i - d]
                } else {
                    0.0
                }
            }
        })
    }

    /// Checks positive semi-definiteness of the stacked covariance
    /// (smallest eigenvalue ≥ −1e-8·‖·‖₂) and the ordering of `A`.
    pub fn check(&self) -> Result<ParamsCheck> {
        let ev = linalg::sym_eigenvalues_desc(self.stacked().as_ref())?;
        let norm = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min_eigenvalue = ev.last().copied().unwrap_or(0.0);
        let sorted = self.latent_var.windows(2).all(|w| w[0] >= w[1]);
        Ok(ParamsCheck {
            min_eigenvalue,
            psd: min_eigenvalue >= -1e-8 * norm,
            latent_sorted: sorted,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamsCheck {
    pub min_eigenvalue: f64,
    pub psd: bool,
    pub latent_sorted: bool,
}

/// Fractions of `tr(C)` attributed to each component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceShares {
    pub known: f64,
    pub latent: f64,
    pub residual: f64,
}

impl VarianceShares {
    pub fn sum(&self) -> f64 {
        self.known + self.latent + self.residual
    }

    /// Share explained by known and latent components together.
    pub fn explained(&self) -> f64 {
        self.known + self.latent
    }
}

/// Outcome of one model condition evaluated during a fit: `holds` is
/// `lhs > rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRecord {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// A fitted model.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub(crate) latent: Mat<f64>,
    pub(crate) params: CovarianceParams,
    pub(crate) k: Mat<f64>,
    pub(crate) loglik: f64,
    pub(crate) shares: VarianceShares,
    pub(crate) conditions: Vec<ConditionRecord>,
}

impl ModelFit {
    /// Inferred latent factors `X̂` (`n × p`, orthonormal columns).
    pub fn latent(&self) -> MatRef<'_, f64> {
        self.latent.as_ref()
    }

    pub fn params(&self) -> &CovarianceParams {
        &self.params
    }

    /// Assembled covariance `K̂`.
    pub fn k(&self) -> MatRef<'_, f64> {
        self.k.as_ref()
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    pub fn shares(&self) -> VarianceShares {
        self.shares
    }

    pub fn conditions(&self) -> &[ConditionRecord] {
        &self.conditions
    }

    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    pub fn d(&self) -> usize {
        self.params.d()
    }

    pub fn p(&self) -> usize {
        self.params.p()
    }

    pub fn sigma2(&self) -> f64 {
        self.params.sigma2()
    }
}

/// User parameters of the automatic fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Target share of `tr(C)` to be explained, in `(0, 1)`.
    pub rho: f64,
    /// Minimum share a single covariate must explain on its own.
    pub theta: f64,
    /// Upper bound on the number of latent factors.
    pub max_latent: Option<usize>,
    /// Relative tolerance for rank and eigenvalue-tie decisions.
    pub tolerance: f64,
}

impl FitConfig {
    pub fn new(rho: f64, theta: f64) -> Result<Self> {
        let config = Self { rho, theta, max_latent: None, tolerance: DEFAULT_TOLERANCE };
        config.validate()?;
        Ok(config)
    }

    pub fn with_max_latent(mut self, cap: usize) -> Self {
        self.max_latent = Some(cap);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidConfig(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if !(self.theta >= 0.0) || !self.theta.is_finite() {
            return Err(Error::InvalidConfig(format!("theta must be >= 0, got {}", self.theta)));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tolerance must lie in (0, 1), got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Cosine similarity between every known covariate (rows) and every latent
/// factor (columns). Zero-norm columns give zero similarity.
pub fn covariate_overlap(z: MatRef<'_, f64>, x: MatRef<'_, f64>) -> Result<Mat<f64>> {
    if z.nrows() != x.nrows() {
        return Err(Error::Shape(format!(
            "covariates have {} rows, latent factors {}",
            z.nrows(),
            x.nrows()
        )));
    }
    let dots = z.transpose() * x;
    Ok(Mat::from_fn(z.ncols(), x.ncols(), |i, j| {
        let denom = z.col(i).norm_l2() * x.col(j).norm_l2();
        if denom > 0.0 {
            dots[(i, j)] / denom
        } else {
            0.0
        }
    }))
}

/// `K = Z B Zᵀ + Z D Xᵀ + X Dᵀ Zᵀ + X A Xᵀ + σ² 𝟙`.
///
/// `x` need not be orthonormal or orthogonal to `z`.
pub fn assemble_k(
    z: MatRef<'_, f64>,
    x: MatRef<'_, f64>,
    params: &CovarianceParams,
) -> Result<Mat<f64>> {
    let n = z.nrows();
    let (d, p) = (params.d(), params.p());
    if z.ncols() != d || x.ncols() != p || x.nrows() != n {
        return Err(Error::Shape(format!(
            "Z is {}x{}, X is {}x{}, parameters have d = {d}, p = {p}",
            z.nrows(),
            z.ncols(),
            x.nrows(),
            x.ncols()
        )));
    }
    let g = Mat::from_fn(n, d + p, |i, j| if j < d { z[(i, j)] } else { x[(i, j - d)] });
    let mut k = &g * params.stacked() * g.transpose();
    for i in 0..n {
        k[(i, i)] += params.sigma2();
    }
    linalg::symmetrize_from_lower(&mut k);
    Ok(k)
}

/// `−log det K − tr(K⁻¹ C)`, from one symmetric eigendecomposition of `K`.
pub fn log_likelihood(k: MatRef<'_, f64>, c: &SampleCovariance) -> Result<f64> {
    let n = c.n();
    if k.nrows() != n || k.ncols() != n {
        return Err(Error::Shape(format!(
            "K is {}x{}, C is {n}x{n}",
            k.nrows(),
            k.ncols()
        )));
    }
    let eig = linalg::sym_eigen_desc(k)?;
    let top = eig.values.first().copied().unwrap_or(0.0);
    let bottom = eig.values.last().copied().unwrap_or(0.0);
    if !(bottom > PD_TOLERANCE * top) || !(top > 0.0) {
        return Err(Error::NotPositiveDefinite { eigenvalue: bottom });
    }
    let cq = c.matrix() * &eig.vectors;
    let mut log_det = 0.0;
    let mut tr = 0.0;
    for (j, &lambda) in eig.values.iter().enumerate() {
        log_det += lambda.ln();
        let quad: f64 = (0..n).map(|r| eig.vectors[(r, j)] * cq[(r, j)]).sum();
        tr += quad / lambda;
    }
    Ok(-log_det - tr)
}
