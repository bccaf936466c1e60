//! Closed-form solutions: known covariates only, latent only (probabilistic
//! PCA), restricted latent inference, and full parameter recovery.

use faer::{Mat, MatRef};

use crate::error::{Error, Result};
use crate::linalg::{self, SymEigen};
use crate::model::{
    assemble_k, log_likelihood, ConditionRecord, CovarianceBlocks, CovarianceParams,
    CovariateBasis, ModelFit, SampleCovariance, VarianceShares, DEFAULT_TOLERANCE,
};

/// Post-hoc tolerance for positive semi-definiteness of `B̂`.
const PSD_TOLERANCE: f64 = 1e-8;

/// Eigendecomposition of `C₂₂`, eigenvalues nonincreasing.
#[derive(Debug, Clone)]
pub struct ReducedSpectrum {
    eigen: SymEigen,
}

impl ReducedSpectrum {
    pub fn new(c22: MatRef<'_, f64>) -> Result<Self> {
        Ok(Self { eigen: linalg::sym_eigen_desc(c22)? })
    }

    /// Spectrum of the covariance restricted to the complement of `Z`.
    pub fn of(c: &SampleCovariance, basis: &CovariateBasis) -> Result<Self> {
        Self::new(c.blocks(basis)?.c22.as_ref())
    }

    pub fn from_eigenvalues(values: Vec<f64>) -> Self {
        let vectors = linalg::diag(&vec![1.0; values.len()]);
        Self { eigen: SymEigen { values, vectors } }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigen.values
    }

    pub fn eigenvectors(&self) -> MatRef<'_, f64> {
        self.eigen.vectors.as_ref()
    }

    /// Dimension `n − d` of the reduced space.
    pub fn dim(&self) -> usize {
        self.eigen.values.len()
    }

    /// `f(p)`: mean of the eigenvalues beyond the first `p`.
    pub fn residual_mean(&self, p: usize) -> f64 {
        let tail = &self.eigen.values[p.min(self.dim())..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    /// Whether `λ_p` strictly exceeds the smallest eigenvalue, relative to
    /// `tolerance · λ₁`. Vacuously true for `p = 0`.
    pub fn has_gap_at(&self, p: usize, tolerance: f64) -> bool {
        if p == 0 {
            return true;
        }
        let v = &self.eigen.values;
        if p >= v.len() {
            return false;
        }
        v[p - 1] - v[v.len() - 1] > tolerance * v[0].abs()
    }

    fn check_cut(&self, p: usize) -> Result<()> {
        if self.has_gap_at(p, DEFAULT_TOLERANCE) {
            return Ok(());
        }
        let v = &self.eigen.values;
        Err(Error::DegenerateSpectrum { p, retained: v[p - 1], trailing: v[v.len() - 1] })
    }
}

/// Known-covariates-only estimate.
#[derive(Debug, Clone)]
pub struct KnownOnlyFit {
    pub known_cov: Mat<f64>,
    pub sigma2: f64,
    /// `d = n`: the covariates span the sample space, `σ̂² = 0` and the
    /// existence condition is waived.
    pub saturated: bool,
    pub lambda_min_c11: f64,
}

/// Returns `(B̂, σ̂²)` with `σ̂² = tr(C₂₂)/(n−d)` and
/// `B̂ = V Γ₁⁻¹ (C₁₁ − σ̂² 𝟙) Γ₁⁻¹ Vᵀ`.
pub fn fit_known_only(c: &SampleCovariance, basis: &CovariateBasis) -> Result<KnownOnlyFit> {
    let blocks = c.blocks(basis)?;
    let (n, d) = (basis.n(), basis.d());
    let saturated = d == n;
    let sigma2 =
        if saturated { 0.0 } else { linalg::trace(blocks.c22.as_ref()) / (n - d) as f64 };
    let lambda_min_c11 = lambda_min(blocks.c11.as_ref())?;
    if d > 0 && !saturated && !exceeds(lambda_min_c11, sigma2, &blocks) {
        return Err(Error::KnownOnlyExistence { lambda_min: lambda_min_c11, residual: sigma2 });
    }
    let known_cov = known_cov_estimate(basis, &blocks, sigma2)?;
    Ok(KnownOnlyFit { known_cov, sigma2, saturated, lambda_min_c11 })
}

/// Variance explained by a single candidate covariate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleScreen {
    pub beta2: f64,
    pub sigma2: f64,
    /// `⟨u, C u⟩ > tr(C)/n`, the proviso under which `beta2` is the
    /// maximum-likelihood estimate.
    pub admissible: bool,
}

/// Closed-form known-only fit for one covariate `z`.
pub fn screen_single_covariate(c: &SampleCovariance, z: &[f64]) -> Result<SingleScreen> {
    let n = c.n();
    if z.len() != n {
        return Err(Error::Shape(format!("covariate has {} entries, expected {n}", z.len())));
    }
    if n < 2 {
        return Err(Error::Shape("screening needs at least 2 samples".into()));
    }
    let gamma2: f64 = z.iter().map(|v| v * v).sum();
    if !(gamma2 > 0.0) || !gamma2.is_finite() {
        return Err(Error::DegenerateCovariate);
    }
    let gamma = gamma2.sqrt();
    let u: Vec<f64> = z.iter().map(|v| v / gamma).collect();
    let cm = c.matrix();
    let mut quad = 0.0;
    for j in 0..n {
        let col: f64 = (0..n).map(|i| cm[(i, j)] * u[i]).sum();
        quad += u[j] * col;
    }
    let tr = c.trace();
    let nf = n as f64;
    let beta2 = (nf / (nf - 1.0) * quad - tr / (nf - 1.0)) / gamma2;
    let sigma2 = (tr - quad) / (nf - 1.0);
    let admissible = quad - tr / nf > DEFAULT_TOLERANCE * (tr / nf).abs();
    Ok(SingleScreen { beta2, sigma2, admissible })
}

/// Latent factors and variances from a spectrum.
#[derive(Debug, Clone)]
pub struct LatentFit {
    /// `X̂`, `n × p`, sign-normalized so the largest-magnitude entry of every
    /// column is positive.
    pub latent: Mat<f64>,
    /// Diagonal of `Â`, nonincreasing.
    pub latent_var: Vec<f64>,
    pub sigma2: f64,
    /// Reduced-space coordinates `W_p` with `X̂ = U₂ W_p` (signs matched).
    pub coords: Mat<f64>,
    pub spectrum: ReducedSpectrum,
}

/// Probabilistic PCA: `X̂` are the top-`p` eigenvectors of `C`.
#[derive(Debug, Clone)]
pub struct PpcaFit {
    pub latent: Mat<f64>,
    pub latent_var: Vec<f64>,
    pub sigma2: f64,
    /// `−[Σ_{j≤p} log λⱼ + (n−p) log σ̂² + n]`.
    pub profile_loglik: f64,
}

/// Latent-only fit; `p = n` is allowed and gives `σ̂² = 0`.
pub fn fit_ppca(c: &SampleCovariance, p: usize) -> Result<PpcaFit> {
    let n = c.n();
    let spectrum = ReducedSpectrum::new(c.matrix())?;
    let fit = latent_from_spectrum(Mat::<f64>::identity(n, n).as_ref(), spectrum, p, true)?;
    let values = fit.spectrum.eigenvalues();
    let mut acc: f64 = values[..p].iter().map(|l| l.ln()).sum();
    if p < n {
        acc += (n - p) as f64 * fit.sigma2.ln();
    }
    let profile_loglik = -(acc + n as f64);
    Ok(PpcaFit { latent: fit.latent, latent_var: fit.latent_var, sigma2: fit.sigma2, profile_loglik })
}

/// Restricted latent inference: `X̂ = U₂ W_p` from the spectrum of `C₂₂`.
pub fn fit_latent_restricted(
    c: &SampleCovariance,
    basis: &CovariateBasis,
    p: usize,
) -> Result<LatentFit> {
    let blocks = c.blocks(basis)?;
    let spectrum = ReducedSpectrum::new(blocks.c22.as_ref())?;
    latent_from_spectrum(basis.u2(), spectrum, p, false)
}

fn latent_from_spectrum(
    u2: MatRef<'_, f64>,
    spectrum: ReducedSpectrum,
    p: usize,
    allow_full: bool,
) -> Result<LatentFit> {
    let dim = spectrum.dim();
    let full = p == dim;
    if p > dim || (full && !allow_full && dim > 0) {
        return Err(Error::LatentDimension { p, dim });
    }
    if !full {
        spectrum.check_cut(p)?;
    }
    let sigma2 = spectrum.residual_mean(p);
    let mut coords = spectrum.eigenvectors().subcols(0, p).to_owned();
    let mut latent = u2 * &coords;
    let signs = linalg::normalize_column_signs(&mut latent);
    for (j, s) in signs.iter().enumerate() {
        if *s < 0.0 {
            for i in 0..coords.nrows() {
                coords[(i, j)] = -coords[(i, j)];
            }
        }
    }
    let latent_var = spectrum.eigenvalues()[..p].iter().map(|l| l - sigma2).collect();
    Ok(LatentFit { latent, latent_var, sigma2, coords, spectrum })
}

/// Full restricted maximum-likelihood fit with `p` latent factors.
pub fn fit_full(c: &SampleCovariance, basis: &CovariateBasis, p: usize) -> Result<ModelFit> {
    let blocks = c.blocks(basis)?;
    let spectrum = ReducedSpectrum::new(blocks.c22.as_ref())?;
    fit_full_prepared(c, basis, &blocks, &spectrum, p)
}

pub(crate) fn fit_full_prepared(
    c: &SampleCovariance,
    basis: &CovariateBasis,
    blocks: &CovarianceBlocks,
    spectrum: &ReducedSpectrum,
    p: usize,
) -> Result<ModelFit> {
    let (n, d) = (basis.n(), basis.d());
    if !(c.trace() > 0.0) {
        return Err(Error::Numerical("sample covariance has zero trace".into()));
    }
    let latent = latent_from_spectrum(basis.u2(), spectrum.clone(), p, false)?;
    let sigma2 = latent.sigma2;
    let mut conditions = Vec::new();

    if d > 0 {
        let lambda_min_c11 = lambda_min(blocks.c11.as_ref())?;
        if d == n {
            conditions.push(ConditionRecord {
                name: "existence_waived_saturated",
                lhs: lambda_min_c11,
                rhs: 0.0,
                holds: true,
            });
        } else {
            let holds = exceeds(lambda_min_c11, sigma2, blocks);
            if !holds {
                return Err(if p == 0 {
                    Error::KnownOnlyExistence { lambda_min: lambda_min_c11, residual: sigma2 }
                } else {
                    Error::LatentExistence { lambda_min: lambda_min_c11, sigma2, p }
                });
            }
            conditions.push(ConditionRecord {
                name: "latent_existence",
                lhs: lambda_min_c11,
                rhs: sigma2,
                holds,
            });
        }
    }
    if p > 0 {
        let v = spectrum.eigenvalues();
        conditions.push(ConditionRecord {
            name: "spectral_gap",
            lhs: v[p - 1],
            rhs: v[v.len() - 1],
            holds: true,
        });
    }

    let known_cov = known_cov_estimate(basis, blocks, sigma2)?;
    let cross_cov = if d == 0 {
        Mat::zeros(0, p)
    } else {
        basis.pull_back_left((&blocks.c12 * &latent.coords).as_ref())
    };
    if d > 0 {
        let ev = linalg::sym_eigenvalues_desc(known_cov.as_ref())?;
        let norm = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        conditions.push(ConditionRecord {
            name: "known_cov_psd",
            lhs: ev[ev.len() - 1],
            rhs: -PSD_TOLERANCE * norm,
            holds: true,
        });
    }
    let params = CovarianceParams::new(known_cov, latent.latent_var, cross_cov, sigma2)?;
    let joint = params.check()?;
    conditions.push(ConditionRecord {
        name: "joint_cov_psd",
        lhs: joint.min_eigenvalue,
        rhs: -PSD_TOLERANCE * joint_norm(&params)?,
        holds: joint.psd,
    });

    let k = assemble_k(basis.z(), latent.latent.as_ref(), &params)?;
    let loglik = log_likelihood(k.as_ref(), c)?;

    let tr_c = c.trace();
    let ztz = basis.z().transpose() * basis.z();
    let known_trace = linalg::trace((params.known_cov() * &ztz).as_ref());
    let latent_trace: f64 = params
        .latent_var()
        .iter()
        .enumerate()
        .map(|(j, a)| a * latent.latent.col(j).squared_norm_l2())
        .sum();
    let shares = VarianceShares {
        known: known_trace / tr_c,
        latent: latent_trace / tr_c,
        residual: n as f64 * sigma2 / tr_c,
    };

    Ok(ModelFit { latent: latent.latent, params, k, loglik, shares, conditions })
}

/// Residual variance `(tr(C₂₂) − tr(Xᵀ C X))/(n−d−p)` under maximum-likelihood
/// parameters for an arbitrary admissible latent choice `X`.
pub fn unexplained_variance(
    c: &SampleCovariance,
    basis: &CovariateBasis,
    x: MatRef<'_, f64>,
) -> Result<f64> {
    let (n, d, p) = (basis.n(), basis.d(), x.ncols());
    if x.nrows() != n || c.n() != n {
        return Err(Error::Shape(format!(
            "latent factors have {} rows, expected {n}",
            x.nrows()
        )));
    }
    if p >= n - d {
        return Err(Error::LatentDimension { p, dim: n - d });
    }
    let defect = linalg::orthonormality_defect(x);
    if defect > 1e-10 {
        return Err(Error::ConstraintViolation {
            what: "latent factors must be orthonormal",
            deviation: defect,
        });
    }
    let overlap = linalg::max_abs((x.transpose() * basis.z()).as_ref());
    if overlap > 1e-10 * linalg::max_abs(basis.z()).max(1.0) {
        return Err(Error::ConstraintViolation {
            what: "latent factors must be orthogonal to the known covariates",
            deviation: overlap,
        });
    }
    let u1 = basis.u1();
    let cm = c.matrix();
    let tr_c11 = linalg::trace((u1.transpose() * (cm * u1)).as_ref());
    let tr_x = linalg::trace((x.transpose() * (cm * x)).as_ref());
    Ok((c.trace() - tr_c11 - tr_x) / (n - d - p) as f64)
}

fn known_cov_estimate(
    basis: &CovariateBasis,
    blocks: &CovarianceBlocks,
    sigma2: f64,
) -> Result<Mat<f64>> {
    let d = basis.d();
    if d == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let mut shifted = blocks.c11.clone();
    for i in 0..d {
        shifted[(i, i)] -= sigma2;
    }
    let b = basis.pull_back_both(shifted.as_ref());
    let ev = linalg::sym_eigenvalues_desc(b.as_ref())?;
    let norm = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = ev[ev.len() - 1];
    if min < -PSD_TOLERANCE * norm {
        return Err(Error::Numerical(format!(
            "known-covariate covariance estimate is indefinite (eigenvalue {min:e})"
        )));
    }
    Ok(b)
}

fn lambda_min(c11: MatRef<'_, f64>) -> Result<f64> {
    Ok(linalg::sym_eigenvalues_desc(c11)?.last().copied().unwrap_or(f64::INFINITY))
}

/// `λ_min(C₁₁) > σ²` with a relative margin guarding exact ties.
fn exceeds(lambda_min: f64, sigma2: f64, blocks: &CovarianceBlocks) -> bool {
    let scale = linalg::max_abs(blocks.c11.as_ref()).max(sigma2.abs());
    lambda_min - sigma2 > DEFAULT_TOLERANCE * scale
}

fn joint_norm(params: &CovarianceParams) -> Result<f64> {
    let ev = linalg::sym_eigenvalues_desc(params.stacked().as_ref())?;
    Ok(ev.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}
