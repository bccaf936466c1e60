//! Choice of the latent dimension from a target explained-variance share.

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{CovariateBasis, FitConfig, ModelFit, SampleCovariance};
use crate::solver::{fit_full_prepared, ReducedSpectrum};

/// Target residual variance `min{(1−ρ) tr(C)/n, λ_min(C₁₁)}`; the clamp is
/// skipped without known covariates.
pub fn target_sigma2(c: &SampleCovariance, basis: &CovariateBasis, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidConfig(format!("rho must lie in (0, 1), got {rho}")));
    }
    let unclamped = unclamped_target(c, rho);
    if basis.d() == 0 {
        return Ok(unclamped);
    }
    let blocks = c.blocks(basis)?;
    Ok(unclamped.min(lambda_min(&blocks.c11)?))
}

fn unclamped_target(c: &SampleCovariance, rho: f64) -> f64 {
    (1.0 - rho) * c.trace() / c.n() as f64
}

fn lambda_min(c11: &faer::Mat<f64>) -> Result<f64> {
    Ok(linalg::sym_eigenvalues_desc(c11.as_ref())?.last().copied().unwrap_or(f64::INFINITY))
}

/// Smallest `p < n − d` with a spectral gap at `p` and residual mean
/// `f(p) < sigma2_target`.
pub fn select_p(spectrum: &ReducedSpectrum, sigma2_target: f64) -> Result<usize> {
    let v = spectrum.eigenvalues();
    let dim = v.len();
    let tol = crate::model::DEFAULT_TOLERANCE;
    if dim == 0 || !(v[0] - v[dim - 1] > tol * v[0].abs()) {
        return Err(Error::DegenerateSpectrum {
            p: 1,
            retained: v.first().copied().unwrap_or(0.0),
            trailing: v.last().copied().unwrap_or(0.0),
        });
    }
    let mut best = f64::INFINITY;
    for p in 0..dim {
        if !spectrum.has_gap_at(p, tol) {
            continue;
        }
        let f = spectrum.residual_mean(p);
        if f < sigma2_target {
            return Ok(p);
        }
        best = best.min(f);
    }
    Err(Error::TargetUnreachable { target: sigma2_target, best })
}

/// One failed existence check during the automatic fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryStep {
    pub p: usize,
    /// Residual variance `f(p)` that failed to fall below `λ_min(C₁₁)`.
    pub residual: f64,
}

/// How the automatic fit arrived at its latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    /// `(1−ρ) tr(C)/n`.
    pub unclamped_target: f64,
    /// Target after the `λ_min(C₁₁)` clamp.
    pub target_sigma2: f64,
    pub clamp_active: bool,
    /// Dimension chosen against the unclamped target.
    pub p_initial: usize,
    pub p_final: usize,
    pub retries: Vec<RetryStep>,
    pub cap: usize,
    /// Share of `tr(C)` explained by known and latent components.
    pub explained: f64,
    /// Explained share exceeds `ρ`.
    pub exceeds_target: bool,
}

#[derive(Debug, Clone)]
pub struct AutoFit {
    pub fit: ModelFit,
    pub report: SelectionReport,
}

/// Chooses `p` from `ρ`, then adds one latent factor at a time while the
/// latent existence condition fails, up to the configured cap.
pub fn fit_auto(c: &SampleCovariance, basis: &CovariateBasis, config: &FitConfig) -> Result<AutoFit> {
    config.validate()?;
    let (n, d) = (basis.n(), basis.d());
    let blocks = c.blocks(basis)?;
    let spectrum = ReducedSpectrum::new(blocks.c22.as_ref())?;
    let unclamped = unclamped_target(c, config.rho);
    let (target, clamp_active) = if d == 0 {
        (unclamped, false)
    } else {
        let lm = lambda_min(&blocks.c11)?;
        (unclamped.min(lm), lm < unclamped)
    };

    if d == n {
        let fit = fit_full_prepared(c, basis, &blocks, &spectrum, 0)?;
        let report = finish_report(unclamped, target, clamp_active, 0, Vec::new(), 0, &fit, config);
        return Ok(AutoFit { fit, report });
    }

    let dim = n - d;
    let cap = config.max_latent.unwrap_or(dim - 1).min(dim - 1);
    let p_initial = select_p(&spectrum, unclamped)?;
    if p_initial > cap {
        return Err(Error::LatentDimension { p: p_initial, dim: cap });
    }
    let mut retries = Vec::new();
    let mut p = p_initial;
    loop {
        match fit_full_prepared(c, basis, &blocks, &spectrum, p) {
            Ok(fit) => {
                let report =
                    finish_report(unclamped, target, clamp_active, p_initial, retries, cap, &fit, config);
                return Ok(AutoFit { fit, report });
            }
            Err(
                e @ (Error::LatentExistence { .. }
                | Error::KnownOnlyExistence { .. }
                | Error::DegenerateSpectrum { .. }),
            ) => {
                retries.push(RetryStep { p, residual: spectrum.residual_mean(p) });
                if p >= cap {
                    let (lambda_min, sigma2) = match e {
                        Error::LatentExistence { lambda_min, sigma2, .. } => (lambda_min, sigma2),
                        Error::KnownOnlyExistence { lambda_min, residual } => (lambda_min, residual),
                        _ => (lambda_min(&blocks.c11)?, spectrum.residual_mean(p)),
                    };
                    return Err(Error::IrreducibleCovariates { p, cap, lambda_min, sigma2 });
                }
                p += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_report(
    unclamped_target: f64,
    target_sigma2: f64,
    clamp_active: bool,
    p_initial: usize,
    retries: Vec<RetryStep>,
    cap: usize,
    fit: &ModelFit,
    config: &FitConfig,
) -> SelectionReport {
    let explained = fit.shares().explained();
    SelectionReport {
        unclamped_target,
        target_sigma2,
        clamp_active,
        p_initial,
        p_final: fit.p(),
        retries,
        cap,
        explained,
        exceeds_target: explained > config.rho,
    }
}
