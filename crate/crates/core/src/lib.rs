//! Closed-form restricted maximum-likelihood inference for random-effect
//! models with known and latent variance components.
//!
//! Given sample-centered data `Y` (`n` samples × `m` genes) with sample
//! covariance `C = Y Yᵀ / m` and optional known covariates `Z`, the crate
//! recovers latent factors `X̂` and covariance parameters `(B̂, Â, D̂, σ̂²)`
//! spectrally, without iterative optimization.
//!
//! ```
//! use faer::Mat;
//! use latent_reml::{CovariateBasis, SampleCovariance, solver};
//!
//! let c = SampleCovariance::from_matrix(latent_reml::linalg::diag(&[5.0, 3.0, 2.0, 1.0, 1.0]))?;
//! let z = Mat::from_fn(5, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
//! let basis = CovariateBasis::new(z)?;
//! let fit = solver::fit_full(&c, &basis, 1)?;
//! assert!((fit.sigma2() - 4.0 / 3.0).abs() < 1e-12);
//! # Ok::<(), latent_reml::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod downstream;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod screen;
pub mod select;
pub mod solver;
pub mod synth;

pub use error::{Error, ErrorCategory, ParseError, Result};
pub use model::{
    assemble_k, covariate_overlap, log_likelihood, sample_covariance, ConditionRecord, CovarianceBlocks,
    CovarianceParams, CovariateBasis, ExpressionMatrix, FitConfig, ModelFit, SampleCovariance,
    VarianceShares,
};
