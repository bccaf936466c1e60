#![allow(dead_code)]

use faer::Mat;
use latent_reml::model::{CovariateBasis, FitConfig, SampleCovariance};
use latent_reml::select::{fit_auto, AutoFit};
use latent_reml::synth::{self, Planted};
use latent_reml::{linalg, sample_covariance};
use rand::Rng;

/// A fitted random instance from planted data.
pub struct Instance {
    pub planted: Planted,
    pub c: SampleCovariance,
    pub basis: CovariateBasis,
    pub auto: AutoFit,
}

/// Draws planted data and fits it automatically, skipping seeds whose
/// covariates fail the existence condition at every dimension.
pub fn random_fit(seed: u64, n_range: (usize, usize), max_d: usize) -> Instance {
    let mut s = seed;
    loop {
        let mut rng = synth::rng(s);
        let n = rng.random_range(n_range.0..=n_range.1);
        let d = rng.random_range(0..=max_d.min(n / 3));
        let p = rng.random_range(1..=(n / 3).max(1));
        let m = rng.random_range(n + 5..=4 * n + 20);
        let planted = synth::planted_expression(n, m, d, p, 4.0, &mut rng);
        let c = sample_covariance(&planted.y).unwrap();
        let basis = CovariateBasis::new(planted.known.clone()).unwrap();
        let rho = rng.random_range(0.05..0.6);
        if let Ok(auto) = fit_auto(&c, &basis, &FitConfig::new(rho, 0.0).unwrap()) {
            return Instance { planted, c, basis, auto };
        }
        s = s.wrapping_add(1_000_003);
    }
}

/// `‖a − b‖_F / ‖b‖_F`.
pub fn rel(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    linalg::relative_frobenius(a.as_ref(), b.as_ref())
}

pub fn trace_of(m: &Mat<f64>) -> f64 {
    linalg::trace(m.as_ref())
}
