//! Brute-force reference maximizer of the log-likelihood for small instances.
//!
//! Everything here is deliberately independent of the spectral solver: the
//! covariance is assembled from an unconstrained parameter vector with plain
//! loops, the objective uses a hand-written Cholesky factorization, and the
//! search is a derivative-free Nelder–Mead simplex with seeded restarts.

use faer::{Mat, MatRef};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{CovariateBasis, SampleCovariance};
use crate::solver::unexplained_variance;

/// Largest sample count accepted by the oracle.
pub const MAX_SAMPLES: usize = 12;

/// Default number of seeded restarts.
pub const DEFAULT_RESTARTS: usize = 16;

/// Largest number of axis-aligned candidates enumerated.
pub const MAX_AXIS_CANDIDATES: u128 = 1_000_000;

#[derive(Debug, Clone)]
pub struct OracleResult {
    /// Best log-likelihood found.
    pub loglik: f64,
    /// Covariance at the best point.
    pub k: Mat<f64>,
    /// The best restart stopped on its tolerance rather than its budget.
    pub converged: bool,
    pub evaluations: usize,
}

/// Maximizes `−log det K − tr(K⁻¹C)` over `(X, A, D, B, σ²)` with
/// `restarts` seeded Nelder–Mead runs. Deterministic given `seed`.
pub fn oracle_maximize(
    c: &SampleCovariance,
    basis: &CovariateBasis,
    p: usize,
    restarts: usize,
    seed: u64,
) -> Result<OracleResult> {
    let n = c.n();
    if n > MAX_SAMPLES {
        return Err(Error::SizeBound { what: "oracle sample count", value: n, limit: MAX_SAMPLES });
    }
    if basis.n() != n {
        return Err(Error::Shape(format!("covariates have {} rows, expected {n}", basis.n())));
    }
    if restarts == 0 {
        return Err(Error::InvalidConfig("oracle needs at least one restart".into()));
    }
    let problem = Problem::new(c, basis.z(), p);
    let scale = (c.trace() / n as f64).max(f64::MIN_POSITIVE);
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    let mut evaluations = 0;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let x0 = problem.random_start(scale, &mut rng);
        let step = vec![0.5; x0.len()];
        let budget = 600 * (x0.len() + 1);
        let mut run = nelder_mead::minimize(|x| problem.objective(x), &x0, &step, budget);
        evaluations += run.evaluations;
        // polish with fresh, smaller simplices until no further progress
        let mut polish_step = 0.1;
        for _ in 0..4 {
            let step = vec![polish_step; x0.len()];
            let next = nelder_mead::minimize(|x| problem.objective(x), &run.x, &step, budget / 2);
            evaluations += next.evaluations;
            let gain = run.fx - next.fx;
            if next.fx < run.fx {
                run = next;
            }
            if !(gain > 1e-10) {
                break;
            }
            polish_step *= 0.3;
        }
        if best.as_ref().is_none_or(|b| run.fx < b.1) {
            best = Some((run.x, run.fx, run.converged));
        }
    }
    let (x, fx, converged) = best.expect("at least one restart");
    let k = problem.covariance(&x);
    let k = Mat::from_fn(n, n, |i, j| k[i * n + j]);
    Ok(OracleResult { loglik: -fx, k, converged: converged && fx.is_finite(), evaluations })
}

/// Dense row-major working data for the objective.
struct Problem {
    n: usize,
    d: usize,
    p: usize,
    c: Vec<f64>,
    z: Vec<f64>,
}

impl Problem {
    fn new(c: &SampleCovariance, z: MatRef<'_, f64>, p: usize) -> Self {
        let n = c.n();
        let d = z.ncols();
        let cm = c.matrix();
        Self {
            n,
            d,
            p,
            c: (0..n * n).map(|k| cm[(k / n, k % n)]).collect(),
            z: (0..n * d).map(|k| z[(k / d, k % d)]).collect(),
        }
    }

    // layout: X block (n·p) | log A (p) | D (d·p) | L lower (d(d+1)/2) | log σ²
    fn random_start(&self, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (n, d, p) = (self.n, self.d, self.p);
        let mut g = || -> f64 { StandardNormal.sample(rng) };
        let mut x = Vec::new();
        x.extend((0..n * p).map(|_| g()));
        x.extend((0..p).map(|_| scale.ln() + 0.5 * g()));
        x.extend((0..d * p).map(|_| 0.3 * scale.sqrt() * g()));
        for i in 0..d {
            for j in 0..=i {
                let base = if i == j { scale.sqrt() } else { 0.0 };
                x.push(base + 0.3 * scale.sqrt() * g());
            }
        }
        x.push(scale.ln() + 0.3 * g());
        x
    }

    /// Row-major `n × n` covariance for a parameter vector.
    fn covariance(&self, theta: &[f64]) -> Vec<f64> {
        let (n, d, p) = (self.n, self.d, self.p);
        let mut off = 0;
        let raw = &theta[off..off + n * p];
        off += n * p;
        let x = gram_schmidt(raw, n, p);
        let a: Vec<f64> = theta[off..off + p].iter().map(|v| v.exp()).collect();
        off += p;
        let dm = &theta[off..off + d * p];
        off += d * p;
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                l[i * d + j] = theta[off];
                off += 1;
            }
        }
        let sigma2 = theta[off].exp();

        // B = D A⁻¹ Dᵀ + L Lᵀ
        let mut b = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..p {
                    s += dm[i * p + k] * dm[j * p + k] / a[k];
                }
                for k in 0..d {
                    s += l[i * d + k] * l[j * d + k];
                }
                b[i * d + j] = s;
            }
        }
        let z = &self.z;
        let mut k = vec![0.0; n * n];
        for r in 0..n {
            for s in 0..n {
                let mut v = if r == s { sigma2 } else { 0.0 };
                for i in 0..d {
                    for j in 0..d {
                        v += z[r * d + i] * b[i * d + j] * z[s * d + j];
                    }
                    for j in 0..p {
                        v += z[r * d + i] * dm[i * p + j] * x[s * p + j];
                        v += x[r * p + j] * dm[i * p + j] * z[s * d + i];
                    }
                }
                for j in 0..p {
                    v += x[r * p + j] * a[j] * x[s * p + j];
                }
                k[r * n + s] = v;
            }
        }
        k
    }

    /// Negative log-likelihood; `+∞` where the covariance is not positive
    /// definite.
    fn objective(&self, theta: &[f64]) -> f64 {
        if theta.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        let n = self.n;
        let k = self.covariance(theta);
        let Some(chol) = cholesky(&k, n) else {
            return f64::INFINITY;
        };
        let log_det: f64 = (0..n).map(|i| 2.0 * chol[i * n + i].ln()).sum();
        // tr(K⁻¹C) = Σ_j (K⁻¹ c_j)_j via two triangular solves per column
        let mut tr = 0.0;
        let mut w = vec![0.0; n];
        for j in 0..n {
            for i in 0..n {
                let mut s = self.c[i * n + j];
                for k in 0..i {
                    s -= chol[i * n + k] * w[k];
                }
                w[i] = s / chol[i * n + i];
            }
            let mut v = w.clone();
            for i in (0..n).rev() {
                let mut s = v[i];
                for k in i + 1..n {
                    s -= chol[k * n + i] * v[k];
                }
                v[i] = s / chol[i * n + i];
            }
            tr += v[j];
        }
        let value = log_det + tr;
        if value.is_finite() {
            value
        } else {
            f64::INFINITY
        }
    }
}

/// Orthonormalizes the columns of a row-major `n × p` block; columns that
/// collapse are replaced by zeros (which the likelihood then ignores).
fn gram_schmidt(raw: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut q = raw.to_vec();
    for j in 0..p {
        for _ in 0..2 {
            for k in 0..j {
                let dot: f64 = (0..n).map(|i| q[i * p + j] * q[i * p + k]).sum();
                for i in 0..n {
                    q[i * p + j] -= dot * q[i * p + k];
                }
            }
        }
        let norm = (0..n).map(|i| q[i * p + j] * q[i * p + j]).sum::<f64>().sqrt();
        for i in 0..n {
            q[i * p + j] = if norm > 1e-12 { q[i * p + j] / norm } else { 0.0 };
        }
    }
    q
}

/// Lower Cholesky factor of a row-major SPD matrix.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > 0.0) {
            return None;
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Some(l)
}

/// One axis-aligned latent choice.
#[derive(Debug, Clone)]
pub struct AxisCandidate {
    /// Indices of the complement-basis columns used.
    pub columns: Vec<usize>,
    pub latent: Mat<f64>,
    /// Residual variance under maximum-likelihood parameters.
    pub sigma2: f64,
}

/// Every choice of `p` columns of `U₂` as latent factors, with its residual
/// variance. Requires `C₂₂` to be diagonal.
pub fn enumerate_axis_latents(
    c: &SampleCovariance,
    basis: &CovariateBasis,
    p: usize,
) -> Result<Vec<AxisCandidate>> {
    let dim = basis.n() - basis.d();
    if p >= dim {
        return Err(Error::LatentDimension { p, dim });
    }
    let count = binomial(dim, p);
    if count > MAX_AXIS_CANDIDATES {
        return Err(Error::SizeBound {
            what: "axis-aligned candidate count",
            value: usize::try_from(count).unwrap_or(usize::MAX),
            limit: MAX_AXIS_CANDIDATES as usize,
        });
    }
    let c22 = c.blocks(basis)?.c22;
    let mut scale = 0.0f64;
    let mut off_diag = 0.0f64;
    for j in 0..dim {
        for i in 0..dim {
            scale = scale.max(c22[(i, j)].abs());
            if i != j {
                off_diag = off_diag.max(c22[(i, j)].abs());
            }
        }
    }
    if off_diag > 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::ConstraintViolation {
            what: "covariance must be diagonal in the complement basis",
            deviation: off_diag,
        });
    }
    let u2 = basis.u2();
    let mut out = Vec::with_capacity(count as usize);
    let mut columns: Vec<usize> = (0..p).collect();
    loop {
        let latent = Mat::from_fn(basis.n(), p, |i, j| u2[(i, columns[j])]);
        let sigma2 = unexplained_variance(c, basis, latent.as_ref())?;
        out.push(AxisCandidate { columns: columns.clone(), latent, sigma2 });
        if !next_combination(&mut columns, dim) {
            break;
        }
    }
    Ok(out)
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > MAX_AXIS_CANDIDATES * 1000 {
            return acc;
        }
    }
    acc
}

/// Advances to the next lexicographic `k`-subset of `0..n`.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    for i in (0..k).rev() {
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

mod nelder_mead {
    //! Nelder–Mead simplex search with dimension-adaptive coefficients
    //! (Gao & Han).

    pub struct Outcome {
        pub x: Vec<f64>,
        pub fx: f64,
        pub evaluations: usize,
        pub converged: bool,
    }

    const FTOL: f64 = 1e-13;
    const XTOL: f64 = 1e-10;

    pub fn minimize<F: Fn(&[f64]) -> f64>(
        f: F,
        x0: &[f64],
        step: &[f64],
        max_evals: usize,
    ) -> Outcome {
        let k = x0.len();
        if k == 0 {
            return Outcome { x: Vec::new(), fx: f(x0), evaluations: 1, converged: true };
        }
        let kf = k as f64;
        let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / kf, 0.75 - 0.5 / kf, 1.0 - 1.0 / kf);

        let mut pts: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
        pts.push(x0.to_vec());
        for i in 0..k {
            let mut p = x0.to_vec();
            p[i] += step[i];
            pts.push(p);
        }
        let mut vals: Vec<f64> = pts.iter().map(|p| f(p)).collect();
        let mut evals = k + 1;
        let mut converged = false;

        loop {
            let mut order: Vec<usize> = (0..=k).collect();
            order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
            pts = order.iter().map(|&i| pts[i].clone()).collect();
            vals = order.iter().map(|&i| vals[i]).collect();

            let spread = (vals[k] - vals[0]).abs();
            let size = pts[1..]
                .iter()
                .flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()))
                .fold(0.0f64, f64::max);
            if vals[0].is_finite() && spread <= FTOL * (1.0 + vals[0].abs()) && size <= XTOL {
                converged = true;
                break;
            }
            if evals >= max_evals {
                break;
            }

            let mut centroid = vec![0.0; k];
            for p in &pts[..k] {
                for (c, v) in centroid.iter_mut().zip(p) {
                    *c += v / kf;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid.iter().zip(&pts[k]).map(|(c, w)| c + t * (c - w)).collect()
            };

            let xr = along(alpha);
            let fr = f(&xr);
            evals += 1;
            if fr < vals[0] {
                let xe = along(alpha * beta);
                let fe = f(&xe);
                evals += 1;
                if fe < fr {
                    pts[k] = xe;
                    vals[k] = fe;
                } else {
                    pts[k] = xr;
                    vals[k] = fr;
                }
                continue;
            }
            if fr < vals[k - 1] {
                pts[k] = xr;
                vals[k] = fr;
                continue;
            }
            let (xc, fc, accept) = if fr < vals[k] {
                let xc = along(alpha * gamma);
                let fc = f(&xc);
                (xc, fc, fc <= fr)
            } else {
                let xc = along(-gamma);
                let fc = f(&xc);
                (xc, fc, fc < vals[k])
            };
            evals += 1;
            if accept {
                pts[k] = xc;
                vals[k] = fc;
                continue;
            }
            let best = pts[0].clone();
            for i in 1..=k {
                for (v, b) in pts[i].iter_mut().zip(&best) {
                    *v = b + delta * (*v - b);
                }
                vals[i] = f(&pts[i]);
            }
            evals += k;
        }
        Outcome { x: pts.swap_remove(0), fx: vals[0], evaluations: evals, converged }
    }

}
