mod common;

use faer::linalg::solvers::Solve;
use faer::Mat;
use latent_reml::downstream::{correct_residuals, fit_gene_variances, lod_score, GeneModel};
use latent_reml::io::{center_samples, format_matrix, parse_matrix, LabeledMatrix, Layout};
use latent_reml::model::{CovarianceParams, CovariateBasis, FitConfig, SampleCovariance};
use latent_reml::oracle::oracle_maximize;
use latent_reml::screen::{compute_pcs, screen_candidates};
use latent_reml::select::{fit_auto, select_p};
use latent_reml::solver::{
    fit_full, fit_latent_restricted, screen_single_covariate, unexplained_variance, ReducedSpectrum,
};
use latent_reml::synth::{self, gaussian_matrix, random_covariance, random_orthonormal, spectral_covariance};
use latent_reml::{assemble_k, linalg, log_likelihood, Error};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn spd<R: Rng>(n: usize, rng: &mut R) -> Mat<f64> {
    let g = gaussian_matrix(n, n + 2, rng);
    let mut k = &g * g.transpose() * faer::Scale(1.0 / (n + 2) as f64);
    for i in 0..n {
        k[(i, i)] += 0.1;
    }
    k
}

fn dense_inverse(a: &Mat<f64>) -> Mat<f64> {
    let n = a.nrows();
    a.partial_piv_lu().solve(Mat::<f64>::identity(n, n))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn assembled_k_is_the_sum_of_its_terms(seed in any::<u64>(), n in 3usize..12, d in 0usize..3, p in 0usize..3) {
        prop_assume!(d + p < n);
        let mut rng = synth::rng(seed);
        let z = gaussian_matrix(n, d, &mut rng);
        let x = gaussian_matrix(n, p, &mut rng);
        let psi = spd(d + p, &mut rng);
        let b = Mat::from_fn(d, d, |i, j| psi[(i, j)]);
        let dd = Mat::from_fn(d, p, |i, j| psi[(i, d + j)]);
        let a: Vec<f64> = (0..p).map(|j| psi[(d + j, d + j)]).collect();
        let sigma2 = 0.5 + rng.random::<f64>();
        let params = CovarianceParams::new(b.clone(), a.clone(), dd.clone(), sigma2).unwrap();
        let k = assemble_k(z.as_ref(), x.as_ref(), &params).unwrap();
        // ZBZᵀ + ZDXᵀ + XDᵀZᵀ + XAXᵀ + σ²𝟙, entry by entry
        let reference = Mat::from_fn(n, n, |r, c| {
            let mut v = if r == c { sigma2 } else { 0.0 };
            for i in 0..d {
                for j in 0..d {
                    v += z[(r, i)] * b[(i, j)] * z[(c, j)];
                }
                for j in 0..p {
                    v += z[(r, i)] * dd[(i, j)] * x[(c, j)] + x[(r, j)] * dd[(i, j)] * z[(c, i)];
                }
            }
            for j in 0..p {
                v += x[(r, j)] * a[j] * x[(c, j)];
            }
            v
        });
        prop_assert!(linalg::relative_frobenius(k.as_ref(), reference.as_ref()) < 1e-12);
    }

    #[test]
    fn likelihood_peaks_at_the_sample_covariance(seed in any::<u64>(), n in 2usize..10, eps in 1e-3f64..0.5) {
        let mut rng = synth::rng(seed);
        let c = SampleCovariance::from_matrix(spd(n, &mut rng)).unwrap();
        let h = gaussian_matrix(n, n, &mut rng);
        let h = (&h + h.transpose()) * faer::Scale(0.5);
        let scale = eps * linalg::sym_eigenvalues_desc(c.matrix()).unwrap()[n - 1] / linalg::max_abs(h.as_ref()) / n as f64;
        let k = c.matrix() + &h * faer::Scale(scale);
        let best = log_likelihood(c.matrix(), &c).unwrap();
        prop_assert!(log_likelihood(k.as_ref(), &c).unwrap() < best);
    }

    #[test]
    fn block_traces_add_up(seed in any::<u64>(), n in 3usize..20, d in 1usize..4) {
        prop_assume!(d < n);
        let mut rng = synth::rng(seed);
        let c = random_covariance(n, &mut rng).unwrap();
        let basis = CovariateBasis::new(gaussian_matrix(n, d, &mut rng)).unwrap();
        let blocks = c.blocks(&basis).unwrap();
        let sum = linalg::trace(blocks.c11.as_ref()) + linalg::trace(blocks.c22.as_ref());
        prop_assert!((sum - c.trace()).abs() <= 1e-10 * c.trace());
    }

    /// tr(P⁻¹Q) ≥ Σ χᵢ/πᵢ with both spectra sorted the same way; equality
    /// for a shared eigenbasis.
    #[test]
    fn von_neumann_trace_bound(seed in any::<u64>(), n in 2usize..10) {
        let mut rng = synth::rng(seed);
        let p = spd(n, &mut rng);
        let q = spd(n, &mut rng);
        let pi = linalg::sym_eigenvalues_desc(p.as_ref()).unwrap();
        let chi = linalg::sym_eigenvalues_desc(q.as_ref()).unwrap();
        let bound: f64 = pi.iter().zip(&chi).map(|(a, b)| b / a).sum();
        let lhs = linalg::trace((dense_inverse(&p) * &q).as_ref());
        prop_assert!(lhs >= bound * (1.0 - 1e-10));

        let u = random_orthonormal(n, n, &mut rng);
        let pa = spectral_covariance(&pi, u.as_ref()).unwrap();
        let qa = spectral_covariance(&chi, u.as_ref()).unwrap();
        let aligned = linalg::trace((dense_inverse(&pa.matrix().to_owned()) * qa.matrix()).as_ref());
        prop_assert!((aligned - bound).abs() <= 1e-8 * bound);
    }

    #[test]
    fn single_covariate_scaling(seed in any::<u64>(), n in 3usize..15, scale in prop_oneof![0.01f64..0.5, 2.0f64..100.0]) {
        let mut rng = synth::rng(seed);
        let c = random_covariance(n, &mut rng).unwrap();
        let z: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let zs: Vec<f64> = z.iter().map(|v| v * scale).collect();
        let a = screen_single_covariate(&c, &z).unwrap();
        let b = screen_single_covariate(&c, &zs).unwrap();
        prop_assert!((b.beta2 - a.beta2 / (scale * scale)).abs() <= 1e-10 * a.beta2.abs().max(1e-300) / (scale * scale));
        prop_assert_eq!(a.admissible, b.admissible);
    }

    #[test]
    fn screening_is_idempotent_and_order_free(seed in any::<u64>(), n in 4usize..15, k in 1usize..6, theta in 0.0f64..0.2) {
        let mut rng = synth::rng(seed);
        let c = random_covariance(n, &mut rng).unwrap();
        let cand = gaussian_matrix(n, k, &mut rng);
        let ids = labels("c", k);
        let first = screen_candidates(&c, cand.as_ref(), &ids, theta).unwrap();

        let kept = Mat::from_fn(n, first.retained.len(), |i, j| cand[(i, first.retained[j])]);
        let kept_ids: Vec<String> = first.retained.iter().map(|&r| ids[r].clone()).collect();
        let again = screen_candidates(&c, kept.as_ref(), &kept_ids, theta).unwrap();
        prop_assert_eq!(again.retained.len(), first.retained.len());

        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let shuffled = Mat::from_fn(n, k, |i, j| cand[(i, perm[j])]);
        let shuffled_ids: Vec<String> = perm.iter().map(|&r| ids[r].clone()).collect();
        let other = screen_candidates(&c, shuffled.as_ref(), &shuffled_ids, theta).unwrap();
        prop_assert_eq!(other.retained_ids(), first.retained_ids());
    }

    #[test]
    fn pcs_are_orthonormal_and_permutation_invariant(seed in any::<u64>(), n in 4usize..15, k in 4usize..20, count in 1usize..4) {
        let mut rng = synth::rng(seed);
        let raw = gaussian_matrix(n, k, &mut rng);
        let pcs = compute_pcs(raw.as_ref(), count).unwrap();
        prop_assert!(linalg::orthonormality_defect(pcs.as_ref()) < 1e-10);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let permuted = Mat::from_fn(n, k, |i, j| raw[(i, perm[j])]);
        let other = compute_pcs(permuted.as_ref(), count).unwrap();
        prop_assert!(linalg::max_abs_diff(pcs.as_ref(), other.as_ref()) < 1e-8);
    }

    #[test]
    fn residual_mean_is_monotone(values in prop::collection::vec(0.01f64..10.0, 2..30)) {
        let mut values = values;
        values.sort_by(|a, b| b.total_cmp(a));
        let s = ReducedSpectrum::from_eigenvalues(values.clone());
        for (p, &lambda) in values.iter().enumerate().take(values.len() - 1) {
            let (f, g) = (s.residual_mean(p), s.residual_mean(p + 1));
            prop_assert!(g <= f * (1.0 + 1e-14));
            if lambda > f * (1.0 + 1e-12) {
                prop_assert!(g < f);
            }
        }
    }

    #[test]
    fn selected_dimension_shrinks_with_the_target(values in prop::collection::vec(0.01f64..10.0, 3..30), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let mut values = values;
        values.sort_by(|a, b| b.total_cmp(a));
        let s = ReducedSpectrum::from_eigenvalues(values.clone());
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let span = s.residual_mean(0) * 1.2;
        match (select_p(&s, lo * span), select_p(&s, hi * span)) {
            (Ok(a), Ok(b)) => prop_assert!(a >= b),
            (Err(_), _) => {}
            (Ok(_), Err(e)) => prop_assert!(false, "larger target failed: {e}"),
        }
    }

    #[test]
    fn restricted_fit_minimizes_residual_variance(seed in any::<u64>(), n in 4usize..15, d in 0usize..3) {
        let mut rng = synth::rng(seed);
        let p = rng.random_range(1..(n - d).max(2));
        prop_assume!(p < n - d);
        let c = random_covariance(n, &mut rng).unwrap();
        let basis = CovariateBasis::new(gaussian_matrix(n, d, &mut rng)).unwrap();
        if let Ok(fit) = fit_latent_restricted(&c, &basis, p) {
            let w = random_orthonormal(n - d, p, &mut rng);
            let x = basis.u2() * &w;
            prop_assert!(unexplained_variance(&c, &basis, x.as_ref()).unwrap() >= fit.sigma2 - 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn auto_fits_satisfy_their_conditions(seed in any::<u64>()) {
        let inst = common::random_fit(seed, (5, 25), 3);
        let fit = &inst.auto.fit;
        let report = &inst.auto.report;
        for c in fit.conditions().iter().filter(|c| c.name != "joint_cov_psd") {
            prop_assert!(c.holds, "condition {} fails: {} vs {}", c.name, c.lhs, c.rhs);
        }
        let spectrum = ReducedSpectrum::of(&inst.c, &inst.basis).unwrap();
        prop_assert_eq!(select_p(&spectrum, report.target_sigma2).unwrap(), report.p_final);
        prop_assert!(report.p_final >= report.p_initial);
        prop_assert!(fit.sigma2() <= report.target_sigma2 * (1.0 + 1e-12));
        let trail: Vec<f64> = report.retries.iter().map(|r| r.residual).collect();
        prop_assert!(trail.windows(2).all(|w| w[1] < w[0]));
        prop_assert!((fit.shares().sum() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn fits_are_orthogonal_to_covariates(seed in any::<u64>()) {
        let inst = common::random_fit(seed, (5, 25), 3);
        let fit = &inst.auto.fit;
        let z = inst.basis.z();
        let zx = linalg::max_abs((fit.latent().transpose() * z).as_ref());
        prop_assert!(zx < 1e-10 * linalg::max_abs(z).max(1.0));
        prop_assert!(linalg::orthonormality_defect(fit.latent()) < 1e-10);
        prop_assert!(linalg::orthonormality_defect(inst.basis.u1()) < 1e-10);
        prop_assert!(linalg::orthonormality_defect(inst.basis.u2()) < 1e-10);
        let k = assemble_k(z, fit.latent(), fit.params()).unwrap();
        prop_assert!(linalg::relative_frobenius(k.as_ref(), fit.k()) < 1e-12);
    }

    #[test]
    fn centering_is_idempotent_and_linear(seed in any::<u64>(), n in 1usize..8, m in 1usize..12, a in -3.0f64..3.0) {
        let mut rng = synth::rng(seed);
        let x = gaussian_matrix(n, m, &mut rng);
        let y = gaussian_matrix(n, m, &mut rng);
        let lab = |v: Mat<f64>| LabeledMatrix { values: v, row_ids: labels("s", n), col_ids: labels("g", m) };
        let cx = center_samples(lab(x.clone()));
        let twice = center_samples(lab(cx.values().to_owned()));
        prop_assert!(linalg::max_abs_diff(cx.values(), twice.values()) < 1e-15 * linalg::max_abs(x.as_ref()).max(1.0) * 8.0);
        let cy = center_samples(lab(y.clone()));
        let combo = center_samples(lab(&x * faer::Scale(a) + &y));
        let expect = cx.values() * faer::Scale(a) + cy.values();
        prop_assert!(linalg::max_abs_diff(combo.values(), expect.as_ref()) < 1e-12);
    }

    #[test]
    fn matrix_text_round_trips(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, exp in -200i32..200) {
        let mut rng = synth::rng(seed);
        let scale = 10f64.powi(exp);
        let v = gaussian_matrix(n, m, &mut rng) * faer::Scale(scale);
        let text = format_matrix(v.as_ref(), &labels("r", n), &labels("c", m), "id");
        let back = parse_matrix(&text, Layout::SamplesRows).unwrap();
        prop_assert_eq!(back.values, v);
    }

    #[test]
    fn correction_matches_dense_solve(seed in any::<u64>(), n in 3usize..10, m in 1usize..6) {
        let mut rng = synth::rng(seed);
        let k = spd(n, &mut rng);
        let model = GeneModel::new(k.clone()).unwrap();
        let y = synth::planted_expression(n, m, 0, 1, 2.0, &mut rng).y;
        let fits: Vec<_> = (0..m)
            .map(|g| fit_gene_variances(&model, &(0..n).map(|i| y.values()[(i, g)]).collect::<Vec<_>>()).unwrap())
            .collect();
        prop_assume!(fits.iter().all(|f| f.sigma2_c > 0.0 || f.sigma2_e > 0.0));
        let out = correct_residuals(&model, &y, &fits).unwrap();
        let mut dense = Mat::zeros(n, m);
        for (g, f) in fits.iter().enumerate() {
            let sigma = &k * faer::Scale(f.sigma2_c) + Mat::<f64>::identity(n, n) * faer::Scale(f.sigma2_e);
            let col = &k * dense_inverse(&sigma) * y.values().col(g);
            for i in 0..n {
                dense[(i, g)] = col[i];
            }
        }
        for i in 0..n {
            let mean = (0..m).map(|g| dense[(i, g)]).sum::<f64>() / m as f64;
            for g in 0..m {
                dense[(i, g)] -= mean;
            }
        }
        let scale = linalg::max_abs(dense.as_ref()).max(1.0);
        prop_assert!(linalg::max_abs_diff(out.values(), dense.as_ref()) < 1e-10 * scale);
    }

    #[test]
    fn lod_is_scale_invariant(seed in any::<u64>(), n in 3usize..12, c in prop_oneof![-50.0f64..-0.02, 0.02f64..50.0]) {
        let mut rng = synth::rng(seed);
        let model = GeneModel::new(spd(n, &mut rng)).unwrap();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let cs: Vec<f64> = s.iter().map(|v| v * c).collect();
        let fit = fit_gene_variances(&model, &y).unwrap();
        let a = lod_score(&model, &y, &s, &fit).unwrap();
        let b = lod_score(&model, &y, &cs, &fit).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn oracle_respects_the_unconstrained_bound(seed in any::<u64>(), n in 3usize..7, d in 0usize..2, p in 0usize..2) {
        prop_assume!(d + p < n);
        let mut rng = synth::rng(seed);
        let c = random_covariance(n, &mut rng).unwrap();
        let basis = CovariateBasis::new(gaussian_matrix(n, d, &mut rng)).unwrap();
        let oracle = oracle_maximize(&c, &basis, p, 2, seed).unwrap();
        prop_assert!(oracle.loglik <= log_likelihood(c.matrix(), &c).unwrap() + 1e-9);
    }
}

#[test]
fn auto_fit_without_covariates_is_the_latent_only_fit() {
    for seed in 0..20 {
        let mut rng = synth::rng(seed);
        let n = rng.random_range(5..20);
        let c = random_covariance(n, &mut rng).unwrap();
        let basis = CovariateBasis::empty(n);
        let config = FitConfig::new(rng.random_range(0.1..0.9), 0.0).unwrap();
        match fit_auto(&c, &basis, &config) {
            Ok(auto) => {
                let direct = fit_full(&c, &basis, auto.fit.p()).unwrap();
                assert!(linalg::relative_frobenius(auto.fit.k(), direct.k()) < 1e-14);
            }
            Err(Error::TargetUnreachable { .. } | Error::DegenerateSpectrum { .. }) => {}
            Err(e) => panic!("seed {seed}: {e}"),
        }
    }
}
