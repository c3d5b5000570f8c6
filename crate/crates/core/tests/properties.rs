//! Randomized invariants.

mod common;

use common::*;
use mstcar::covariance::{
    ar1_matrix, assemble_sigma_eta, sigma_eta_logdet, whiten_increment, CovarianceSpec,
};
use mstcar::diagnostics::{dic, nationwide_trend, sigma_eta_summary, IntervalSummary};
use mstcar::graph::{laplacian_quadratic_form, spectral_basis};
use mstcar::model::{log_likelihood, mstcar_log_prior};
use mstcar::random::std_normal;
use mstcar::sampler::{run_chain_from, SamplerConfig, Variant};
use mstcar::simstudy::sample_field;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn cfg() -> ProptestConfig {
    ProptestConfig::with_cases(48)
}

fn short_run(
    seed: u64,
    variant: Variant,
    with_missing: bool,
) -> (Instance, mstcar::sampler::PosteriorSamples) {
    let inst = instance_with(seed, variant, with_missing);
    let config = SamplerConfig {
        n_iterations: 40,
        burn_in: 10,
        thin: 2,
        variant,
        seed,
        ..SamplerConfig::default()
    };
    let out = run_chain_from(
        &inst.data,
        &inst.graph,
        &inst.prior,
        &config,
        inst.state.clone(),
    )
    .unwrap();
    (inst, out)
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn laplacian_null_space_and_rank(seed in any::<u64>(), n in 2usize..12) {
        let g = random_graph(n, &mut rng(seed));
        let l = g.laplacian();
        prop_assert!((l * DVector::from_element(n, 1.0)).amax() == 0.0);
        let b = spectral_basis(&g).unwrap();
        prop_assert_eq!(b.rank(), n - 1);
        let v = &b.eigenvectors;
        prop_assert!((v.transpose() * v - DMatrix::identity(n, n)).amax() <= 1e-10);
        prop_assert!((b.reconstruct() - g.laplacian()).amax() <= 1e-9);
        // The null eigenvector is constant.
        let c = v.column(0);
        prop_assert!((c.max() - c.min()).abs() <= 1e-9);
    }

    #[test]
    fn quadratic_form_matches_dense(seed in any::<u64>(), n in 2usize..=8, q in 1usize..=3) {
        let mut r = rng(seed);
        let g = random_graph(n, &mut r);
        let p = random_spd(q, &mut r);
        let z: Vec<f64> = (0..n * q).map(|_| std_normal(&mut r)).collect();
        let dense = {
            let v = DVector::from_column_slice(&z);
            (v.transpose() * kron(&g.laplacian(), &p) * &v)[(0, 0)]
        };
        let fast = laplacian_quadratic_form(&g, &z, &p).unwrap();
        prop_assert!((fast - dense).abs() <= 1e-10 * dense.abs().max(1.0));
    }

    #[test]
    fn separable_spec_is_kronecker(seed in any::<u64>(), ng in 1usize..=4, nt in 1usize..=19, rho in 0.0f64..0.99) {
        let g = random_spd(ng, &mut rng(seed));
        let spec = CovarianceSpec::separable(g.clone(), rho, vec![1.0; ng], nt).unwrap();
        let want = kron(&ar1_matrix(rho, nt).unwrap(), &g);
        prop_assert!((assemble_sigma_eta(&spec).unwrap() - want).amax() <= 1e-10);
    }

    #[test]
    fn mixing_then_whitening_is_identity(seed in any::<u64>(), ng in 1usize..=4, nt in 1usize..=12) {
        let mut r = rng(seed);
        let rho: Vec<f64> = (0..ng).map(|_| rand::Rng::random_range(&mut r, 0.0..0.99)).collect();
        let x = DVector::from_fn(ng * nt, |_, _| std_normal(&mut r));
        let mixed = dense_mixing(&rho, nt) * &x;
        let back = whiten_increment(mixed.as_slice(), &rho).unwrap();
        prop_assert!((DVector::from_vec(back) - x).amax() <= 1e-12 * 1e3);
    }

    #[test]
    fn sigma_eta_is_spd_with_factored_determinant(seed in any::<u64>(), ng in 1usize..=3, nt in 1usize..=6) {
        let spec = random_spec(ng, nt, &mut rng(seed));
        let sigma = assemble_sigma_eta(&spec).unwrap();
        prop_assert!((&sigma - sigma.transpose()).amax() == 0.0);
        let chol = sigma.cholesky();
        prop_assert!(chol.is_some());
        let dense = chol.unwrap().l().diagonal().map(f64::ln).sum() * 2.0;
        prop_assert!((sigma_eta_logdet(&spec).unwrap() - dense).abs() <= 1e-9);
    }

    #[test]
    fn prior_ignores_constant_shifts(seed in any::<u64>(), n in 2usize..8) {
        let mut r = rng(seed);
        let g = random_graph(n, &mut r);
        let spec = random_spec(2, 2, &mut r);
        let z: Vec<f64> = (0..n * 4).map(|_| std_normal(&mut r)).collect();
        let shift: Vec<f64> = (0..4).map(|_| 10.0 * std_normal(&mut r)).collect();
        let moved: Vec<f64> = z.iter().enumerate().map(|(i, v)| v + shift[i % 4]).collect();
        let a = mstcar_log_prior(&z, &g, &spec).unwrap();
        let b = mstcar_log_prior(&moved, &g, &spec).unwrap();
        prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
    }

    #[test]
    fn likelihood_splits_into_observed_and_unobserved(seed in any::<u64>()) {
        let inst = instance(seed, Variant::Mstcar);
        let full = log_likelihood(&inst.data, &inst.state, false).unwrap();
        let obs = log_likelihood(&inst.data, &inst.state, true).unwrap();
        let c = inst.data.missing_cells()[0];
        let var = inst.state.spec.tau2()[inst.data.group_of(c)] / inst.data.pop()[c];
        let res = inst.state.y_imputed[0] - inst.data.linear_predictor(c, &inst.state.beta) - inst.state.z[c];
        let unobs = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * res * res / var;
        prop_assert!((full - obs - unobs).abs() <= 1e-10);
    }

    #[test]
    fn fields_are_centered(seed in any::<u64>(), n in 2usize..10) {
        let mut r = rng(seed);
        let g = random_graph(n, &mut r);
        let spec = random_spec(2, 3, &mut r);
        let z = sample_field(&spec, &spectral_basis(&g).unwrap(), &mut r).unwrap();
        for c in 0..6 {
            let s: f64 = (0..n).map(|i| z[i * 6 + c]).sum();
            prop_assert!(s.abs() <= 1e-9);
        }
    }

    #[test]
    fn intervals_are_ordered(draws in prop::collection::vec(-1e6f64..1e6, 1..200)) {
        let s = IntervalSummary::from_draws(&draws);
        prop_assert!(s.lower <= s.median && s.median <= s.upper);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dic_identities_hold(seed in any::<u64>()) {
        let (inst, out) = short_run(seed, Variant::Mstcar, true);
        let d = dic(&out, &inst.data).unwrap();
        prop_assert_eq!(d.dic, d.d_bar + d.p_d);
        prop_assert_eq!(d.p_d, d.d_bar - d.d_at_mean);
    }

    #[test]
    fn trend_ignores_population_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let (inst, out) = short_run(seed, Variant::Mstcar, false);
        let scaled: Vec<f64> = inst.data.pop().iter().map(|p| p * scale).collect();
        let other = inst.data.with_populations(scaled).unwrap();
        for k in 0..2 {
            let a = nationwide_trend(&out, &inst.data, k).unwrap();
            let b = nationwide_trend(&out, &other, k).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.median - y.median).abs() <= 1e-9 * x.median.abs().max(1.0));
                prop_assert!((x.lower - y.lower).abs() <= 1e-9 * x.lower.abs().max(1.0));
            }
        }
    }

    #[test]
    fn separable_variances_are_constant_in_time(seed in any::<u64>()) {
        let (_, out) = short_run(seed, Variant::Separable, true);
        let s = sigma_eta_summary(&out).unwrap();
        for t in 1..s.variances.len() {
            for k in 0..s.variances[t].len() {
                prop_assert!((s.variances[t][k].median - s.variances[0][k].median).abs() <= 1e-10);
            }
        }
    }
}
