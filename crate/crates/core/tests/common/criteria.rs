//! Measurements shared by the oracle tests and the acceptance report.

use mstcar::covariance::{ar1_cholesky, ar1_whiten, assemble_sigma_eta, CovarianceSpec};
use mstcar::graph::spectral_basis;
use mstcar::io::builtin;
use mstcar::random::std_normal;
use mstcar::simstudy::sample_field;
use nalgebra::DVector;
use rand::Rng;

use super::{dense_ar1, kron, random_spd, random_spec, rng};

pub const AR1_RHOS: [f64; 4] = [0.0, 0.3, 0.8, 0.99];
pub const AR1_LENGTHS: [usize; 3] = [2, 10, 19];

/// Largest entrywise error of the closed-form Cholesky factor and of the
/// bidiagonal whitening, against a dense Cholesky and a dense triangular solve.
pub fn ar1_errors() -> (f64, f64) {
    let mut r = rng(3);
    let (mut chol_err, mut whiten_err) = (0.0f64, 0.0f64);
    for &rho in &AR1_RHOS {
        for &nt in &AR1_LENGTHS {
            let dense = dense_ar1(rho, nt).cholesky().unwrap().l();
            let closed = ar1_cholesky(rho, nt).unwrap();
            chol_err = chol_err.max((&closed - &dense).amax());

            let series: Vec<f64> = (0..nt).map(|_| std_normal(&mut r)).collect();
            let solved = dense
                .solve_lower_triangular(&DVector::from_column_slice(&series))
                .unwrap();
            let fast = ar1_whiten(&series, rho).unwrap();
            whiten_err = whiten_err.max((DVector::from_vec(fast) - solved).amax());
        }
    }
    (chol_err, whiten_err)
}

/// Largest entrywise |Σ_η − R(ρ)⊗G| over random separable specs with
/// N_g ≤ 4 and N_t ≤ 19.
pub fn kronecker_error(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let ng = r.random_range(1..=4);
        let nt = r.random_range(1..=19);
        let g = random_spd(ng, &mut r);
        let rho = r.random_range(0.0..0.99);
        let tau2 = vec![1.0; ng];
        let spec = CovarianceSpec::separable(g.clone(), rho, tau2, nt).unwrap();
        let sigma = assemble_sigma_eta(&spec).unwrap();
        worst = worst.max((sigma - kron(&dense_ar1(rho, nt), &g)).amax());
    }
    worst
}

/// Largest |Σ_i Z_ikt| over `draws` fields on the shipped 58-site graph.
pub fn field_sum_error(draws: usize, seed: u64) -> f64 {
    let graph = builtin::graph("california58").unwrap();
    let basis = spectral_basis(&graph).unwrap();
    let mut r = rng(seed);
    let spec = random_spec(2, 3, &mut r);
    let q = spec.block_len();
    let ns = graph.n_sites();
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let z = sample_field(&spec, &basis, &mut r).unwrap();
        for c in 0..q {
            let s: f64 = (0..ns).map(|i| z[i * q + c]).sum();
            worst = worst.max(s.abs());
        }
    }
    worst
}

/// (name, n_sites, rank of D − W) for every shipped graph.
pub fn shipped_ranks() -> Vec<(&'static str, usize, usize)> {
    builtin::NAMES
        .iter()
        .map(|&name| {
            let g = builtin::graph(name).unwrap();
            (name, g.n_sites(), spectral_basis(&g).unwrap().rank())
        })
        .collect()
}
