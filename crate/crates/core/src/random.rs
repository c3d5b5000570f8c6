//! Random draws not covered by `rand_distr`, and the seed-splitting scheme.
//!
//! Every random stream is a `ChaCha8Rng`. Child seeds are derived from a
//! parent seed and a sequence of tags with SplitMix64 mixing, so a
//! replicate's data and fits depend only on `(seed, replicate, purpose)`
//! and never on thread scheduling.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Child seed for `(seed, tags...)`.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw from InvGamma(shape, rate), density ∝ x^(−shape−1) e^(−rate/x).
pub fn inv_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let gamma = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Config(format!("inverse-gamma({shape}, {rate}): {e}")))?;
    Ok(1.0 / gamma.sample(rng))
}

/// Draw from InvWish(scale, df) through the Bartlett decomposition of the
/// Wishart(scale⁻¹, df) precision.
pub fn inv_wishart<R: Rng + ?Sized>(
    scale: &DMatrix<f64>,
    df: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if !(df > p as f64 - 1.0) {
        return Err(Error::Config(format!(
            "inverse-Wishart df {df} must exceed {}",
            p as f64 - 1.0
        )));
    }
    let precision = linalg::inverse_spd(scale, "inverse-Wishart scale")?;
    let l = linalg::cholesky(&precision, "inverse-Wishart precision")?.l();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| Error::Config(format!("chi-squared draw: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    // W = M Mᵀ with M = L A lower-triangular, so W⁻¹ = M⁻ᵀ M⁻¹.
    let m = l * a;
    let m_inv = m
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::NotPositiveDefinite("Wishart factor".into()))?;
    Ok(linalg::symmetrize(&(m_inv.transpose() * m_inv)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_and_repeat() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn inverse_wishart_monte_carlo_mean() {
        // E[X] = scale / (df − p − 1).
        let scale = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let df = 9.0;
        let mut rng = rng_from_seed(11);
        let n = 40_000;
        let mut mean = DMatrix::zeros(2, 2);
        for _ in 0..n {
            mean += inv_wishart(&scale, df, &mut rng).unwrap();
        }
        mean /= n as f64;
        let want = &scale / (df - 3.0);
        assert!((mean - &want).amax() < 0.03, "{want}");
    }

    #[test]
    fn inverse_gamma_monte_carlo_mean() {
        // E[X] = rate / (shape − 1).
        let mut rng = rng_from_seed(3);
        let n = 50_000;
        let mean: f64 = (0..n)
            .map(|_| inv_gamma(6.0, 10.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 2.0).abs() < 0.03);
    }
}
