//! Covariance algebra for the space-time random effects.
//!
//! A per-site block of random effects has length `q = n_groups * n_time`
//! and is stacked time-major, group-minor: position `(t, k)` lives at
//! `t * n_groups + k`. Every module shares this layout.
//!
//! The nonseparable covariance is `Σ_η = A · blockdiag(G_1..G_T) · Aᵀ`
//! where `A` is block lower-triangular with diagonal `n_groups × n_groups`
//! blocks `A[t, s] = diag_k(R̃_k[t, s])` and `R̃_k` is the lower Cholesky
//! factor of the AR(1) correlation with parameter `ρ_k`. Because `R̃_k⁻¹`
//! is lower bidiagonal, `A⁻¹` is applied in `O(q)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Largest `n_groups * n_time` for which a dense `Σ_η` is materialized.
pub const MAX_DENSE_DIM: usize = 512;

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::InvalidRho(rho))
    }
}

/// AR(1) correlation `R(ρ)` with entries `ρ^|t − t'|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1Correlation {
    rho: f64,
    n_time: usize,
}

impl Ar1Correlation {
    pub fn new(rho: f64, n_time: usize) -> Result<Self> {
        check_rho(rho)?;
        Ok(Self { rho, n_time })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_time, self.n_time, |t, s| {
            self.rho.powi((t as i32 - s as i32).abs())
        })
    }

    /// Closed-form lower Cholesky factor: first column `ρ^t`, and
    /// `ρ^(t−j) · sqrt(1 − ρ²)` below the diagonal elsewhere.
    pub fn cholesky(&self) -> DMatrix<f64> {
        let c = (1.0 - self.rho * self.rho).sqrt();
        DMatrix::from_fn(self.n_time, self.n_time, |t, j| {
            if j > t {
                0.0
            } else if j == 0 {
                self.rho.powi(t as i32)
            } else {
                self.rho.powi((t - j) as i32) * c
            }
        })
    }

    /// (n_time − 1) · log(1 − ρ²).
    pub fn logdet(&self) -> f64 {
        (self.n_time.saturating_sub(1)) as f64 * (1.0 - self.rho * self.rho).ln()
    }
}

pub fn ar1_matrix(rho: f64, n_time: usize) -> Result<DMatrix<f64>> {
    Ok(Ar1Correlation::new(rho, n_time)?.matrix())
}

pub fn ar1_cholesky(rho: f64, n_time: usize) -> Result<DMatrix<f64>> {
    Ok(Ar1Correlation::new(rho, n_time)?.cholesky())
}

/// Applies `R̃⁻¹` using its bidiagonal form, so that `R̃ · out = series`.
pub fn ar1_whiten(series: &[f64], rho: f64) -> Result<Vec<f64>> {
    check_rho(rho)?;
    let mut out = vec![0.0; series.len()];
    whiten_strided(series, &mut out, 0, 1, rho);
    Ok(out)
}

/// Whitens the series `input[offset + t * stride]` into the same positions
/// of `out`.
#[inline]
fn whiten_strided(input: &[f64], out: &mut [f64], offset: usize, stride: usize, rho: f64) {
    let n = (input.len() - offset).div_ceil(stride);
    if n == 0 {
        return;
    }
    let inv_c = 1.0 / (1.0 - rho * rho).sqrt();
    out[offset] = input[offset];
    for t in 1..n {
        let i = offset + t * stride;
        out[i] = (input[i] - rho * input[i - stride]) * inv_c;
    }
}

/// The variance side of the model: `G_t` per time, `ρ_k` and `τ²_k` per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CovarianceSpecRepr", into = "CovarianceSpecRepr")]
pub struct CovarianceSpec {
    g_list: Vec<DMatrix<f64>>,
    rho: Vec<f64>,
    tau2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CovarianceSpecRepr {
    n_groups: usize,
    n_time: usize,
    /// `g[t][k][k']`
    g: Vec<Vec<Vec<f64>>>,
    rho: Vec<f64>,
    tau2: Vec<f64>,
}

impl From<CovarianceSpec> for CovarianceSpecRepr {
    fn from(spec: CovarianceSpec) -> Self {
        let g = spec
            .g_list
            .iter()
            .map(|m| {
                (0..m.nrows())
                    .map(|r| m.row(r).iter().copied().collect())
                    .collect()
            })
            .collect();
        Self {
            n_groups: spec.n_groups(),
            n_time: spec.n_time(),
            g,
            rho: spec.rho,
            tau2: spec.tau2,
        }
    }
}

impl TryFrom<CovarianceSpecRepr> for CovarianceSpec {
    type Error = Error;

    fn try_from(repr: CovarianceSpecRepr) -> Result<Self> {
        let mut g_list = Vec::with_capacity(repr.g.len());
        for rows in &repr.g {
            if rows.len() != repr.n_groups || rows.iter().any(|r| r.len() != repr.n_groups) {
                return Err(Error::DimensionMismatch {
                    context: "G_t rows",
                    expected: repr.n_groups,
                    actual: rows.len(),
                });
            }
            g_list.push(DMatrix::from_fn(repr.n_groups, repr.n_groups, |r, c| {
                rows[r][c]
            }));
        }
        if g_list.len() != repr.n_time {
            return Err(Error::DimensionMismatch {
                context: "number of G_t",
                expected: repr.n_time,
                actual: g_list.len(),
            });
        }
        CovarianceSpec::new(g_list, repr.rho, repr.tau2)
    }
}

impl CovarianceSpec {
    pub fn new(g_list: Vec<DMatrix<f64>>, rho: Vec<f64>, tau2: Vec<f64>) -> Result<Self> {
        let n_groups = rho.len();
        if g_list.is_empty() {
            return Err(Error::Config("at least one time point is required".into()));
        }
        if n_groups == 0 {
            return Err(Error::Config("at least one group is required".into()));
        }
        if tau2.len() != n_groups {
            return Err(Error::DimensionMismatch {
                context: "tau2 length",
                expected: n_groups,
                actual: tau2.len(),
            });
        }
        for (t, g) in g_list.iter().enumerate() {
            if g.nrows() != n_groups || g.ncols() != n_groups {
                return Err(Error::DimensionMismatch {
                    context: "G_t dimension",
                    expected: n_groups,
                    actual: g.nrows(),
                });
            }
            if !linalg::is_spd(g) {
                return Err(Error::NotPositiveDefinite(format!("G_{}", t + 1)));
            }
        }
        for &r in &rho {
            check_rho(r)?;
        }
        if let Some(&bad) = tau2.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("tau2 must be positive, got {bad}")));
        }
        Ok(Self { g_list, rho, tau2 })
    }

    /// Separable special case: `G_t ≡ g` and `ρ_k ≡ rho`.
    pub fn separable(g: DMatrix<f64>, rho: f64, tau2: Vec<f64>, n_time: usize) -> Result<Self> {
        let n_groups = g.nrows();
        Self::new(vec![g; n_time], vec![rho; n_groups], tau2)
    }

    pub fn n_groups(&self) -> usize {
        self.rho.len()
    }

    pub fn n_time(&self) -> usize {
        self.g_list.len()
    }

    /// Block length `n_groups * n_time`.
    pub fn block_len(&self) -> usize {
        self.n_groups() * self.n_time()
    }

    pub fn g_list(&self) -> &[DMatrix<f64>] {
        &self.g_list
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn tau2(&self) -> &[f64] {
        &self.tau2
    }

    pub fn set_g(&mut self, t: usize, g: DMatrix<f64>) -> Result<()> {
        if !linalg::is_spd(&g) {
            return Err(Error::NotPositiveDefinite(format!("G_{}", t + 1)));
        }
        self.g_list[t] = g;
        Ok(())
    }

    pub fn set_rho(&mut self, k: usize, rho: f64) -> Result<()> {
        check_rho(rho)?;
        self.rho[k] = rho;
        Ok(())
    }

    pub fn set_tau2(&mut self, k: usize, tau2: f64) {
        self.tau2[k] = tau2;
    }

    pub fn with_rho(&self, rho: Vec<f64>) -> Result<Self> {
        Self::new(self.g_list.clone(), rho, self.tau2.clone())
    }
}

/// Dense `A` with `A[(t,k), (s,k)] = R̃_k[t, s]`.
pub fn mixing_matrix(rho_list: &[f64], n_time: usize) -> Result<DMatrix<f64>> {
    let n_groups = rho_list.len();
    let q = n_groups * n_time;
    let mut a = DMatrix::zeros(q, q);
    for (k, &rho) in rho_list.iter().enumerate() {
        let chol = ar1_cholesky(rho, n_time)?;
        for t in 0..n_time {
            for s in 0..=t {
                a[(t * n_groups + k, s * n_groups + k)] = chol[(t, s)];
            }
        }
    }
    Ok(a)
}

/// Dense `Σ_η = A · blockdiag(G_t) · Aᵀ`.
pub fn assemble_sigma_eta(spec: &CovarianceSpec) -> Result<DMatrix<f64>> {
    let (ng, nt) = (spec.n_groups(), spec.n_time());
    let q = ng * nt;
    if q > MAX_DENSE_DIM {
        return Err(Error::Config(format!(
            "dense Σ_η of dimension {q} exceeds the {MAX_DENSE_DIM} limit"
        )));
    }
    for (t, g) in spec.g_list().iter().enumerate() {
        if !linalg::is_spd(g) {
            return Err(Error::NotPositiveDefinite(format!("G_{}", t + 1)));
        }
    }
    let a = mixing_matrix(spec.rho(), nt)?;
    let mut b = DMatrix::zeros(q, q);
    for (t, g) in spec.g_list().iter().enumerate() {
        b.view_mut((t * ng, t * ng), (ng, ng)).copy_from(g);
    }
    Ok(linalg::symmetrize(&(&a * b * a.transpose())))
}

/// Applies `A⁻¹`: each group's time series is AR(1)-whitened, so that
/// `A · out = increment`.
pub fn whiten_increment(increment: &[f64], rho_list: &[f64]) -> Result<Vec<f64>> {
    let ng = rho_list.len();
    if ng == 0 || !increment.len().is_multiple_of(ng) {
        return Err(Error::DimensionMismatch {
            context: "increment length (multiple of n_groups)",
            expected: ng,
            actual: increment.len(),
        });
    }
    for &r in rho_list {
        check_rho(r)?;
    }
    let mut out = vec![0.0; increment.len()];
    whiten_into(increment, rho_list, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn whiten_into(increment: &[f64], rho_list: &[f64], out: &mut [f64]) {
    let ng = rho_list.len();
    for (k, &rho) in rho_list.iter().enumerate() {
        whiten_strided(increment, out, k, ng, rho);
    }
}

/// `log|Σ_η| = Σ_k (N_t − 1) log(1 − ρ_k²) + Σ_t log|G_t|`.
pub fn sigma_eta_logdet(spec: &CovarianceSpec) -> Result<f64> {
    let nt = spec.n_time();
    let mut total = 0.0;
    for &rho in spec.rho() {
        total += Ar1Correlation::new(rho, nt)?.logdet();
    }
    for (t, g) in spec.g_list().iter().enumerate() {
        total += linalg::logdet_spd(g, &format!("G_{}", t + 1))?;
    }
    Ok(total)
}

/// Factored `Σ_η` with cached `G_t⁻¹`; evaluates `xᵀ Σ_η⁻¹ x` and the
/// dense precision without forming `Σ_η`.
#[derive(Debug, Clone)]
pub struct SigmaEtaFactor {
    rho: Vec<f64>,
    g_inv: Vec<DMatrix<f64>>,
    logdet: f64,
}

impl SigmaEtaFactor {
    pub fn new(spec: &CovarianceSpec) -> Result<Self> {
        let mut g_inv = Vec::with_capacity(spec.n_time());
        for (t, g) in spec.g_list().iter().enumerate() {
            g_inv.push(linalg::inverse_spd(g, &format!("G_{}", t + 1))?);
        }
        Ok(Self {
            rho: spec.rho().to_vec(),
            g_inv,
            logdet: sigma_eta_logdet(spec)?,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.rho.len()
    }

    pub fn n_time(&self) -> usize {
        self.g_inv.len()
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn g_inv(&self) -> &[DMatrix<f64>] {
        &self.g_inv
    }

    /// `xᵀ Σ_η⁻¹ x = Σ_t d_tᵀ G_t⁻¹ d_t` with `d = A⁻¹ x`.
    pub fn quad_form(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        whiten_into(x, &self.rho, scratch);
        let ng = self.n_groups();
        let mut total = 0.0;
        for (t, ginv) in self.g_inv.iter().enumerate() {
            let d = &scratch[t * ng..(t + 1) * ng];
            for a in 0..ng {
                let mut row = 0.0;
                for b in 0..ng {
                    row += ginv[(a, b)] * d[b];
                }
                total += d[a] * row;
            }
        }
        total
    }

    /// Dense `Σ_η⁻¹ = A⁻ᵀ · blockdiag(G_t⁻¹) · A⁻¹`.
    pub fn precision(&self) -> DMatrix<f64> {
        let ng = self.n_groups();
        let nt = self.n_time();
        let q = ng * nt;
        // Columns of A⁻¹ are the whitened unit vectors.
        let mut a_inv = DMatrix::zeros(q, q);
        let mut unit = vec![0.0; q];
        let mut col = vec![0.0; q];
        for j in 0..q {
            unit[j] = 1.0;
            whiten_into(&unit, &self.rho, &mut col);
            unit[j] = 0.0;
            for i in 0..q {
                a_inv[(i, j)] = col[i];
            }
        }
        let mut b_inv = DMatrix::zeros(q, q);
        for (t, g) in self.g_inv.iter().enumerate() {
            b_inv.view_mut((t * ng, t * ng), (ng, ng)).copy_from(g);
        }
        linalg::symmetrize(&(a_inv.transpose() * b_inv * &a_inv))
    }
}
