//! Log densities of the hierarchical model: the Gaussian rate likelihood,
//! the improper MSTCAR prior on the random effects, and the hyperpriors.
//!
//! Constants of improper densities (the CAR normalizer and the `τ²`
//! prior) are dropped everywhere. Samplers and DIC only use differences,
//! so results do not depend on them.

use std::f64::consts::{LN_2, PI};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::covariance::{assemble_sigma_eta, CovarianceSpec, SigmaEtaFactor};
use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::linalg;

/// Population (in units of 100,000) given to cells without data: one person.
pub const SENTINEL_POPULATION: f64 = 1e-5;

/// Rates `y[i,k,t]` per 100,000, populations in units of 100,000, and
/// `p` covariates per cell.
///
/// Cells are stored site-major with the per-site block laid out
/// time-major, group-minor (see [`crate::covariance`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateDataset {
    n_sites: usize,
    n_groups: usize,
    n_time: usize,
    n_covariates: usize,
    y: Vec<f64>,
    pop: Vec<f64>,
    x: Vec<f64>,
    observed: Vec<bool>,
}

impl RateDataset {
    /// `y`, `pop` and `observed` have one entry per cell; `x` has
    /// `n_covariates` entries per cell. Unobserved cells get the sentinel
    /// population and their `y` is ignored.
    pub fn new(
        n_sites: usize,
        n_groups: usize,
        n_time: usize,
        n_covariates: usize,
        mut y: Vec<f64>,
        mut pop: Vec<f64>,
        x: Vec<f64>,
        observed: Vec<bool>,
    ) -> Result<Self> {
        let cells = n_sites * n_groups * n_time;
        let lengths = [
            ("y length", y.len()),
            ("pop length", pop.len()),
            ("mask length", observed.len()),
        ];
        for (context, len) in lengths {
            if len != cells {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: cells,
                    actual: len,
                });
            }
        }
        if x.len() != cells * n_covariates {
            return Err(Error::DimensionMismatch {
                context: "covariate length",
                expected: cells * n_covariates,
                actual: x.len(),
            });
        }
        if n_covariates == 0 {
            return Err(Error::Config("at least one covariate is required".into()));
        }
        for c in 0..cells {
            if observed[c] {
                if !(pop[c] > 0.0 && pop[c].is_finite()) {
                    return Err(Error::Config(format!(
                        "observed cell {c} has non-positive population {}",
                        pop[c]
                    )));
                }
                if !y[c].is_finite() {
                    return Err(Error::Config(format!(
                        "observed cell {c} has a non-finite rate"
                    )));
                }
            } else {
                pop[c] = SENTINEL_POPULATION;
                y[c] = 0.0;
            }
        }
        Ok(Self {
            n_sites,
            n_groups,
            n_time,
            n_covariates,
            y,
            pop,
            x,
            observed,
        })
    }

    /// Dataset whose covariates are one intercept per time point, so
    /// `β_k[t]` is the intercept of group `k` at time `t`.
    pub fn with_time_intercepts(
        n_sites: usize,
        n_groups: usize,
        n_time: usize,
        y: Vec<f64>,
        pop: Vec<f64>,
        observed: Vec<bool>,
    ) -> Result<Self> {
        let q = n_groups * n_time;
        let cells = n_sites * q;
        let mut x = vec![0.0; cells * n_time];
        for c in 0..cells {
            let t = (c % q) / n_groups;
            x[c * n_time + t] = 1.0;
        }
        Self::new(n_sites, n_groups, n_time, n_time, y, pop, x, observed)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }
    pub fn n_groups(&self) -> usize {
        self.n_groups
    }
    pub fn n_time(&self) -> usize {
        self.n_time
    }
    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }
    /// Per-site block length `n_groups * n_time`.
    pub fn block_len(&self) -> usize {
        self.n_groups * self.n_time
    }
    pub fn n_cells(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn cell(&self, site: usize, group: usize, time: usize) -> usize {
        site * self.block_len() + time * self.n_groups + group
    }

    /// Group index of a cell.
    #[inline]
    pub fn group_of(&self, cell: usize) -> usize {
        cell % self.n_groups
    }

    /// `(site, group, time)` of a cell.
    pub fn coords(&self, cell: usize) -> (usize, usize, usize) {
        let q = self.block_len();
        (cell / q, cell % self.n_groups, (cell % q) / self.n_groups)
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }
    pub fn pop(&self) -> &[f64] {
        &self.pop
    }
    pub fn observed(&self) -> &[bool] {
        &self.observed
    }
    #[inline]
    pub fn covariates(&self, cell: usize) -> &[f64] {
        &self.x[cell * self.n_covariates..(cell + 1) * self.n_covariates]
    }

    /// Unobserved cell indices, ascending. `ModelState::y_imputed` follows
    /// this order.
    pub fn missing_cells(&self) -> Vec<usize> {
        (0..self.n_cells()).filter(|&c| !self.observed[c]).collect()
    }

    /// `xᵀβ_k` for a cell.
    #[inline]
    pub fn linear_predictor(&self, cell: usize, beta: &[Vec<f64>]) -> f64 {
        let b = &beta[self.group_of(cell)];
        self.covariates(cell)
            .iter()
            .zip(b)
            .map(|(x, b)| x * b)
            .sum()
    }

    /// Observed `y` with imputed values filled into unobserved cells.
    pub fn completed_y(&self, y_imputed: &[f64]) -> Vec<f64> {
        let mut y = self.y.clone();
        let mut it = y_imputed.iter();
        for (c, value) in y.iter_mut().enumerate() {
            if !self.observed[c] {
                *value = *it.next().expect("imputed length checked by caller");
            }
        }
        y
    }

    /// Same data with populations replaced (unobserved cells keep the
    /// sentinel).
    pub fn with_populations(&self, pop: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_sites,
            self.n_groups,
            self.n_time,
            self.n_covariates,
            self.y.clone(),
            pop,
            self.x.clone(),
            self.observed.clone(),
        )
    }
}

/// One configuration of every unknown in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    /// `beta[k]` holds the `p` coefficients of group `k`.
    pub beta: Vec<Vec<f64>>,
    /// Site-major random effects, same layout as the dataset cells.
    pub z: Vec<f64>,
    pub spec: CovarianceSpec,
    /// Values of the unobserved cells, in `missing_cells()` order.
    pub y_imputed: Vec<f64>,
}

impl ModelState {
    pub fn check(&self, data: &RateDataset) -> Result<()> {
        let dims = [
            ("beta groups", data.n_groups(), self.beta.len()),
            ("z length", data.n_cells(), self.z.len()),
            ("spec groups", data.n_groups(), self.spec.n_groups()),
            ("spec time points", data.n_time(), self.spec.n_time()),
            (
                "imputed length",
                data.observed().iter().filter(|o| !**o).count(),
                self.y_imputed.len(),
            ),
        ];
        for (context, expected, actual) in dims {
            if expected != actual {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    actual,
                });
            }
        }
        if let Some(b) = self.beta.iter().find(|b| b.len() != data.n_covariates()) {
            return Err(Error::DimensionMismatch {
                context: "beta length",
                expected: data.n_covariates(),
                actual: b.len(),
            });
        }
        Ok(())
    }
}

/// Hyperparameters: `ρ_k ~ Beta(a, b)` and `G_t ~ InvWish(scale, df)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub rho_beta_a: f64,
    pub rho_beta_b: f64,
    #[serde(with = "matrix_rows")]
    pub g_scale: DMatrix<f64>,
    pub g_df: f64,
}

impl PriorConfig {
    /// Beta(9, 1) on each `ρ_k` and a vague `InvWish(N_g · I, N_g + 2)`.
    pub fn default_for(n_groups: usize) -> Self {
        Self {
            rho_beta_a: 9.0,
            rho_beta_b: 1.0,
            g_scale: DMatrix::identity(n_groups, n_groups) * n_groups as f64,
            g_df: n_groups as f64 + 2.0,
        }
    }

    pub fn validate(&self, n_groups: usize) -> Result<()> {
        if !(self.rho_beta_a > 0.0 && self.rho_beta_b > 0.0) {
            return Err(Error::Config(
                "Beta prior parameters must be positive".into(),
            ));
        }
        if self.g_scale.nrows() != n_groups || self.g_scale.ncols() != n_groups {
            return Err(Error::DimensionMismatch {
                context: "prior scale dimension",
                expected: n_groups,
                actual: self.g_scale.nrows(),
            });
        }
        if !linalg::is_spd(&self.g_scale) {
            return Err(Error::NotPositiveDefinite("prior scale matrix".into()));
        }
        if !(self.g_df > n_groups as f64 - 1.0) {
            return Err(Error::Config(format!(
                "inverse-Wishart df {} must exceed n_groups - 1 = {}",
                self.g_df,
                n_groups as f64 - 1.0
            )));
        }
        Ok(())
    }
}

pub(crate) mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|r| m.row(r).iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }
}

/// Gaussian log density of the rates given `xᵀβ_k + Z` and variance
/// `τ²_k / n`. With `observed_only` the unobserved (imputed) cells are
/// skipped.
pub fn log_likelihood(data: &RateDataset, state: &ModelState, observed_only: bool) -> Result<f64> {
    state.check(data)?;
    Ok(log_likelihood_parts(data, state, true, !observed_only))
}

/// Log likelihood over the observed cells and/or the unobserved cells.
pub(crate) fn log_likelihood_parts(
    data: &RateDataset,
    state: &ModelState,
    observed: bool,
    unobserved: bool,
) -> f64 {
    let tau2 = state.spec.tau2();
    let mut imputed = state.y_imputed.iter();
    let mut total = 0.0;
    for c in 0..data.n_cells() {
        let is_obs = data.observed()[c];
        let y = if is_obs {
            data.y()[c]
        } else {
            *imputed.next().expect("imputed length")
        };
        if (is_obs && !observed) || (!is_obs && !unobserved) {
            continue;
        }
        let var = tau2[data.group_of(c)] / data.pop()[c];
        let resid = y - data.linear_predictor(c, &state.beta) - state.z[c];
        total += -0.5 * (2.0 * PI * var).ln() - 0.5 * resid * resid / var;
    }
    total
}

/// Log likelihood of the observed cells at an arbitrary `(β, Z, τ²)`,
/// e.g. posterior means.
pub fn observed_log_likelihood(
    data: &RateDataset,
    beta: &[Vec<f64>],
    z: &[f64],
    tau2: &[f64],
) -> f64 {
    (0..data.n_cells())
        .filter(|&c| data.observed()[c])
        .map(|c| {
            let var = tau2[data.group_of(c)] / data.pop()[c];
            let resid = data.y()[c] - data.linear_predictor(c, beta) - z[c];
            -0.5 * (2.0 * PI * var).ln() - 0.5 * resid * resid / var
        })
        .sum()
}

/// `−((N_s − 1)/2) log|Σ_η| − ½ Zᵀ((D − W) ⊗ Σ_η⁻¹)Z`, without the
/// normalizing constant.
pub fn mstcar_log_prior(z: &[f64], graph: &AdjacencyGraph, spec: &CovarianceSpec) -> Result<f64> {
    let factor = SigmaEtaFactor::new(spec)?;
    mstcar_log_prior_factored(z, graph, &factor)
}

pub fn mstcar_log_prior_factored(
    z: &[f64],
    graph: &AdjacencyGraph,
    factor: &SigmaEtaFactor,
) -> Result<f64> {
    let q = factor.n_groups() * factor.n_time();
    if z.len() != graph.n_sites() * q {
        return Err(Error::DimensionMismatch {
            context: "field length",
            expected: graph.n_sites() * q,
            actual: z.len(),
        });
    }
    let mut diff = vec![0.0; q];
    let mut scratch = vec![0.0; q];
    let mut quad = 0.0;
    for &(a, b) in graph.edges() {
        for c in 0..q {
            diff[c] = z[a * q + c] - z[b * q + c];
        }
        quad += factor.quad_form(&diff, &mut scratch);
    }
    Ok(-0.5 * (graph.n_sites() - 1) as f64 * factor.logdet() - 0.5 * quad)
}

/// Mean and covariance of one site's block given all other sites:
/// the neighbor average and `Σ_η / m_i`.
pub fn conditional_z_params(
    site: usize,
    z: &[f64],
    graph: &AdjacencyGraph,
    spec: &CovarianceSpec,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let q = spec.block_len();
    if z.len() != graph.n_sites() * q {
        return Err(Error::DimensionMismatch {
            context: "field length",
            expected: graph.n_sites() * q,
            actual: z.len(),
        });
    }
    let nbrs = graph.neighbors(site);
    if nbrs.is_empty() {
        return Err(Error::IsolatedSite { site: site + 1 });
    }
    let m = nbrs.len() as f64;
    let mut mean = DVector::zeros(q);
    for &j in nbrs {
        for c in 0..q {
            mean[c] += z[j * q + c];
        }
    }
    mean /= m;
    let cov = assemble_sigma_eta(spec)? / m;
    Ok((mean, cov))
}

/// log Beta(x | a, b), including the normalizer.
pub fn log_beta_density(x: f64, a: f64, b: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) {
        return f64::NEG_INFINITY;
    }
    let ln_b = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    let term = |e: f64, v: f64| if e == 0.0 { 0.0 } else { e * v.ln() };
    term(a - 1.0, x) + term(b - 1.0, 1.0 - x) - ln_b
}

/// log Γ_p(a), the multivariate gamma function.
pub fn ln_multivariate_gamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * PI.ln() + (0..p).map(|j| ln_gamma(a - j as f64 / 2.0)).sum::<f64>()
}

/// log InvWish(x | scale, df) with the full normalizer.
pub fn log_inv_wishart(x: &DMatrix<f64>, scale: &DMatrix<f64>, df: f64) -> Result<f64> {
    let p = x.nrows();
    let x_chol = linalg::cholesky(x, "inverse-Wishart argument")?;
    let logdet_x = linalg::chol_logdet(&x_chol);
    let logdet_s = linalg::logdet_spd(scale, "inverse-Wishart scale")?;
    let trace = (scale * x_chol.inverse()).trace();
    let pf = p as f64;
    Ok(0.5 * df * logdet_s
        - 0.5 * df * pf * LN_2
        - ln_multivariate_gamma(p, df / 2.0)
        - 0.5 * (df + pf + 1.0) * logdet_x
        - 0.5 * trace)
}

/// `log π(τ²) = −½ log τ²`, the density on `τ²` induced by a flat prior on `τ`.
pub fn log_tau2_prior(tau2: f64) -> f64 {
    -0.5 * tau2.ln()
}

/// `Σ_k log Beta(ρ_k) + Σ_t log InvWish(G_t) + Σ_k log π(τ²_k)`.
pub fn log_hyperpriors(spec: &CovarianceSpec, prior: &PriorConfig) -> Result<f64> {
    let mut total = 0.0;
    for &rho in spec.rho() {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidRho(rho));
        }
        total += log_beta_density(rho, prior.rho_beta_a, prior.rho_beta_b);
    }
    for g in spec.g_list() {
        total += log_inv_wishart(g, &prior.g_scale, prior.g_df)?;
    }
    total += spec.tau2().iter().map(|&t| log_tau2_prior(t)).sum::<f64>();
    Ok(total)
}
