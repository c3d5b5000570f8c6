//! Metropolis-within-Gibbs sampler for the MSTCAR model and its separable
//! and independent special cases.
//!
//! One iteration is a systematic scan: β, the Z sweep over sites (with
//! optional recentering), τ², the `G_t`, the `ρ_k`, then the unobserved
//! rates. Everything except `ρ` is drawn from its exact full conditional.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{whiten_into, CovarianceSpec, SigmaEtaFactor};
use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::linalg;
use crate::model::{
    log_beta_density, log_hyperpriors, log_inv_wishart, log_likelihood_parts, log_tau2_prior,
    mstcar_log_prior, ModelState, PriorConfig, RateDataset,
};
use crate::random::{inv_gamma, inv_wishart, rng_from_seed, std_normal};

/// Which covariance structure the random effects carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Nonseparable: one `G_t` per time and one `ρ_k` per group.
    #[serde(rename = "mstcar")]
    Mstcar,
    /// `Σ_η = R(ρ) ⊗ G`: a single `G` and a single `ρ`.
    #[serde(rename = "separable")]
    Separable,
    /// Independent space-time CAR per group: `G_t = diag(σ²_k)` for all `t`.
    #[serde(rename = "stcar")]
    StcarIndependent,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::Mstcar,
        Variant::Separable,
        Variant::StcarIndependent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mstcar => "mstcar",
            Variant::Separable => "separable",
            Variant::StcarIndependent => "stcar",
        }
    }

    /// Number of distinct ρ parameters under this variant.
    fn n_rho(self, n_groups: usize) -> usize {
        match self {
            Variant::Separable => 1,
            _ => n_groups,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mstcar" => Ok(Variant::Mstcar),
            "separable" => Ok(Variant::Separable),
            "stcar" | "stcar_independent" => Ok(Variant::StcarIndependent),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub variant: Variant,
    /// Initial sd of the logit-scale random walk on ρ.
    pub rho_proposal_sd: f64,
    pub seed: u64,
    /// Recenter Z to sum to zero per (group, time), moving the mean into β.
    pub center_z: bool,
    /// Adapt the ρ proposal sd toward 0.44 acceptance during burn-in.
    pub tune_rho: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_iterations: 6000,
            burn_in: 1000,
            thin: 10,
            variant: Variant::Mstcar,
            rho_proposal_sd: 0.5,
            seed: 0,
            center_z: true,
            tune_rho: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be below n_iterations ({})",
                self.burn_in, self.n_iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if !(self.rho_proposal_sd > 0.0 && self.rho_proposal_sd.is_finite()) {
            return Err(Error::Config("rho_proposal_sd must be positive".into()));
        }
        Ok(())
    }

    /// `floor((n_iterations − burn_in) / thin)`.
    pub fn n_draws(&self) -> usize {
        (self.n_iterations - self.burn_in) / self.thin
    }
}

/// Thinned post-burn-in draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub variant: Variant,
    pub n_sites: usize,
    pub n_groups: usize,
    pub n_time: usize,
    pub n_covariates: usize,
    /// 0-based iteration index of each stored draw.
    pub iterations: Vec<usize>,
    /// `beta[d]` is group-major: `beta[d][k * p + j]`.
    pub beta: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// `G_t`, `ρ` and `τ²` of each draw.
    pub spec: Vec<CovarianceSpec>,
    pub y_imputed: Vec<Vec<f64>>,
    /// Post-burn-in acceptance rate of each ρ parameter.
    pub rho_acceptance: Vec<f64>,
    /// Proposal sd used after burn-in.
    pub rho_proposal_sd: Vec<f64>,
}

impl PosteriorSamples {
    fn empty(data: &RateDataset, variant: Variant) -> Self {
        Self {
            variant,
            n_sites: data.n_sites(),
            n_groups: data.n_groups(),
            n_time: data.n_time(),
            n_covariates: data.n_covariates(),
            iterations: Vec::new(),
            beta: Vec::new(),
            z: Vec::new(),
            spec: Vec::new(),
            y_imputed: Vec::new(),
            rho_acceptance: Vec::new(),
            rho_proposal_sd: Vec::new(),
        }
    }

    pub fn n_draws(&self) -> usize {
        self.z.len()
    }

    /// β of draw `d` as `beta[k][j]`.
    pub fn beta_groups(&self, d: usize) -> Vec<Vec<f64>> {
        self.beta[d]
            .chunks(self.n_covariates)
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn state(&self, d: usize) -> ModelState {
        ModelState {
            beta: self.beta_groups(d),
            z: self.z[d].clone(),
            spec: self.spec[d].clone(),
            y_imputed: self.y_imputed[d].clone(),
        }
    }

    fn push(&mut self, iteration: usize, state: &ModelState) {
        self.iterations.push(iteration);
        self.beta.push(state.beta.concat());
        self.z.push(state.z.clone());
        self.spec.push(state.spec.clone());
        self.y_imputed.push(state.y_imputed.clone());
    }
}

// ---------------------------------------------------------------------------
// β

/// Gaussian full conditional of each `β_k` under a flat prior:
/// `(mean, precision)` with per-cell weight `n / τ²_k` on the residual
/// `y − z`. Unobserved cells enter with their imputed value.
pub fn beta_conditional(
    data: &RateDataset,
    state: &ModelState,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    state.check(data)?;
    let p = data.n_covariates();
    let ng = data.n_groups();
    let y = data.completed_y(&state.y_imputed);
    let mut xtwx = vec![DMatrix::<f64>::zeros(p, p); ng];
    let mut xtwr = vec![DVector::<f64>::zeros(p); ng];
    #[allow(clippy::needless_range_loop)]
    for c in 0..data.n_cells() {
        let k = data.group_of(c);
        let w = data.pop()[c] / state.spec.tau2()[k];
        let x = data.covariates(c);
        let r = y[c] - state.z[c];
        for a in 0..p {
            if x[a] == 0.0 {
                continue;
            }
            xtwr[k][a] += w * x[a] * r;
            for b in 0..p {
                xtwx[k][(a, b)] += w * x[a] * x[b];
            }
        }
    }
    let mut out = Vec::with_capacity(ng);
    for (k, (prec, rhs)) in xtwx.into_iter().zip(xtwr).enumerate() {
        let chol = Cholesky::new(prec.clone()).ok_or(Error::SingularDesign { group: k + 1 })?;
        out.push((chol.solve(&rhs), prec));
    }
    Ok(out)
}

pub fn update_beta<R: Rng + ?Sized>(
    data: &RateDataset,
    state: &ModelState,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    beta_conditional(data, state)?
        .into_iter()
        .enumerate()
        .map(|(k, (mean, prec))| {
            let chol = Cholesky::new(prec).ok_or(Error::SingularDesign { group: k + 1 })?;
            Ok(gaussian_draw(&mean, &chol, rng).iter().copied().collect())
        })
        .collect()
}

/// mean + L⁻ᵀ ε for precision `L Lᵀ`.
fn gaussian_draw<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol: &Cholesky<f64, nalgebra::Dyn>,
    rng: &mut R,
) -> DVector<f64> {
    let eps = DVector::from_fn(mean.len(), |_, _| std_normal(rng));
    let l = chol.l_dirty();
    let mut offset = eps;
    l.tr_solve_lower_triangular_mut(&mut offset);
    mean + offset
}

// ---------------------------------------------------------------------------
// Z

/// Full conditional of one site's block: `(mean, precision)` with
/// precision `m_i Σ_η⁻¹ + diag(n / τ²_k)` and
/// `mean = precision⁻¹ (Σ_η⁻¹ Σ_{j~i} z_j + diag(n/τ²)(y − xᵀβ))`.
pub fn z_site_conditional(
    site: usize,
    data: &RateDataset,
    state: &ModelState,
    graph: &AdjacencyGraph,
    sigma_precision: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (rhs, prec) = z_site_system(site, data, state, graph, sigma_precision, None)?;
    let chol = Cholesky::new(prec.clone()).ok_or(Error::FactorizationFailure { site: site + 1 })?;
    Ok((chol.solve(&rhs), prec))
}

fn z_site_system(
    site: usize,
    data: &RateDataset,
    state: &ModelState,
    graph: &AdjacencyGraph,
    sigma_precision: &DMatrix<f64>,
    completed_y: Option<&[f64]>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let q = data.block_len();
    let nbrs = graph.neighbors(site);
    if nbrs.is_empty() {
        return Err(Error::IsolatedSite { site: site + 1 });
    }
    let owned;
    let y = match completed_y {
        Some(y) => y,
        None => {
            owned = data.completed_y(&state.y_imputed);
            &owned
        }
    };
    let mut nbr_sum = DVector::zeros(q);
    for &j in nbrs {
        for c in 0..q {
            nbr_sum[c] += state.z[j * q + c];
        }
    }
    let mut prec = sigma_precision * nbrs.len() as f64;
    let mut rhs = sigma_precision * nbr_sum;
    for c in 0..q {
        let cell = site * q + c;
        let k = data.group_of(cell);
        let w = data.pop()[cell] / state.spec.tau2()[k];
        prec[(c, c)] += w;
        rhs[c] += w * (y[cell] - data.linear_predictor(cell, &state.beta));
    }
    Ok((rhs, prec))
}

/// Exact draw of one site's block from its full conditional.
pub fn update_z_site<R: Rng + ?Sized>(
    site: usize,
    data: &RateDataset,
    state: &ModelState,
    graph: &AdjacencyGraph,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let precision = SigmaEtaFactor::new(&state.spec)?.precision();
    update_z_site_with(site, data, state, graph, &precision, None, rng)
}

fn update_z_site_with<R: Rng + ?Sized>(
    site: usize,
    data: &RateDataset,
    state: &ModelState,
    graph: &AdjacencyGraph,
    sigma_precision: &DMatrix<f64>,
    completed_y: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (rhs, prec) = z_site_system(site, data, state, graph, sigma_precision, completed_y)?;
    let chol = Cholesky::new(prec).ok_or(Error::FactorizationFailure { site: site + 1 })?;
    let mean = chol.solve(&rhs);
    Ok(gaussian_draw(&mean, &chol, rng).iter().copied().collect())
}

/// Maps a per-(time) shift of group `k`'s random effects onto β_k, so that
/// `Z − c` and `β + M c` give the same linear predictor.
#[derive(Debug, Clone)]
struct Centering {
    /// Per group, `p × n_time`: column `t` is the coefficient change that
    /// adds 1 to every group-`k` cell at time `t`.
    maps: Vec<DMatrix<f64>>,
}

impl Centering {
    fn new(data: &RateDataset) -> Result<Self> {
        let (p, ng, nt) = (data.n_covariates(), data.n_groups(), data.n_time());
        let mut maps = Vec::with_capacity(ng);
        for k in 0..ng {
            let mut xtx = DMatrix::<f64>::zeros(p, p);
            let mut rhs = DMatrix::<f64>::zeros(p, nt);
            let cells: Vec<usize> = (0..data.n_cells())
                .filter(|&c| data.group_of(c) == k)
                .collect();
            for &c in &cells {
                let x = DVector::from_column_slice(data.covariates(c));
                xtx += &x * x.transpose();
                let t = data.coords(c).2;
                for a in 0..p {
                    rhs[(a, t)] += x[a];
                }
            }
            let chol = Cholesky::new(xtx).ok_or(Error::SingularDesign { group: k + 1 })?;
            let map = chol.solve(&rhs);
            for &c in &cells {
                let t = data.coords(c).2;
                for s in 0..nt {
                    let fitted: f64 = data
                        .covariates(c)
                        .iter()
                        .enumerate()
                        .map(|(a, x)| x * map[(a, s)])
                        .sum();
                    let want = if s == t { 1.0 } else { 0.0 };
                    if (fitted - want).abs() > 1e-8 {
                        return Err(Error::Config(
                            "center_z needs covariates that span one intercept per time point"
                                .into(),
                        ));
                    }
                }
            }
            maps.push(map);
        }
        Ok(Self { maps })
    }

    fn apply(&self, data: &RateDataset, state: &mut ModelState) {
        let (ns, ng, nt) = (data.n_sites(), data.n_groups(), data.n_time());
        let q = ng * nt;
        for k in 0..ng {
            let mut shift = DVector::zeros(nt);
            for t in 0..nt {
                let c = t * ng + k;
                let mean = (0..ns).map(|i| state.z[i * q + c]).sum::<f64>() / ns as f64;
                for i in 0..ns {
                    state.z[i * q + c] -= mean;
                }
                shift[t] = mean;
            }
            let delta = &self.maps[k] * shift;
            for (b, d) in state.beta[k].iter_mut().zip(delta.iter()) {
                *b += d;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// τ²

/// Inverse-gamma full conditional of each `τ²_k` given the observed cells:
/// shape `(M_k − 1)/2`, rate `½ Σ n (y − xᵀβ − z)²`.
pub fn tau2_conditional(data: &RateDataset, state: &ModelState) -> Result<Vec<(f64, f64)>> {
    state.check(data)?;
    let ng = data.n_groups();
    let mut count = vec![0usize; ng];
    let mut ss = vec![0.0; ng];
    for c in 0..data.n_cells() {
        if !data.observed()[c] {
            continue;
        }
        let k = data.group_of(c);
        let r = data.y()[c] - data.linear_predictor(c, &state.beta) - state.z[c];
        count[k] += 1;
        ss[k] += data.pop()[c] * r * r;
    }
    (0..ng)
        .map(|k| {
            if count[k] < 2 {
                return Err(Error::InsufficientData {
                    group: k + 1,
                    observed: count[k],
                });
            }
            if !(ss[k] > 0.0) {
                return Err(Error::DegenerateResiduals { group: k + 1 });
            }
            Ok(((count[k] as f64 - 1.0) / 2.0, ss[k] / 2.0))
        })
        .collect()
}

pub fn update_tau2<R: Rng + ?Sized>(
    data: &RateDataset,
    state: &ModelState,
    rng: &mut R,
) -> Result<Vec<f64>> {
    tau2_conditional(data, state)?
        .into_iter()
        .map(|(shape, rate)| inv_gamma(shape, rate, rng))
        .collect()
}

// ---------------------------------------------------------------------------
// G_t

/// `S_t = Σ_{edges} d_t d_tᵀ` with `d = A⁻¹ (z_i − z_j)` for every `t`.
pub fn edge_scatter(
    z: &[f64],
    graph: &AdjacencyGraph,
    rho_list: &[f64],
    n_time: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let ng = rho_list.len();
    let q = ng * n_time;
    if z.len() != graph.n_sites() * q {
        return Err(Error::DimensionMismatch {
            context: "field length",
            expected: graph.n_sites() * q,
            actual: z.len(),
        });
    }
    let mut scatter = vec![DMatrix::zeros(ng, ng); n_time];
    let mut diff = vec![0.0; q];
    let mut d = vec![0.0; q];
    for &(a, b) in graph.edges() {
        for c in 0..q {
            diff[c] = z[a * q + c] - z[b * q + c];
        }
        whiten_into(&diff, rho_list, &mut d);
        for (t, s) in scatter.iter_mut().enumerate() {
            let dt = &d[t * ng..(t + 1) * ng];
            for r in 0..ng {
                for c in 0..ng {
                    s[(r, c)] += dt[r] * dt[c];
                }
            }
        }
    }
    Ok(scatter)
}

/// Inverse-Wishart full conditional of `G_t`: `(scale + S_t, df + N_s − 1)`.
pub fn g_conditional(
    t: usize,
    z: &[f64],
    graph: &AdjacencyGraph,
    spec: &CovarianceSpec,
    prior: &PriorConfig,
) -> Result<(DMatrix<f64>, f64)> {
    let scatter = edge_scatter(z, graph, spec.rho(), spec.n_time())?;
    let st = scatter.into_iter().nth(t).ok_or(Error::DimensionMismatch {
        context: "time index",
        expected: spec.n_time(),
        actual: t,
    })?;
    Ok((
        &prior.g_scale + st,
        prior.g_df + (graph.n_sites() - 1) as f64,
    ))
}

pub fn update_g<R: Rng + ?Sized>(
    t: usize,
    z: &[f64],
    graph: &AdjacencyGraph,
    spec: &CovarianceSpec,
    prior: &PriorConfig,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (scale, df) = g_conditional(t, z, graph, spec, prior)?;
    inv_wishart(&scale, df, rng)
}

/// Separable variant: one `G` pooled over time,
/// `(scale + Σ_t S_t, df + (N_s − 1) N_t)`.
pub fn separable_g_conditional(
    z: &[f64],
    graph: &AdjacencyGraph,
    spec: &CovarianceSpec,
    prior: &PriorConfig,
) -> Result<(DMatrix<f64>, f64)> {
    let nt = spec.n_time();
    let scatter = edge_scatter(z, graph, spec.rho(), nt)?;
    let total = scatter
        .into_iter()
        .fold(prior.g_scale.clone(), |acc, s| acc + s);
    Ok((total, prior.g_df + ((graph.n_sites() - 1) * nt) as f64))
}

/// Prior on `σ²_k` in the independent variant: the inverse-gamma marginal
/// of the prior inverse-Wishart diagonal, `IG((ν − N_g + 1)/2, scale_kk / 2)`.
pub fn independent_sigma2_prior(prior: &PriorConfig, k: usize) -> (f64, f64) {
    let ng = prior.g_scale.nrows() as f64;
    ((prior.g_df - ng + 1.0) / 2.0, prior.g_scale[(k, k)] / 2.0)
}

/// Independent variant: inverse-gamma full conditional of each `σ²_k`.
pub fn independent_sigma2_conditional(
    z: &[f64],
    graph: &AdjacencyGraph,
    spec: &CovarianceSpec,
    prior: &PriorConfig,
) -> Result<Vec<(f64, f64)>> {
    let nt = spec.n_time();
    let scatter = edge_scatter(z, graph, spec.rho(), nt)?;
    Ok((0..spec.n_groups())
        .map(|k| {
            let (a0, b0) = independent_sigma2_prior(prior, k);
            let ss: f64 = scatter.iter().map(|s| s[(k, k)]).sum();
            (
                a0 + ((graph.n_sites() - 1) * nt) as f64 / 2.0,
                b0 + ss / 2.0,
            )
        })
        .collect())
}

// ---------------------------------------------------------------------------
// ρ

/// Log of the ρ-dependent part of the posterior: the MSTCAR prior on Z plus
/// the Beta prior on each distinct ρ (one term under the separable
/// variant).
pub fn rho_log_target(
    z: &[f64],
    graph: &AdjacencyGraph,
    spec: &CovarianceSpec,
    prior: &PriorConfig,
    variant: Variant,
) -> Result<f64> {
    let n_rho = variant.n_rho(spec.n_groups());
    let beta_term: f64 = spec.rho()[..n_rho]
        .iter()
        .map(|&r| log_beta_density(r, prior.rho_beta_a, prior.rho_beta_b))
        .sum();
    Ok(mstcar_log_prior(z, graph, spec)? + beta_term)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Random-walk Metropolis on `logit(ρ_k)`. Under the separable variant the
/// proposal moves the shared ρ of every group. Returns the new value and
/// whether the proposal was accepted.
pub fn update_rho<R: Rng + ?Sized>(
    k: usize,
    z: &[f64],
    graph: &AdjacencyGraph,
    spec: &CovarianceSpec,
    prior: &PriorConfig,
    variant: Variant,
    proposal_sd: f64,
    rng: &mut R,
) -> Result<(f64, bool)> {
    let current = spec.rho()[k];
    let proposed = expit(logit(current) + proposal_sd * std_normal(rng));
    let u: f64 = rng.random();
    let accept = rho_accept_log_ratio(k, proposed, z, graph, spec, prior, variant)?
        .is_some_and(|log_ratio| u.ln() < log_ratio);
    Ok(if accept {
        (proposed, true)
    } else {
        (current, false)
    })
}

/// Log acceptance ratio of moving `ρ_k` to `proposed`, including the logit
/// Jacobian. `None` when the proposal is outside (0, 1) or its target is
/// not finite.
pub fn rho_accept_log_ratio(
    k: usize,
    proposed: f64,
    z: &[f64],
    graph: &AdjacencyGraph,
    spec: &CovarianceSpec,
    prior: &PriorConfig,
    variant: Variant,
) -> Result<Option<f64>> {
    let current = spec.rho()[k];
    if !(proposed > 0.0 && proposed < 1.0) {
        return Ok(None);
    }
    let mut rho = spec.rho().to_vec();
    match variant {
        Variant::Separable => rho.iter_mut().for_each(|r| *r = proposed),
        _ => rho[k] = proposed,
    }
    let proposed_spec = spec.with_rho(rho)?;
    let new = rho_log_target(z, graph, &proposed_spec, prior, variant)?
        + (proposed * (1.0 - proposed)).ln();
    if !new.is_finite() {
        return Ok(None);
    }
    let old = rho_log_target(z, graph, spec, prior, variant)? + (current * (1.0 - current)).ln();
    Ok(Some(new - old))
}

// ---------------------------------------------------------------------------
// Y_u

/// Draws every unobserved rate from `N(xᵀβ_k + z, τ²_k / n)` with the
/// sentinel population.
pub fn impute_missing<R: Rng + ?Sized>(
    data: &RateDataset,
    state: &ModelState,
    rng: &mut R,
) -> Vec<f64> {
    data.missing_cells()
        .into_iter()
        .map(|c| {
            let k = data.group_of(c);
            let mean = data.linear_predictor(c, &state.beta) + state.z[c];
            let sd = (state.spec.tau2()[k] / data.pop()[c]).sqrt();
            mean + sd * std_normal(rng)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Joint density

/// Log posterior of the full hierarchical model up to a constant, under the
/// given variant's priors. With `include_unobserved = false` the imputed
/// cells are left out, which is the joint with `Y_u` integrated out.
pub fn log_joint(
    data: &RateDataset,
    state: &ModelState,
    graph: &AdjacencyGraph,
    prior: &PriorConfig,
    variant: Variant,
    include_unobserved: bool,
) -> Result<f64> {
    state.check(data)?;
    let lik = log_likelihood_parts(data, state, true, include_unobserved);
    let z_prior = mstcar_log_prior(&state.z, graph, &state.spec)?;
    let spec = &state.spec;
    let tau_prior: f64 = spec.tau2().iter().map(|&t| log_tau2_prior(t)).sum();
    let hyper = match variant {
        Variant::Mstcar => log_hyperpriors(spec, prior)?,
        Variant::Separable => {
            log_beta_density(spec.rho()[0], prior.rho_beta_a, prior.rho_beta_b)
                + log_inv_wishart(&spec.g_list()[0], &prior.g_scale, prior.g_df)?
                + tau_prior
        }
        Variant::StcarIndependent => {
            let mut total = tau_prior;
            for k in 0..spec.n_groups() {
                let (a, b) = independent_sigma2_prior(prior, k);
                let s2 = spec.g_list()[0][(k, k)];
                total += log_beta_density(spec.rho()[k], prior.rho_beta_a, prior.rho_beta_b)
                    + a * b.ln()
                    - statrs::function::gamma::ln_gamma(a)
                    - (a + 1.0) * s2.ln()
                    - b / s2;
            }
            total
        }
    };
    Ok(lik + z_prior + hyper)
}

// ---------------------------------------------------------------------------
// Initialization

/// Starting point when no truth is available: β from per-group weighted
/// least squares on the observed cells, `Z = 0`, `G_t` at the prior mean
/// (identity when undefined), `ρ_k = 0.8`, `τ²_k` from the residual
/// variance and imputed cells at their fitted value.
pub fn initial_state(
    data: &RateDataset,
    prior: &PriorConfig,
    variant: Variant,
) -> Result<ModelState> {
    let (p, ng, nt) = (data.n_covariates(), data.n_groups(), data.n_time());
    let mut beta = Vec::with_capacity(ng);
    for k in 0..ng {
        let mut xtwx = DMatrix::<f64>::zeros(p, p);
        let mut xtwy = DVector::<f64>::zeros(p);
        for c in (0..data.n_cells()).filter(|&c| data.observed()[c] && data.group_of(c) == k) {
            let x = DVector::from_column_slice(data.covariates(c));
            let w = data.pop()[c];
            xtwx += &x * x.transpose() * w;
            xtwy += &x * (w * data.y()[c]);
        }
        let chol = Cholesky::new(xtwx).ok_or(Error::SingularDesign { group: k + 1 })?;
        beta.push(chol.solve(&xtwy).iter().copied().collect::<Vec<f64>>());
    }
    let mut ss = vec![0.0; ng];
    let mut count = vec![0usize; ng];
    for c in (0..data.n_cells()).filter(|&c| data.observed()[c]) {
        let k = data.group_of(c);
        let r = data.y()[c] - data.linear_predictor(c, &beta);
        ss[k] += data.pop()[c] * r * r;
        count[k] += 1;
    }
    let tau2: Vec<f64> = (0..ng)
        .map(|k| {
            if count[k] < 2 {
                return Err(Error::InsufficientData {
                    group: k + 1,
                    observed: count[k],
                });
            }
            Ok((ss[k] / count[k] as f64).max(1e-8))
        })
        .collect::<Result<_>>()?;
    let excess = prior.g_df - ng as f64 - 1.0;
    let g0 = if excess > 0.0 {
        &prior.g_scale / excess
    } else {
        DMatrix::identity(ng, ng)
    };
    let spec = CovarianceSpec::new(vec![g0; nt], vec![0.8; ng], tau2)?;
    let mut state = ModelState {
        beta,
        z: vec![0.0; data.n_cells()],
        spec,
        y_imputed: Vec::new(),
    };
    state.y_imputed = data
        .missing_cells()
        .into_iter()
        .map(|c| data.linear_predictor(c, &state.beta))
        .collect();
    project_to_variant(&state, variant)
}

/// Forces a state onto the constraints of a variant: separable averages
/// `G_t` and `ρ`; independent keeps the time-averaged diagonal of `G_t`.
pub fn project_to_variant(state: &ModelState, variant: Variant) -> Result<ModelState> {
    let spec = &state.spec;
    let (ng, nt) = (spec.n_groups(), spec.n_time());
    let g_mean = spec
        .g_list()
        .iter()
        .fold(DMatrix::zeros(ng, ng), |acc, g| acc + g)
        / nt as f64;
    let spec = match variant {
        Variant::Mstcar => spec.clone(),
        Variant::Separable => {
            let rho = spec.rho().iter().sum::<f64>() / ng as f64;
            CovarianceSpec::separable(g_mean, rho, spec.tau2().to_vec(), nt)?
        }
        Variant::StcarIndependent => {
            let g = DMatrix::from_diagonal(&g_mean.diagonal());
            CovarianceSpec::new(vec![g; nt], spec.rho().to_vec(), spec.tau2().to_vec())?
        }
    };
    Ok(ModelState {
        spec,
        ..state.clone()
    })
}

// ---------------------------------------------------------------------------
// Chain

// Every 50 burn-in iterations, log sd moves by 3·γ_b·(rate − 0.44) with
// γ_b = min(0.5, 1/√b), so adaptation fades out.
const TUNE_BATCH: usize = 50;
const TARGET_ACCEPTANCE: f64 = 0.44;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RhoTuning {
    sd: Vec<f64>,
    batch_accepts: Vec<usize>,
    batch_len: usize,
    batches: usize,
    post_accepts: Vec<usize>,
    post_proposals: usize,
}

impl RhoTuning {
    fn new(n: usize, sd: f64) -> Self {
        Self {
            sd: vec![sd; n],
            batch_accepts: vec![0; n],
            batch_len: 0,
            batches: 0,
            post_accepts: vec![0; n],
            post_proposals: 0,
        }
    }

    fn record(&mut self, accepted: &[bool], in_burn_in: bool, adapt: bool) {
        if in_burn_in {
            for (count, &a) in self.batch_accepts.iter_mut().zip(accepted) {
                *count += a as usize;
            }
            self.batch_len += 1;
            if self.batch_len == TUNE_BATCH {
                self.batches += 1;
                if adapt {
                    let step = (1.0 / (self.batches as f64).sqrt()).min(0.5);
                    for (sd, &count) in self.sd.iter_mut().zip(&self.batch_accepts) {
                        let rate = count as f64 / TUNE_BATCH as f64;
                        *sd *= (3.0 * step * (rate - TARGET_ACCEPTANCE)).exp();
                    }
                }
                self.batch_accepts.iter_mut().for_each(|c| *c = 0);
                self.batch_len = 0;
            }
        } else {
            for (count, &a) in self.post_accepts.iter_mut().zip(accepted) {
                *count += a as usize;
            }
            self.post_proposals += 1;
        }
    }

    fn acceptance(&self) -> Vec<f64> {
        self.post_accepts
            .iter()
            .map(|&a| a as f64 / self.post_proposals.max(1) as f64)
            .collect()
    }
}

/// Everything needed to continue a chain bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainCheckpoint {
    pub config: SamplerConfig,
    pub iteration: usize,
    pub state: ModelState,
    rng: ChaCha8Rng,
    tuning: RhoTuning,
    samples: PosteriorSamples,
}

/// A single MCMC chain over borrowed data.
pub struct Chain<'a> {
    data: &'a RateDataset,
    graph: &'a AdjacencyGraph,
    prior: &'a PriorConfig,
    config: SamplerConfig,
    centering: Option<Centering>,
    iteration: usize,
    state: ModelState,
    rng: ChaCha8Rng,
    tuning: RhoTuning,
    samples: PosteriorSamples,
}

impl<'a> Chain<'a> {
    /// Starts from [`initial_state`].
    pub fn new(
        data: &'a RateDataset,
        graph: &'a AdjacencyGraph,
        prior: &'a PriorConfig,
        config: SamplerConfig,
    ) -> Result<Self> {
        let init = initial_state(data, prior, config.variant)?;
        Self::from_state(data, graph, prior, config, init)
    }

    /// Starts from a given state (e.g. the simulation truth), projected
    /// onto the variant's constraints.
    pub fn from_state(
        data: &'a RateDataset,
        graph: &'a AdjacencyGraph,
        prior: &'a PriorConfig,
        config: SamplerConfig,
        init: ModelState,
    ) -> Result<Self> {
        config.validate()?;
        prior.validate(data.n_groups())?;
        if graph.n_sites() != data.n_sites() {
            return Err(Error::DimensionMismatch {
                context: "graph sites vs data sites",
                expected: data.n_sites(),
                actual: graph.n_sites(),
            });
        }
        init.check(data)?;
        let state = project_to_variant(&init, config.variant)?;
        let centering = if config.center_z {
            Some(Centering::new(data)?)
        } else {
            None
        };
        let n_rho = config.variant.n_rho(data.n_groups());
        Ok(Self {
            data,
            graph,
            prior,
            centering,
            iteration: 0,
            state,
            rng: rng_from_seed(config.seed),
            tuning: RhoTuning::new(n_rho, config.rho_proposal_sd),
            samples: PosteriorSamples::empty(data, config.variant),
            config,
        })
    }

    pub fn resume(
        data: &'a RateDataset,
        graph: &'a AdjacencyGraph,
        prior: &'a PriorConfig,
        checkpoint: ChainCheckpoint,
    ) -> Result<Self> {
        let mut chain = Self::from_state(
            data,
            graph,
            prior,
            checkpoint.config.clone(),
            checkpoint.state.clone(),
        )?;
        chain.iteration = checkpoint.iteration;
        chain.state = checkpoint.state;
        chain.rng = checkpoint.rng;
        chain.tuning = checkpoint.tuning;
        chain.samples = checkpoint.samples;
        Ok(chain)
    }

    pub fn checkpoint(&self) -> ChainCheckpoint {
        ChainCheckpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            state: self.state.clone(),
            rng: self.rng.clone(),
            tuning: self.tuning.clone(),
            samples: self.samples.clone(),
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.n_iterations
    }

    /// Runs one full scan and stores the draw if it is retained.
    pub fn step(&mut self) -> Result<()> {
        let it = self.iteration;
        self.sweep().map_err(|e| Error::Sampler {
            iteration: it + 1,
            source: Box::new(e),
        })?;
        let burn_in = self.config.burn_in;
        if it >= burn_in && (it - burn_in + 1).is_multiple_of(self.config.thin) {
            self.samples.push(it, &self.state);
        }
        self.iteration += 1;
        Ok(())
    }

    pub fn run(mut self) -> Result<PosteriorSamples> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(self.into_samples())
    }

    pub fn into_samples(mut self) -> PosteriorSamples {
        self.samples.rho_acceptance = self.tuning.acceptance();
        self.samples.rho_proposal_sd = self.tuning.sd.clone();
        self.samples
    }

    fn sweep(&mut self) -> Result<()> {
        let (data, graph, prior) = (self.data, self.graph, self.prior);
        let variant = self.config.variant;

        self.state.beta = update_beta(data, &self.state, &mut self.rng)?;

        let precision = SigmaEtaFactor::new(&self.state.spec)?.precision();
        let y = data.completed_y(&self.state.y_imputed);
        let q = data.block_len();
        for site in 0..data.n_sites() {
            let block = update_z_site_with(
                site,
                data,
                &self.state,
                graph,
                &precision,
                Some(&y),
                &mut self.rng,
            )?;
            self.state.z[site * q..(site + 1) * q].copy_from_slice(&block);
        }
        if let Some(centering) = &self.centering {
            centering.apply(data, &mut self.state);
        }

        let tau2 = update_tau2(data, &self.state, &mut self.rng)?;
        for (k, t2) in tau2.into_iter().enumerate() {
            self.state.spec.set_tau2(k, t2);
        }

        let nt = data.n_time();
        match variant {
            Variant::Mstcar => {
                let scatter = edge_scatter(&self.state.z, graph, self.state.spec.rho(), nt)?;
                for (t, s) in scatter.into_iter().enumerate() {
                    let scale = &prior.g_scale + s;
                    let df = prior.g_df + (graph.n_sites() - 1) as f64;
                    let g = inv_wishart(&scale, df, &mut self.rng)?;
                    self.state.spec.set_g(t, g)?;
                }
            }
            Variant::Separable => {
                let (scale, df) =
                    separable_g_conditional(&self.state.z, graph, &self.state.spec, prior)?;
                let g = inv_wishart(&scale, df, &mut self.rng)?;
                for t in 0..nt {
                    self.state.spec.set_g(t, g.clone())?;
                }
            }
            Variant::StcarIndependent => {
                let params =
                    independent_sigma2_conditional(&self.state.z, graph, &self.state.spec, prior)?;
                let mut diag = DVector::zeros(params.len());
                for (k, (shape, rate)) in params.into_iter().enumerate() {
                    diag[k] = inv_gamma(shape, rate, &mut self.rng)?;
                }
                let g = DMatrix::from_diagonal(&diag);
                for t in 0..nt {
                    self.state.spec.set_g(t, g.clone())?;
                }
            }
        }

        let n_rho = variant.n_rho(data.n_groups());
        let mut accepted = vec![false; n_rho];
        for (k, acc) in accepted.iter_mut().enumerate() {
            let (rho, ok) = update_rho(
                k,
                &self.state.z,
                graph,
                &self.state.spec,
                prior,
                variant,
                self.tuning.sd[k],
                &mut self.rng,
            )?;
            if ok {
                match variant {
                    Variant::Separable => {
                        for g in 0..data.n_groups() {
                            self.state.spec.set_rho(g, rho)?;
                        }
                    }
                    _ => self.state.spec.set_rho(k, rho)?,
                }
            }
            *acc = ok;
        }
        let in_burn_in = self.iteration < self.config.burn_in;
        self.tuning
            .record(&accepted, in_burn_in, self.config.tune_rho);

        self.state.y_imputed = impute_missing(data, &self.state, &mut self.rng);
        Ok(())
    }
}

/// Runs a chain from [`initial_state`] to completion.
pub fn run_chain(
    data: &RateDataset,
    graph: &AdjacencyGraph,
    prior: &PriorConfig,
    config: &SamplerConfig,
) -> Result<PosteriorSamples> {
    Chain::new(data, graph, prior, config.clone())?.run()
}

/// Runs a chain from a supplied starting state.
pub fn run_chain_from(
    data: &RateDataset,
    graph: &AdjacencyGraph,
    prior: &PriorConfig,
    config: &SamplerConfig,
    init: ModelState,
) -> Result<PosteriorSamples> {
    Chain::from_state(data, graph, prior, config.clone(), init)?.run()
}

/// Symmetric and positive-definite to the stored precision.
pub fn draws_are_valid_covariances(samples: &PosteriorSamples) -> bool {
    samples
        .spec
        .iter()
        .flat_map(|s| s.g_list())
        .all(|g| linalg::is_symmetric(g, 1e-12) && linalg::is_spd(g))
}
