//! Simulation harness: draw a covariance truth, generate replicate datasets
//! from the intrinsic MSTCAR field, fit them and score interval coverage and
//! DIC comparisons.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceSpec;
use crate::diagnostics::{self, Family, IntervalSummary};
use crate::error::{Error, Result};
use crate::graph::{spectral_basis, AdjacencyGraph, SpectralBasis};
use crate::io::{self, SiteMap, POPULATION_UNIT};
use crate::model::{ModelState, PriorConfig, RateDataset};
use crate::random::{derive_seed, inv_wishart, rng_from_seed, std_normal};
use crate::sampler::{run_chain, run_chain_from, PosteriorSamples, SamplerConfig, Variant};

/// Where the adjacency graph comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    Builtin(String),
    File(PathBuf),
}

impl GraphSource {
    pub fn load(&self) -> Result<AdjacencyGraph> {
        match self {
            GraphSource::Builtin(name) => io::builtin::graph(name),
            GraphSource::File(path) => io::read_adjacency_file(path, None),
        }
    }

    pub fn site_map(&self, n_sites: usize) -> Result<SiteMap> {
        match self {
            GraphSource::Builtin(name) => io::builtin::site_map(name),
            GraphSource::File(_) => Ok(SiteMap::numbered(n_sites)),
        }
    }
}

/// How the per-cell population weights `n` are set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationMode {
    /// `n` identical in every cell.
    Equal { n: f64 },
    /// Population table CSV (`site_id,group,time,population`); `n` is the
    /// population divided by `unit`. Zero entries become missing cells.
    Table {
        path: PathBuf,
        #[serde(default = "default_unit")]
        unit: f64,
    },
    /// Log-uniform populations in `[min, max]` persons (so `n` is that over
    /// 100,000); cells of the last group are zero (missing) with probability
    /// `zero_fraction`. Drawn once per design from the design seed.
    Synthetic {
        #[serde(default = "default_synthetic_min")]
        min: f64,
        #[serde(default = "default_synthetic_max")]
        max: f64,
        #[serde(default = "default_zero_fraction")]
        zero_fraction: f64,
    },
}

fn default_unit() -> f64 {
    POPULATION_UNIT
}
fn default_synthetic_min() -> f64 {
    1e2
}
fn default_synthetic_max() -> f64 {
    1e4
}
fn default_zero_fraction() -> f64 {
    0.1
}

impl PopulationMode {
    pub fn synthetic() -> Self {
        PopulationMode::Synthetic {
            min: default_synthetic_min(),
            max: default_synthetic_max(),
            zero_fraction: default_zero_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub graph: GraphSource,
    pub n_groups: usize,
    pub n_time: usize,
    /// Per-group AR(1) correlations; defaults to (0.8, 0.85, 0.90) when
    /// `n_groups = 3`.
    #[serde(default)]
    pub rho_truth: Option<Vec<f64>>,
    /// Defaults to `2 N_g + 1`.
    #[serde(default)]
    pub g_truth_df: Option<f64>,
    /// Multiple of the identity; defaults to `20 N_g`.
    #[serde(default)]
    pub g_truth_scale: Option<f64>,
    /// Defaults to 1 per group.
    #[serde(default)]
    pub tau2_truth: Option<Vec<f64>>,
    pub population_mode: PopulationMode,
    pub n_replicates: usize,
    pub seed: u64,
}

impl SimDesign {
    /// Equal-population design with every default on a builtin graph.
    pub fn equal_population(
        graph: &str,
        n_groups: usize,
        n_time: usize,
        n_replicates: usize,
        seed: u64,
    ) -> Self {
        Self {
            graph: GraphSource::Builtin(graph.to_string()),
            n_groups,
            n_time,
            rho_truth: None,
            g_truth_df: None,
            g_truth_scale: None,
            tau2_truth: None,
            population_mode: PopulationMode::Equal { n: 1.0 },
            n_replicates,
            seed,
        }
    }

    pub fn rho(&self) -> Result<Vec<f64>> {
        match &self.rho_truth {
            Some(r) => Ok(r.clone()),
            None if self.n_groups == 3 => Ok(vec![0.8, 0.85, 0.90]),
            None => Err(Error::Config(
                "rho_truth has no default unless n_groups = 3".into(),
            )),
        }
    }

    pub fn g_df(&self) -> f64 {
        self.g_truth_df.unwrap_or(2.0 * self.n_groups as f64 + 1.0)
    }

    pub fn g_scale(&self) -> DMatrix<f64> {
        let s = self.g_truth_scale.unwrap_or(20.0 * self.n_groups as f64);
        DMatrix::identity(self.n_groups, self.n_groups) * s
    }

    pub fn tau2(&self) -> Vec<f64> {
        self.tau2_truth
            .clone()
            .unwrap_or_else(|| vec![1.0; self.n_groups])
    }

    /// Fitting prior whose `G_t` component is the generating inverse-Wishart,
    /// with a Beta(9, 1) prior on each `ρ_k`.
    pub fn matched_prior(&self) -> PriorConfig {
        PriorConfig {
            g_scale: self.g_scale(),
            g_df: self.g_df(),
            ..PriorConfig::default_for(self.n_groups)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.n_time == 0 {
            return Err(Error::Config("n_groups and n_time must be positive".into()));
        }
        if self.n_replicates == 0 {
            return Err(Error::Config("n_replicates must be at least 1".into()));
        }
        let rho = self.rho()?;
        let tau2 = self.tau2();
        if rho.len() != self.n_groups || tau2.len() != self.n_groups {
            return Err(Error::Config(format!(
                "rho_truth and tau2_truth need {} entries",
                self.n_groups
            )));
        }
        if rho.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("rho_truth entries must lie in [0, 1)".into()));
        }
        if tau2.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::Config(
                "tau2_truth entries must be non-negative".into(),
            ));
        }
        if !(self.g_df() > self.n_groups as f64 - 1.0) {
            return Err(Error::Config("g_truth_df too small".into()));
        }
        if !(self.g_scale()[(0, 0)] > 0.0) {
            return Err(Error::Config("g_truth_scale must be positive".into()));
        }
        match &self.population_mode {
            PopulationMode::Equal { n } if !(*n > 0.0 && n.is_finite()) => {
                Err(Error::Config("equal population n must be positive".into()))
            }
            PopulationMode::Synthetic {
                min,
                max,
                zero_fraction,
            } if !(*min > 0.0 && max >= min && (0.0..1.0).contains(zero_fraction)) => {
                Err(Error::Config("synthetic population bounds invalid".into()))
            }
            PopulationMode::Table { unit, .. } if !(*unit > 0.0) => {
                Err(Error::Config("population unit must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One `G_t` per time from InvWish(scale, df); ρ and τ² from the design.
/// Seeded from the design seed, so every replicate shares it.
pub fn draw_truth<R: Rng + ?Sized>(design: &SimDesign, rng: &mut R) -> Result<CovarianceSpec> {
    design.validate()?;
    let scale = design.g_scale();
    let g_list = (0..design.n_time)
        .map(|_| inv_wishart(&scale, design.g_df(), rng))
        .collect::<Result<Vec<_>>>()?;
    // τ² = 0 is allowed for generation but not as a model parameter.
    let tau2: Vec<f64> = design
        .tau2()
        .iter()
        .map(|t| t.max(f64::MIN_POSITIVE))
        .collect();
    CovarianceSpec::new(g_list, design.rho()?, tau2)
}

/// Draws `Z = Σ_ι v_ι ⊗ λ_ι^{-1/2} η_ι` over the nonzero eigenpairs of
/// `D − W` with `η_ι ~ N(0, Σ_η)`, returned site-major.
pub fn sample_field<R: Rng + ?Sized>(
    truth: &CovarianceSpec,
    basis: &SpectralBasis,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = basis.eigenvalues.len();
    let positive = basis.positive_indices();
    if positive.len() + 1 != n {
        return Err(Error::RankDeficiency {
            expected: n.saturating_sub(1),
            found: positive.len(),
        });
    }
    let (ng, nt) = (truth.n_groups(), truth.n_time());
    let q = ng * nt;
    // η = A · blockdiag(chol G_t) · ε.
    let g_chol: Vec<DMatrix<f64>> = truth
        .g_list()
        .iter()
        .map(|g| {
            nalgebra::Cholesky::new(g.clone())
                .map(|c| c.l())
                .ok_or_else(|| Error::NotPositiveDefinite("truth G_t".into()))
        })
        .collect::<Result<_>>()?;
    let rho = truth.rho();
    let mut z = vec![0.0; n * q];
    let mut u = vec![0.0; q];
    let mut eta = vec![0.0; q];
    for &j in &positive {
        for (t, l) in g_chol.iter().enumerate() {
            let e: Vec<f64> = (0..ng).map(|_| std_normal(rng)).collect();
            for k in 0..ng {
                u[t * ng + k] = (0..=k).map(|m| l[(k, m)] * e[m]).sum();
            }
        }
        // Per group, apply the AR(1) Cholesky factor as a recursion.
        for k in 0..ng {
            let r = rho[k];
            let s = (1.0 - r * r).sqrt();
            let mut prev = 0.0;
            for t in 0..nt {
                let v = if t == 0 {
                    u[k]
                } else {
                    r * prev + s * u[t * ng + k]
                };
                eta[t * ng + k] = v;
                prev = v;
            }
        }
        let scale = basis.eigenvalues[j].sqrt().recip();
        for i in 0..n {
            let w = basis.eigenvectors[(i, j)] * scale;
            for (zc, e) in z[i * q..(i + 1) * q].iter_mut().zip(&eta) {
                *zc += w * e;
            }
        }
    }
    Ok(z)
}

/// Per-cell weights `n` in 100,000-person units (0 marks a missing cell),
/// site-major.
pub fn design_populations(design: &SimDesign, sites: &SiteMap) -> Result<Vec<f64>> {
    let cells = sites.len() * design.n_groups * design.n_time;
    match &design.population_mode {
        PopulationMode::Equal { n } => Ok(vec![*n; cells]),
        PopulationMode::Table { path, unit } => {
            let table = io::read_population_table(
                std::fs::File::open(path)?,
                sites,
                design.n_groups,
                design.n_time,
            )?;
            Ok(table.persons.iter().map(|p| p / unit).collect())
        }
        PopulationMode::Synthetic {
            min,
            max,
            zero_fraction,
        } => Ok(synthetic_populations(
            sites.len(),
            design.n_groups,
            design.n_time,
            *min,
            *max,
            *zero_fraction,
            derive_seed(design.seed, &[SEED_POPULATION]),
        )
        .into_iter()
        .map(|p| p / POPULATION_UNIT)
        .collect()),
    }
}

/// Log-uniform populations, rounded to whole persons, in `[min, max]`;
/// last-group cells are zeroed with probability `zero_fraction`.
pub fn synthetic_populations(
    n_sites: usize,
    n_groups: usize,
    n_time: usize,
    min: f64,
    max: f64,
    zero_fraction: f64,
    seed: u64,
) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let (lo, hi) = (min.ln(), max.ln());
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let mut out = Vec::with_capacity(n_sites * n_groups * n_time);
    for _ in 0..n_sites {
        for _ in 0..n_time {
            for k in 0..n_groups {
                let n = (lo + (hi - lo) * unit.sample(&mut rng)).exp().round();
                let zero = k + 1 == n_groups && unit.sample(&mut rng) < zero_fraction;
                out.push(if zero { 0.0 } else { n });
            }
        }
    }
    out
}

/// Seed of the shipped synthetic population table.
pub const SYNTHETIC_TABLE_SEED: u64 = 2024;

/// The shipped table: 58 California sites, 3 groups, 10 times, 10² to 10⁴
/// persons per cell with 10% of last-group cells empty.
pub fn synthetic_table_california58() -> io::PopulationTable {
    io::PopulationTable {
        n_sites: 58,
        n_groups: 3,
        n_time: 10,
        persons: synthetic_populations(58, 3, 10, 1e2, 1e4, 0.1, SYNTHETIC_TABLE_SEED),
    }
}

/// `y = z + ε`, `ε ~ N(0, τ²_k / n)`; zero-weight cells are missing.
/// The dataset carries one intercept per time point.
pub fn generate_replicate<R: Rng + ?Sized>(
    design: &SimDesign,
    truth: &CovarianceSpec,
    field: &[f64],
    populations: &[f64],
    rng: &mut R,
) -> Result<RateDataset> {
    let (ng, nt) = (truth.n_groups(), truth.n_time());
    let cells = field.len();
    if populations.len() != cells || !cells.is_multiple_of(ng * nt) {
        return Err(Error::DimensionMismatch {
            context: "replicate populations vs field",
            expected: cells,
            actual: populations.len(),
        });
    }
    let tau2 = design.tau2();
    let mut y = vec![0.0; cells];
    let mut observed = vec![false; cells];
    for c in 0..cells {
        let k = c % ng;
        // Draw noise for every cell so the stream does not depend on which
        // cells are missing.
        let e = std_normal(rng);
        if populations[c] > 0.0 {
            y[c] = field[c] + e * (tau2[k] / populations[c]).sqrt();
            observed[c] = true;
        }
    }
    RateDataset::with_time_intercepts(cells / (ng * nt), ng, nt, y, populations.to_vec(), observed)
}

const SEED_TRUTH: u64 = 0;
const SEED_REPLICATE: u64 = 1;
const SEED_CHAIN: u64 = 2;
const SEED_POPULATION: u64 = 3;

/// Truth shared by every replicate of a design.
pub fn design_truth(design: &SimDesign) -> Result<CovarianceSpec> {
    draw_truth(
        design,
        &mut rng_from_seed(derive_seed(design.seed, &[SEED_TRUTH])),
    )
}

/// Field and data of replicate `l` (0-based).
pub fn design_replicate(
    design: &SimDesign,
    truth: &CovarianceSpec,
    basis: &SpectralBasis,
    populations: &[f64],
    l: usize,
) -> Result<(Vec<f64>, RateDataset)> {
    let mut rng = rng_from_seed(derive_seed(design.seed, &[SEED_REPLICATE, l as u64]));
    let field = sample_field(truth, basis, &mut rng)?;
    let data = generate_replicate(design, truth, &field, populations, &mut rng)?;
    Ok((field, data))
}

/// Seed of the chain fitting `variant` to replicate `l`.
pub fn chain_seed(design_seed: u64, l: usize, variant: Variant) -> u64 {
    let v = Variant::ALL.iter().position(|&x| x == variant).unwrap_or(0) as u64;
    derive_seed(design_seed, &[SEED_CHAIN, l as u64, v])
}

/// Model state at the simulation truth: β = 0, Z = field, imputed cells at Z.
pub fn truth_state(data: &RateDataset, truth: &CovarianceSpec, field: &[f64]) -> ModelState {
    ModelState {
        beta: vec![vec![0.0; data.n_covariates()]; data.n_groups()],
        z: field.to_vec(),
        spec: truth.clone(),
        y_imputed: data.missing_cells().into_iter().map(|c| field[c]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    /// Iteration budget; the seed field is ignored in favour of per-chain
    /// derived seeds and the variant is taken from `variants`.
    pub sampler: SamplerConfig,
    /// The first variant is the one whose coverage is reported as primary.
    pub variants: Vec<Variant>,
    pub truth_init: bool,
    /// Defaults to [`SimDesign::matched_prior`].
    pub prior: Option<PriorConfig>,
}

impl StudyConfig {
    /// 1,500 iterations keeping the last 500, truth-initialized.
    pub fn short_truth_init(variants: Vec<Variant>) -> Self {
        Self {
            sampler: SamplerConfig {
                n_iterations: 1500,
                burn_in: 1000,
                thin: 1,
                ..SamplerConfig::default()
            },
            variants,
            truth_init: true,
            prior: None,
        }
    }
}

/// Covered / total counts for one parameter family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub covered: usize,
    pub total: usize,
}

impl Tally {
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            100.0 * self.covered as f64 / self.total as f64
        }
    }

    fn add(&mut self, other: Tally) {
        self.covered += other.covered;
        self.total += other.total;
    }

    fn score(truth: &[f64], intervals: &[IntervalSummary]) -> Result<Tally> {
        let pct = diagnostics::coverage_score(truth, intervals)?;
        let covered = truth
            .iter()
            .zip(intervals)
            .filter(|(v, s)| s.covers(**v))
            .count();
        debug_assert!((pct - 100.0 * covered as f64 / truth.len().max(1) as f64).abs() < 1e-9);
        Ok(Tally {
            covered,
            total: truth.len(),
        })
    }
}

/// Coverage of one fit against the truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilyCoverage {
    pub z: Tally,
    pub g_diag: Tally,
    pub g_offdiag: Tally,
    pub tau2: Tally,
    pub rho: Tally,
    pub tau2_by_group: Vec<Tally>,
    pub rho_by_group: Vec<Tally>,
}

impl FamilyCoverage {
    fn add(&mut self, other: &FamilyCoverage) {
        self.z.add(other.z);
        self.g_diag.add(other.g_diag);
        self.g_offdiag.add(other.g_offdiag);
        self.tau2.add(other.tau2);
        self.rho.add(other.rho);
        merge_groups(&mut self.tau2_by_group, &other.tau2_by_group);
        merge_groups(&mut self.rho_by_group, &other.rho_by_group);
    }

    pub fn percentages(&self) -> CoveragePercent {
        CoveragePercent {
            z: self.z.percent(),
            g_diag: self.g_diag.percent(),
            g_offdiag: self.g_offdiag.percent(),
            tau2: self.tau2.percent(),
            rho: self.rho.percent(),
            tau2_by_group: self.tau2_by_group.iter().map(Tally::percent).collect(),
            rho_by_group: self.rho_by_group.iter().map(Tally::percent).collect(),
        }
    }
}

fn merge_groups(acc: &mut Vec<Tally>, other: &[Tally]) {
    if acc.len() < other.len() {
        acc.resize(other.len(), Tally::default());
    }
    for (a, b) in acc.iter_mut().zip(other) {
        a.add(*b);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveragePercent {
    pub z: f64,
    pub g_diag: f64,
    pub g_offdiag: f64,
    pub tau2: f64,
    pub rho: f64,
    pub tau2_by_group: Vec<f64>,
    pub rho_by_group: Vec<f64>,
}

/// Interval summaries per family in the canonical parameter order of
/// [`diagnostics::family_draws`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyIntervals {
    pub z: Vec<IntervalSummary>,
    pub g_diag: Vec<IntervalSummary>,
    pub g_offdiag: Vec<IntervalSummary>,
    pub tau2: Vec<IntervalSummary>,
    pub rho: Vec<IntervalSummary>,
}

impl FamilyIntervals {
    pub fn from_samples(samples: &PosteriorSamples) -> Result<Self> {
        let get = |f: Family| -> Result<Vec<IntervalSummary>> {
            Ok(diagnostics::interval_summary(samples, f)?
                .into_iter()
                .map(|r| r.summary)
                .collect())
        };
        Ok(Self {
            z: get(Family::Z)?,
            g_diag: get(Family::GDiag)?,
            g_offdiag: get(Family::GOffdiag)?,
            tau2: get(Family::Tau2)?,
            rho: get(Family::Rho)?,
        })
    }

    /// `(−∞, ∞)` everywhere, for harness checks.
    pub fn unbounded(n_sites: usize, n_groups: usize, n_time: usize) -> Self {
        let u = IntervalSummary::unbounded();
        Self {
            z: vec![u; n_sites * n_groups * n_time],
            g_diag: vec![u; n_time * n_groups],
            g_offdiag: vec![u; n_time * n_groups * (n_groups - 1) / 2],
            tau2: vec![u; n_groups],
            rho: vec![u; n_groups],
        }
    }
}

/// Truth values in the order of [`FamilyIntervals`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthValues {
    pub z: Vec<f64>,
    pub g_diag: Vec<f64>,
    pub g_offdiag: Vec<f64>,
    pub tau2: Vec<f64>,
    pub rho: Vec<f64>,
}

impl TruthValues {
    pub fn new(truth: &CovarianceSpec, field: &[f64]) -> Self {
        let ng = truth.n_groups();
        let mut g_diag = Vec::new();
        let mut g_offdiag = Vec::new();
        for g in truth.g_list() {
            for k in 0..ng {
                g_diag.push(g[(k, k)]);
                for k2 in k + 1..ng {
                    g_offdiag.push(g[(k, k2)]);
                }
            }
        }
        Self {
            z: field.to_vec(),
            g_diag,
            g_offdiag,
            tau2: truth.tau2().to_vec(),
            rho: truth.rho().to_vec(),
        }
    }
}

pub fn score_coverage(truth: &TruthValues, intervals: &FamilyIntervals) -> Result<FamilyCoverage> {
    let per_group = |t: &[f64], s: &[IntervalSummary]| -> Result<Vec<Tally>> {
        if t.len() != s.len() {
            return Err(Error::DimensionMismatch {
                context: "per-group truth vs intervals",
                expected: t.len(),
                actual: s.len(),
            });
        }
        t.iter()
            .zip(s)
            .map(|(v, i)| Tally::score(std::slice::from_ref(v), std::slice::from_ref(i)))
            .collect()
    };
    Ok(FamilyCoverage {
        z: Tally::score(&truth.z, &intervals.z)?,
        g_diag: Tally::score(&truth.g_diag, &intervals.g_diag)?,
        g_offdiag: Tally::score(&truth.g_offdiag, &intervals.g_offdiag)?,
        tau2: Tally::score(&truth.tau2, &intervals.tau2)?,
        rho: Tally::score(&truth.rho, &intervals.rho)?,
        tau2_by_group: per_group(&truth.tau2, &intervals.tau2)?,
        rho_by_group: per_group(&truth.rho, &intervals.rho)?,
    })
}

/// Agreement of imputed draws with the fitted mean `xᵀβ + Z` in one fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ImputationCheck {
    pub n_cells: usize,
    /// Cells whose mean difference lies within 3 Monte-Carlo standard errors.
    pub within_3se: usize,
    pub max_abs_z: f64,
    /// Sum of the per-cell standardized mean differences.
    pub sum_z: f64,
}

impl ImputationCheck {
    /// `Σ z / √N`, standard normal when every cell is unbiased.
    pub fn pooled_z(&self) -> f64 {
        if self.n_cells == 0 {
            0.0
        } else {
            self.sum_z / (self.n_cells as f64).sqrt()
        }
    }
}

pub fn imputation_check(samples: &PosteriorSamples, data: &RateDataset) -> ImputationCheck {
    let missing = data.missing_cells();
    let nd = samples.n_draws();
    let mut out = ImputationCheck {
        n_cells: missing.len(),
        ..Default::default()
    };
    if nd < 2 {
        return out;
    }
    for (m, &c) in missing.iter().enumerate() {
        let diffs: Vec<f64> = (0..nd)
            .map(|d| {
                let beta = samples.beta_groups(d);
                samples.y_imputed[d][m] - data.linear_predictor(c, &beta) - samples.z[d][c]
            })
            .collect();
        let mean = diffs.iter().sum::<f64>() / nd as f64;
        let var = diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nd - 1) as f64;
        let z = mean / (var / nd as f64).sqrt();
        if z.abs() <= 3.0 {
            out.within_3se += 1;
        }
        out.max_abs_z = out.max_abs_z.max(z.abs());
        out.sum_z += z;
    }
    out
}

/// Largest Geweke |z| over the τ², ρ and `G_t` diagonal traces.
pub fn max_geweke(samples: &PosteriorSamples) -> f64 {
    [Family::Tau2, Family::Rho, Family::GDiag]
        .into_iter()
        .flat_map(|f| diagnostics::family_draws(samples, f))
        .map(|(_, trace)| diagnostics::geweke_z(&trace).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub variant: Variant,
    pub dic: f64,
    pub p_d: f64,
    pub coverage: FamilyCoverage,
    pub imputation: ImputationCheck,
    pub max_geweke: f64,
    pub rho_acceptance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub fits: Vec<FitRecord>,
    pub error: Option<String>,
}

/// Head-to-head DIC comparison of the primary variant against another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DicComparison {
    pub primary: Variant,
    pub other: Variant,
    pub primary_wins: usize,
    pub other_wins: usize,
    /// Mean of `(DIC_other − DIC_primary) / |DIC_other|`.
    pub mean_relative_improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub n_replicates: usize,
    pub failures: usize,
    /// Pooled coverage percentages per fitted variant.
    pub coverage: BTreeMap<String, CoveragePercent>,
    pub dic: Vec<DicComparison>,
    pub imputation: ImputationCheck,
    /// Replicates whose primary-variant traces all have Geweke |z| < 4.
    pub stationary_replicates: usize,
    pub records: Vec<ReplicateRecord>,
}

impl CoverageReport {
    pub fn from_records(variants: &[Variant], mut records: Vec<ReplicateRecord>) -> Self {
        records.sort_by_key(|r| r.replicate);
        let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.error.is_none()).collect();
        let mut coverage = BTreeMap::new();
        for &v in variants {
            let mut acc = FamilyCoverage::default();
            for r in &ok {
                if let Some(f) = r.fits.iter().find(|f| f.variant == v) {
                    acc.add(&f.coverage);
                }
            }
            coverage.insert(v.name().to_string(), acc.percentages());
        }
        let mut dic = Vec::new();
        if let Some((&primary, others)) = variants.split_first() {
            for &other in others {
                let mut cmp = DicComparison {
                    primary,
                    other,
                    primary_wins: 0,
                    other_wins: 0,
                    mean_relative_improvement: 0.0,
                };
                let mut n = 0usize;
                for r in &ok {
                    let find = |v: Variant| r.fits.iter().find(|f| f.variant == v);
                    if let (Some(a), Some(b)) = (find(primary), find(other)) {
                        if a.dic < b.dic {
                            cmp.primary_wins += 1;
                        } else {
                            cmp.other_wins += 1;
                        }
                        cmp.mean_relative_improvement += (b.dic - a.dic) / b.dic.abs();
                        n += 1;
                    }
                }
                cmp.mean_relative_improvement /= n.max(1) as f64;
                dic.push(cmp);
            }
        }
        let mut imputation = ImputationCheck::default();
        let mut stationary_replicates = 0;
        for r in &ok {
            if let Some(f) = r.fits.first() {
                imputation.n_cells += f.imputation.n_cells;
                imputation.within_3se += f.imputation.within_3se;
                imputation.max_abs_z = imputation.max_abs_z.max(f.imputation.max_abs_z);
                imputation.sum_z += f.imputation.sum_z;
                if f.max_geweke < 4.0 {
                    stationary_replicates += 1;
                }
            }
        }
        Self {
            n_replicates: records.len(),
            failures: records.len() - ok.len(),
            coverage,
            dic,
            imputation,
            stationary_replicates,
            records,
        }
    }

    /// Flat per-replicate, per-variant CSV.
    pub fn write_records_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "replicate",
            "variant",
            "dic",
            "p_d",
            "z_coverage",
            "g_diag_coverage",
            "g_offdiag_coverage",
            "tau2_coverage",
            "rho_coverage",
            "imputed_cells",
            "imputed_within_3se",
            "max_geweke",
            "error",
        ])?;
        for r in &self.records {
            if let Some(e) = &r.error {
                let mut row = vec![(r.replicate + 1).to_string()];
                row.extend(std::iter::repeat_n(String::new(), 11));
                row.push(e.clone());
                w.write_record(&row)?;
                continue;
            }
            for f in &r.fits {
                let c = &f.coverage;
                w.write_record([
                    (r.replicate + 1).to_string(),
                    f.variant.name().to_string(),
                    f.dic.to_string(),
                    f.p_d.to_string(),
                    c.z.percent().to_string(),
                    c.g_diag.percent().to_string(),
                    c.g_offdiag.percent().to_string(),
                    c.tau2.percent().to_string(),
                    c.rho.percent().to_string(),
                    f.imputation.n_cells.to_string(),
                    f.imputation.within_3se.to_string(),
                    f.max_geweke.to_string(),
                    String::new(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores one fitted chain against its replicate truth.
pub fn fit_record(
    samples: &PosteriorSamples,
    data: &RateDataset,
    truth: &TruthValues,
) -> Result<FitRecord> {
    fit_record_with(
        samples,
        data,
        truth,
        &FamilyIntervals::from_samples(samples)?,
    )
}

/// As [`fit_record`], scoring coverage against supplied intervals.
pub fn fit_record_with(
    samples: &PosteriorSamples,
    data: &RateDataset,
    truth: &TruthValues,
    intervals: &FamilyIntervals,
) -> Result<FitRecord> {
    let d = diagnostics::dic(samples, data)?;
    Ok(FitRecord {
        variant: samples.variant,
        dic: d.dic,
        p_d: d.p_d,
        coverage: score_coverage(truth, intervals)?,
        imputation: imputation_check(samples, data),
        max_geweke: max_geweke(samples),
        rho_acceptance: samples.rho_acceptance.clone(),
    })
}

/// Fits every requested variant to one replicate.
pub fn fit_replicate(
    data: &RateDataset,
    graph: &AdjacencyGraph,
    truth: &CovarianceSpec,
    field: &[f64],
    prior: &PriorConfig,
    config: &StudyConfig,
    design_seed: u64,
    l: usize,
) -> Result<Vec<FitRecord>> {
    let truth_values = TruthValues::new(truth, field);
    config
        .variants
        .iter()
        .map(|&variant| {
            let sampler = SamplerConfig {
                variant,
                seed: chain_seed(design_seed, l, variant),
                ..config.sampler.clone()
            };
            let samples = if config.truth_init {
                run_chain_from(
                    data,
                    graph,
                    prior,
                    &sampler,
                    truth_state(data, truth, field),
                )?
            } else {
                run_chain(data, graph, prior, &sampler)?
            };
            fit_record(&samples, data, &truth_values)
        })
        .collect()
}

/// Runs the full study; replicates run in parallel on the current rayon
/// pool and the report does not depend on the thread count.
pub fn run_study(design: &SimDesign, config: &StudyConfig) -> Result<CoverageReport> {
    design.validate()?;
    if config.variants.is_empty() {
        return Err(Error::Config("no variants to fit".into()));
    }
    config.sampler.validate()?;
    let graph = design.graph.load()?;
    let sites = design.graph.site_map(graph.n_sites())?;
    let basis = spectral_basis(&graph)?;
    let truth = design_truth(design)?;
    let populations = design_populations(design, &sites)?;
    let prior = config
        .prior
        .clone()
        .unwrap_or_else(|| design.matched_prior());
    let records: Vec<ReplicateRecord> = (0..design.n_replicates)
        .into_par_iter()
        .map(|l| {
            let result = design_replicate(design, &truth, &basis, &populations, l).and_then(
                |(field, data)| {
                    fit_replicate(
                        &data,
                        &graph,
                        &truth,
                        &field,
                        &prior,
                        config,
                        design.seed,
                        l,
                    )
                },
            );
            match result {
                Ok(fits) => ReplicateRecord {
                    replicate: l,
                    fits,
                    error: None,
                },
                Err(e) => ReplicateRecord {
                    replicate: l,
                    fits: Vec::new(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(CoverageReport::from_records(&config.variants, records))
}
