//! Posterior summaries: quantile intervals, DIC, coverage, population
//! weighted trends, Σ_η summaries and simple trace diagnostics.
//!
//! Quantiles use the type-7 rule (linear interpolation between order
//! statistics at position `(n − 1) p`), the default of R and NumPy.

use serde::{Deserialize, Serialize};

use crate::covariance::assemble_sigma_eta;
use crate::error::{Error, Result};
use crate::model::{observed_log_likelihood, RateDataset};
use crate::sampler::PosteriorSamples;

/// Type-7 quantile of already sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and equal-tail 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl IntervalSummary {
    pub fn from_draws(draws: &[f64]) -> Self {
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            median: quantile_sorted(&sorted, 0.5),
            lower: quantile_sorted(&sorted, 0.025),
            upper: quantile_sorted(&sorted, 0.975),
        }
    }

    /// An interval that covers everything.
    pub fn unbounded() -> Self {
        Self {
            median: 0.0,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Parameter families that can be summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Beta,
    Z,
    GDiag,
    GOffdiag,
    Tau2,
    Rho,
    Imputed,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Beta,
        Family::Z,
        Family::GDiag,
        Family::GOffdiag,
        Family::Tau2,
        Family::Rho,
        Family::Imputed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Beta => "beta",
            Family::Z => "z",
            Family::GDiag => "g_diag",
            Family::GOffdiag => "g_offdiag",
            Family::Tau2 => "tau2",
            Family::Rho => "rho",
            Family::Imputed => "imputed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown parameter family `{s}`")))
    }
}

/// Identifies one scalar parameter. Indices are 0-based; `group2` is set
/// only for off-diagonal `G_t` entries. For β, `time` holds the covariate
/// index (which is the time index under per-time intercepts).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParameterKey {
    pub family: Family,
    pub site: Option<usize>,
    pub group: Option<usize>,
    pub group2: Option<usize>,
    pub time: Option<usize>,
}

impl ParameterKey {
    fn new(family: Family) -> Self {
        Self {
            family,
            site: None,
            group: None,
            group2: None,
            time: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub key: ParameterKey,
    pub summary: IntervalSummary,
}

/// Keys and per-draw values for every scalar parameter of a family.
pub fn family_draws(samples: &PosteriorSamples, family: Family) -> Vec<(ParameterKey, Vec<f64>)> {
    let (ns, ng, nt, p) = (
        samples.n_sites,
        samples.n_groups,
        samples.n_time,
        samples.n_covariates,
    );
    let q = ng * nt;
    let collect =
        |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..samples.n_draws()).map(f).collect() };
    let mut out = Vec::new();
    match family {
        Family::Beta => {
            for k in 0..ng {
                for j in 0..p {
                    let key = ParameterKey {
                        group: Some(k),
                        time: Some(j),
                        ..ParameterKey::new(family)
                    };
                    out.push((key, collect(&|d| samples.beta[d][k * p + j])));
                }
            }
        }
        Family::Z => {
            for i in 0..ns {
                for t in 0..nt {
                    for k in 0..ng {
                        let key = ParameterKey {
                            site: Some(i),
                            group: Some(k),
                            time: Some(t),
                            ..ParameterKey::new(family)
                        };
                        let c = i * q + t * ng + k;
                        out.push((key, collect(&|d| samples.z[d][c])));
                    }
                }
            }
        }
        Family::GDiag | Family::GOffdiag => {
            for t in 0..nt {
                for k in 0..ng {
                    let range = if family == Family::GDiag {
                        k..k + 1
                    } else {
                        k + 1..ng
                    };
                    for k2 in range {
                        let key = ParameterKey {
                            group: Some(k),
                            group2: (family == Family::GOffdiag).then_some(k2),
                            time: Some(t),
                            ..ParameterKey::new(family)
                        };
                        out.push((key, collect(&|d| samples.spec[d].g_list()[t][(k, k2)])));
                    }
                }
            }
        }
        Family::Tau2 | Family::Rho => {
            for k in 0..ng {
                let key = ParameterKey {
                    group: Some(k),
                    ..ParameterKey::new(family)
                };
                let values = if family == Family::Tau2 {
                    collect(&|d| samples.spec[d].tau2()[k])
                } else {
                    collect(&|d| samples.spec[d].rho()[k])
                };
                out.push((key, values));
            }
        }
        Family::Imputed => {
            let n_missing = samples.y_imputed.first().map_or(0, Vec::len);
            for m in 0..n_missing {
                let key = ParameterKey {
                    site: Some(m),
                    ..ParameterKey::new(family)
                };
                out.push((key, collect(&|d| samples.y_imputed[d][m])));
            }
        }
    }
    out
}

/// Median and 95% interval for every parameter in a family.
pub fn interval_summary(samples: &PosteriorSamples, family: Family) -> Result<Vec<SummaryRow>> {
    if samples.n_draws() == 0 {
        return Err(Error::InsufficientDraws { needed: 1, have: 0 });
    }
    Ok(family_draws(samples, family)
        .into_iter()
        .map(|(key, draws)| SummaryRow {
            key,
            summary: IntervalSummary::from_draws(&draws),
        })
        .collect())
}

/// Deviance information criterion over the observed cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DicResult {
    pub dic: f64,
    pub p_d: f64,
    pub d_bar: f64,
    pub d_at_mean: f64,
}

/// `D(θ) = −2 log p(Y_o | β, Z, τ²)`; the plug-in uses posterior means of
/// β, Z and τ². Imputed cells are parameters, not data, and are excluded.
pub fn dic(samples: &PosteriorSamples, data: &RateDataset) -> Result<DicResult> {
    let n = samples.n_draws();
    if n < 2 {
        return Err(Error::InsufficientDraws { needed: 2, have: n });
    }
    if samples.n_sites != data.n_sites()
        || samples.n_groups != data.n_groups()
        || samples.n_time != data.n_time()
    {
        return Err(Error::DimensionMismatch {
            context: "samples vs dataset cells",
            expected: data.n_cells(),
            actual: samples.n_sites * samples.n_groups * samples.n_time,
        });
    }
    let mut d_sum = 0.0;
    let mut beta_mean = vec![0.0; samples.beta[0].len()];
    let mut z_mean = vec![0.0; data.n_cells()];
    let mut tau2_mean = vec![0.0; data.n_groups()];
    for d in 0..n {
        let beta = samples.beta_groups(d);
        let tau2 = samples.spec[d].tau2();
        d_sum += -2.0 * observed_log_likelihood(data, &beta, &samples.z[d], tau2);
        for (m, v) in beta_mean.iter_mut().zip(&samples.beta[d]) {
            *m += v;
        }
        for (m, v) in z_mean.iter_mut().zip(&samples.z[d]) {
            *m += v;
        }
        for (m, v) in tau2_mean.iter_mut().zip(tau2) {
            *m += v;
        }
    }
    let nf = n as f64;
    for v in beta_mean
        .iter_mut()
        .chain(&mut z_mean)
        .chain(&mut tau2_mean)
    {
        *v /= nf;
    }
    let beta_mean: Vec<Vec<f64>> = beta_mean
        .chunks(samples.n_covariates)
        .map(<[f64]>::to_vec)
        .collect();
    let d_bar = d_sum / nf;
    let d_at_mean = -2.0 * observed_log_likelihood(data, &beta_mean, &z_mean, &tau2_mean);
    let p_d = d_bar - d_at_mean;
    Ok(DicResult {
        dic: d_bar + p_d,
        p_d,
        d_bar,
        d_at_mean,
    })
}

/// Population-weighted mean of the fitted values `xᵀβ_k + Z` over sites,
/// summarized across draws, for each time point.
pub fn nationwide_trend(
    samples: &PosteriorSamples,
    data: &RateDataset,
    group: usize,
) -> Result<Vec<IntervalSummary>> {
    if samples.n_draws() == 0 {
        return Err(Error::InsufficientDraws { needed: 1, have: 0 });
    }
    if group >= data.n_groups() {
        return Err(Error::DimensionMismatch {
            context: "group index",
            expected: data.n_groups(),
            actual: group,
        });
    }
    let mut out = Vec::with_capacity(data.n_time());
    for t in 0..data.n_time() {
        let cells: Vec<usize> = (0..data.n_sites())
            .map(|i| data.cell(i, group, t))
            .collect();
        let total: f64 = cells.iter().map(|&c| data.pop()[c]).sum();
        if !(total > 0.0) {
            return Err(Error::ZeroTotalPopulation {
                group: group + 1,
                time: t + 1,
            });
        }
        let draws: Vec<f64> = (0..samples.n_draws())
            .map(|d| {
                let beta = samples.beta_groups(d);
                cells
                    .iter()
                    .map(|&c| (data.linear_predictor(c, &beta) + samples.z[d][c]) * data.pop()[c])
                    .sum::<f64>()
                    / total
            })
            .collect();
        out.push(IntervalSummary::from_draws(&draws));
    }
    Ok(out)
}

/// Summaries of `diag(Σ_η)` per `(t, k)` and of the between-group
/// correlations within each time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaEtaSummary {
    /// `variances[t][k]`
    pub variances: Vec<Vec<IntervalSummary>>,
    /// `(t, k, k2, summary)` for `k < k2`.
    pub correlations: Vec<(usize, usize, usize, IntervalSummary)>,
}

pub fn sigma_eta_summary(samples: &PosteriorSamples) -> Result<SigmaEtaSummary> {
    let n = samples.n_draws();
    if n == 0 {
        return Err(Error::InsufficientDraws { needed: 1, have: 0 });
    }
    let (ng, nt) = (samples.n_groups, samples.n_time);
    let mut var_draws = vec![vec![Vec::with_capacity(n); ng]; nt];
    let n_pairs = ng * ng.saturating_sub(1) / 2;
    let mut corr_draws = vec![vec![Vec::with_capacity(n); n_pairs]; nt];
    for spec in &samples.spec {
        let sigma = assemble_sigma_eta(spec)?;
        for t in 0..nt {
            let mut pair = 0;
            #[allow(clippy::needless_range_loop)]
            for k in 0..ng {
                let a = t * ng + k;
                var_draws[t][k].push(sigma[(a, a)]);
                for k2 in k + 1..ng {
                    let b = t * ng + k2;
                    corr_draws[t][pair]
                        .push(sigma[(a, b)] / (sigma[(a, a)] * sigma[(b, b)]).sqrt());
                    pair += 1;
                }
            }
        }
    }
    let variances = var_draws
        .iter()
        .map(|row| row.iter().map(|d| IntervalSummary::from_draws(d)).collect())
        .collect();
    let mut correlations = Vec::new();
    for (t, pairs) in corr_draws.iter().enumerate() {
        let mut pair = 0;
        for k in 0..ng {
            for k2 in k + 1..ng {
                correlations.push((t, k, k2, IntervalSummary::from_draws(&pairs[pair])));
                pair += 1;
            }
        }
    }
    Ok(SigmaEtaSummary {
        variances,
        correlations,
    })
}

/// Percentage of intervals containing their truth.
pub fn coverage_score(truth: &[f64], intervals: &[IntervalSummary]) -> Result<f64> {
    if truth.len() != intervals.len() {
        return Err(Error::DimensionMismatch {
            context: "truth vs intervals",
            expected: truth.len(),
            actual: intervals.len(),
        });
    }
    if truth.is_empty() {
        return Ok(100.0);
    }
    let hits = truth
        .iter()
        .zip(intervals)
        .filter(|(v, s)| s.covers(**v))
        .count();
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

/// Effective sample size with Geyer's initial positive sequence.
pub fn effective_sample_size(trace: &[f64]) -> f64 {
    let n = trace.len();
    if n < 4 {
        return n as f64;
    }
    let mean = trace.iter().sum::<f64>() / n as f64;
    let var = trace.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| {
        (0..n - lag)
            .map(|i| (trace[i] - mean) * (trace[i + lag] - mean))
            .sum::<f64>()
            / (n as f64 * var)
    };
    let mut sum = 0.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = acf(lag) + acf(lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        lag += 2;
    }
    n as f64 / (1.0 + 2.0 * sum).max(1.0 / n as f64)
}

/// Geweke-style z statistic comparing the mean of the first 20% of a trace
/// with the last 50%, each standard error corrected by its effective size.
pub fn geweke_z(trace: &[f64]) -> f64 {
    let n = trace.len();
    let first = &trace[..(n / 5).max(2)];
    let last = &trace[n - (n / 2).max(2)..];
    let moments = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        (m, v / effective_sample_size(x))
    };
    let (ma, va) = moments(first);
    let (mb, vb) = moments(last);
    let se = (va + vb).sqrt();
    if se == 0.0 {
        if ma == mb {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (ma - mb) / se
    }
}
