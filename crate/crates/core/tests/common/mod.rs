#![allow(dead_code)]

pub mod criteria;
pub mod kernels;

use mstcar::covariance::{ar1_cholesky, CovarianceSpec};
use mstcar::graph::AdjacencyGraph;
use mstcar::model::{ModelState, PriorConfig, RateDataset};
use mstcar::random::{inv_wishart, rng_from_seed, std_normal};
use mstcar::sampler::{project_to_variant, Variant};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rng_from_seed(seed)
}

pub fn random_spd<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| std_normal(rng));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

pub fn random_spec<R: Rng>(ng: usize, nt: usize, rng: &mut R) -> CovarianceSpec {
    let g = (0..nt).map(|_| random_spd(ng, rng)).collect();
    let rho = (0..ng).map(|_| rng.random_range(0.05..0.95)).collect();
    let tau2 = (0..ng).map(|_| rng.random_range(0.3..2.0)).collect();
    CovarianceSpec::new(g, rho, tau2).unwrap()
}

/// 4-cycle with one chord.
pub fn small_graph() -> AdjacencyGraph {
    AdjacencyGraph::new(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]).unwrap()
}

/// Random connected graph: a spanning path plus random chords.
pub fn random_graph<R: Rng>(n: usize, rng: &mut R) -> AdjacencyGraph {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    for a in 0..n {
        for b in a + 2..n {
            if rng.random_bool(0.3) {
                edges.push((a, b));
            }
        }
    }
    AdjacencyGraph::new(n, &edges).unwrap()
}

/// Small dataset with per-time intercepts and one unobserved cell.
pub struct Instance {
    pub graph: AdjacencyGraph,
    pub data: RateDataset,
    pub state: ModelState,
    pub prior: PriorConfig,
}

pub fn instance(seed: u64, variant: Variant) -> Instance {
    instance_with(seed, variant, true)
}

pub fn instance_with(seed: u64, variant: Variant, with_missing: bool) -> Instance {
    let mut r = rng(seed);
    let (ns, ng, nt) = (4, 2, 2);
    let graph = small_graph();
    let cells = ns * ng * nt;
    let y: Vec<f64> = (0..cells).map(|_| 3.0 + std_normal(&mut r)).collect();
    let pop: Vec<f64> = (0..cells).map(|_| r.random_range(0.5..3.0)).collect();
    let mut observed = vec![true; cells];
    if with_missing {
        observed[5] = false;
    }
    let data = RateDataset::with_time_intercepts(ns, ng, nt, y, pop, observed).unwrap();
    let spec = random_spec(ng, nt, &mut r);
    let state = ModelState {
        beta: (0..ng)
            .map(|_| (0..nt).map(|_| 3.0 + 0.3 * std_normal(&mut r)).collect())
            .collect(),
        z: (0..cells).map(|_| 0.5 * std_normal(&mut r)).collect(),
        spec,
        y_imputed: if with_missing { vec![2.5] } else { vec![] },
    };
    let state = project_to_variant(&state, variant).unwrap();
    let prior = PriorConfig {
        rho_beta_a: 3.0,
        rho_beta_b: 1.5,
        g_scale: random_spd(ng, &mut r),
        g_df: ng as f64 + 3.0,
    };
    Instance {
        graph,
        data,
        state,
        prior,
    }
}

/// Random draw from an inverse-Wishart around `scale`, used as a probe.
pub fn probe_spd<R: Rng>(scale: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    inv_wishart(scale, scale.nrows() as f64 + 6.0, rng).unwrap() * 4.0
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac, br, bc) = (a.nrows(), a.ncols(), b.nrows(), b.ncols());
    DMatrix::from_fn(ar * br, ac * bc, |i, j| {
        a[(i / br, j / bc)] * b[(i % br, j % bc)]
    })
}

pub fn dense_ar1(rho: f64, nt: usize) -> DMatrix<f64> {
    DMatrix::from_fn(nt, nt, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// Σ_η by the explicit sum `Σ_s R̃_k[t,s] G_s[k,k'] R̃_k'[t',s]`.
pub fn brute_sigma_eta(spec: &CovarianceSpec) -> DMatrix<f64> {
    let (ng, nt) = (spec.n_groups(), spec.n_time());
    let chol: Vec<DMatrix<f64>> = spec
        .rho()
        .iter()
        .map(|&r| dense_ar1(r, nt).cholesky().unwrap().l())
        .collect();
    DMatrix::from_fn(ng * nt, ng * nt, |a, b| {
        let (t, k) = (a / ng, a % ng);
        let (t2, k2) = (b / ng, b % ng);
        (0..nt)
            .map(|s| chol[k][(t, s)] * spec.g_list()[s][(k, k2)] * chol[k2][(t2, s)])
            .sum()
    })
}

/// Dense mixing matrix A assembled from the closed-form factors.
pub fn dense_mixing(rho: &[f64], nt: usize) -> DMatrix<f64> {
    let ng = rho.len();
    let mut a = DMatrix::zeros(ng * nt, ng * nt);
    for (k, &r) in rho.iter().enumerate() {
        let l = ar1_cholesky(r, nt).unwrap();
        for t in 0..nt {
            for s in 0..nt {
                a[(t * ng + k, s * ng + k)] = l[(t, s)];
            }
        }
    }
    a
}

/// Gaussian log density up to a constant, from mean and precision.
pub fn gauss_log(x: &DVector<f64>, mean: &DVector<f64>, precision: &DMatrix<f64>) -> f64 {
    let d = x - mean;
    -0.5 * (d.transpose() * precision * &d)[(0, 0)]
}

/// InvGamma(shape, rate) log density up to a constant.
pub fn inv_gamma_log(x: f64, shape: f64, rate: f64) -> f64 {
    -(shape + 1.0) * x.ln() - rate / x
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        (a - b).abs() <= tol,
        "{what}: {a} vs {b} (diff {:e})",
        (a - b).abs()
    );
}
