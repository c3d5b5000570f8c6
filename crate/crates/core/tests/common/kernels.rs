//! Full-conditional versus joint log-density ratios for every kernel.
//!
//! For a kernel drawing θ from f(θ | rest), any two values θ_a, θ_b must
//! satisfy log f(θ_a) − log f(θ_b) = log p(θ_a, rest) − log p(θ_b, rest).

use mstcar::covariance::SigmaEtaFactor;
use mstcar::model::{log_inv_wishart, ModelState};
use mstcar::random::std_normal;
use mstcar::sampler::{
    beta_conditional, g_conditional, independent_sigma2_conditional, log_joint,
    rho_accept_log_ratio, separable_g_conditional, tau2_conditional, z_site_conditional, Variant,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{gauss_log, instance, inv_gamma_log, probe_spd, rng, Instance};

pub const PROBES: usize = 5;

fn joint(inst: &Instance, state: &ModelState, variant: Variant, unobserved: bool) -> f64 {
    log_joint(
        &inst.data,
        state,
        &inst.graph,
        &inst.prior,
        variant,
        unobserved,
    )
    .unwrap()
}

/// Largest |conditional ratio − joint ratio| per kernel.
pub fn kernel_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(seed ^ 0xD1CE);

    // β
    let inst = instance(seed, Variant::Mstcar);
    let conds = beta_conditional(&inst.data, &inst.state).unwrap();
    let mut err: f64 = 0.0;
    for (k, (mean, prec)) in conds.iter().enumerate() {
        for _ in 0..PROBES {
            let draw = |r: &mut _| -> DVector<f64> {
                mean + DVector::from_fn(mean.len(), |_, _| 0.4 * std_normal(r))
            };
            let (a, b) = (draw(&mut r), draw(&mut r));
            let mut sa = inst.state.clone();
            sa.beta[k] = a.iter().copied().collect();
            let mut sb = inst.state.clone();
            sb.beta[k] = b.iter().copied().collect();
            let cond = gauss_log(&a, mean, prec) - gauss_log(&b, mean, prec);
            let jnt =
                joint(&inst, &sa, Variant::Mstcar, true) - joint(&inst, &sb, Variant::Mstcar, true);
            err = err.max((cond - jnt).abs());
        }
    }
    out.push(("beta", err));

    // Z, one block per site
    let precision = SigmaEtaFactor::new(&inst.state.spec).unwrap().precision();
    let q = inst.data.block_len();
    let mut err: f64 = 0.0;
    for site in 0..inst.data.n_sites() {
        let (mean, prec) =
            z_site_conditional(site, &inst.data, &inst.state, &inst.graph, &precision).unwrap();
        for _ in 0..PROBES {
            let draw = |r: &mut _| -> DVector<f64> {
                &mean + DVector::from_fn(q, |_, _| 0.5 * std_normal(r))
            };
            let (a, b) = (draw(&mut r), draw(&mut r));
            let mut sa = inst.state.clone();
            sa.z[site * q..(site + 1) * q].copy_from_slice(a.as_slice());
            let mut sb = inst.state.clone();
            sb.z[site * q..(site + 1) * q].copy_from_slice(b.as_slice());
            let cond = gauss_log(&a, &mean, &prec) - gauss_log(&b, &mean, &prec);
            let jnt =
                joint(&inst, &sa, Variant::Mstcar, true) - joint(&inst, &sb, Variant::Mstcar, true);
            err = err.max((cond - jnt).abs());
        }
    }
    out.push(("z_site", err));

    // τ², against the joint with the unobserved rates integrated out
    let params = tau2_conditional(&inst.data, &inst.state).unwrap();
    let mut err: f64 = 0.0;
    for (k, &(shape, rate)) in params.iter().enumerate() {
        for _ in 0..PROBES {
            let (a, b): (f64, f64) = (r.random_range(0.2..3.0), r.random_range(0.2..3.0));
            let mut sa = inst.state.clone();
            sa.spec.set_tau2(k, a);
            let mut sb = inst.state.clone();
            sb.spec.set_tau2(k, b);
            let cond = inv_gamma_log(a, shape, rate) - inv_gamma_log(b, shape, rate);
            let jnt = joint(&inst, &sa, Variant::Mstcar, false)
                - joint(&inst, &sb, Variant::Mstcar, false);
            err = err.max((cond - jnt).abs());
        }
    }
    out.push(("tau2", err));

    // G_t
    let mut err: f64 = 0.0;
    for t in 0..inst.data.n_time() {
        let (scale, df) =
            g_conditional(t, &inst.state.z, &inst.graph, &inst.state.spec, &inst.prior).unwrap();
        for _ in 0..PROBES {
            let (a, b) = (probe_spd(&scale, &mut r), probe_spd(&scale, &mut r));
            let mut sa = inst.state.clone();
            sa.spec.set_g(t, a.clone()).unwrap();
            let mut sb = inst.state.clone();
            sb.spec.set_g(t, b.clone()).unwrap();
            let cond =
                log_inv_wishart(&a, &scale, df).unwrap() - log_inv_wishart(&b, &scale, df).unwrap();
            let jnt =
                joint(&inst, &sa, Variant::Mstcar, true) - joint(&inst, &sb, Variant::Mstcar, true);
            err = err.max((cond - jnt).abs());
        }
    }
    out.push(("g_t", err));

    // ρ_k: the MH log ratio is the joint ratio plus the logit Jacobian.
    let mut err: f64 = 0.0;
    for k in 0..inst.data.n_groups() {
        for _ in 0..PROBES {
            let proposed: f64 = r.random_range(0.02..0.98);
            let ratio = rho_accept_log_ratio(
                k,
                proposed,
                &inst.state.z,
                &inst.graph,
                &inst.state.spec,
                &inst.prior,
                Variant::Mstcar,
            )
            .unwrap()
            .unwrap();
            let current = inst.state.spec.rho()[k];
            let mut sa = inst.state.clone();
            sa.spec.set_rho(k, proposed).unwrap();
            let jac = (proposed * (1.0 - proposed)).ln() - (current * (1.0 - current)).ln();
            let jnt = joint(&inst, &sa, Variant::Mstcar, true)
                - joint(&inst, &inst.state, Variant::Mstcar, true);
            err = err.max((ratio - jnt - jac).abs());
        }
    }
    out.push(("rho", err));

    // Y_u: each imputed value is Gaussian around the fitted mean.
    let missing = inst.data.missing_cells();
    let mut err: f64 = 0.0;
    for (m, &c) in missing.iter().enumerate() {
        let k = inst.data.group_of(c);
        let mean = inst.data.linear_predictor(c, &inst.state.beta) + inst.state.z[c];
        let var = inst.state.spec.tau2()[k] / inst.data.pop()[c];
        for _ in 0..PROBES {
            let (a, b) = (
                mean + 3.0 * std_normal(&mut r),
                mean + 3.0 * std_normal(&mut r),
            );
            let mut sa = inst.state.clone();
            sa.y_imputed[m] = a;
            let mut sb = inst.state.clone();
            sb.y_imputed[m] = b;
            let cond = -0.5 * ((a - mean).powi(2) - (b - mean).powi(2)) / var;
            let jnt =
                joint(&inst, &sa, Variant::Mstcar, true) - joint(&inst, &sb, Variant::Mstcar, true);
            err = err.max((cond - jnt).abs());
        }
    }
    out.push(("y_unobserved", err));

    // Separable: one G shared by every time point, one shared ρ.
    let sep = instance(seed, Variant::Separable);
    let (scale, df) =
        separable_g_conditional(&sep.state.z, &sep.graph, &sep.state.spec, &sep.prior).unwrap();
    let nt = sep.data.n_time();
    let with_g = |g: &DMatrix<f64>| {
        let mut s = sep.state.clone();
        for t in 0..nt {
            s.spec.set_g(t, g.clone()).unwrap();
        }
        s
    };
    let mut err: f64 = 0.0;
    for _ in 0..PROBES {
        let (a, b) = (probe_spd(&scale, &mut r), probe_spd(&scale, &mut r));
        let cond =
            log_inv_wishart(&a, &scale, df).unwrap() - log_inv_wishart(&b, &scale, df).unwrap();
        let jnt = joint(&sep, &with_g(&a), Variant::Separable, true)
            - joint(&sep, &with_g(&b), Variant::Separable, true);
        err = err.max((cond - jnt).abs());
    }
    out.push(("separable_g", err));

    let mut err: f64 = 0.0;
    for _ in 0..PROBES {
        let proposed: f64 = r.random_range(0.02..0.98);
        let ratio = rho_accept_log_ratio(
            0,
            proposed,
            &sep.state.z,
            &sep.graph,
            &sep.state.spec,
            &sep.prior,
            Variant::Separable,
        )
        .unwrap()
        .unwrap();
        let current = sep.state.spec.rho()[0];
        let mut sa = sep.state.clone();
        for k in 0..sep.data.n_groups() {
            sa.spec.set_rho(k, proposed).unwrap();
        }
        let jac = (proposed * (1.0 - proposed)).ln() - (current * (1.0 - current)).ln();
        let jnt = joint(&sep, &sa, Variant::Separable, true)
            - joint(&sep, &sep.state, Variant::Separable, true);
        err = err.max((ratio - jnt - jac).abs());
    }
    out.push(("separable_rho", err));

    // Independent: σ²_k on the diagonal of every G_t.
    let ind = instance(seed, Variant::StcarIndependent);
    let params =
        independent_sigma2_conditional(&ind.state.z, &ind.graph, &ind.state.spec, &ind.prior)
            .unwrap();
    let with_s2 = |k: usize, v: f64| {
        let mut s = ind.state.clone();
        for t in 0..nt {
            let mut g = s.spec.g_list()[t].clone();
            g[(k, k)] = v;
            s.spec.set_g(t, g).unwrap();
        }
        s
    };
    let mut err: f64 = 0.0;
    for (k, &(shape, rate)) in params.iter().enumerate() {
        for _ in 0..PROBES {
            let (a, b): (f64, f64) = (r.random_range(0.2..4.0), r.random_range(0.2..4.0));
            let cond = inv_gamma_log(a, shape, rate) - inv_gamma_log(b, shape, rate);
            let jnt = joint(&ind, &with_s2(k, a), Variant::StcarIndependent, true)
                - joint(&ind, &with_s2(k, b), Variant::StcarIndependent, true);
            err = err.max((cond - jnt).abs());
        }
    }
    out.push(("independent_sigma2", err));

    out
}
