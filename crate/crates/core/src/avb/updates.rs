//! Closed-form mean-field updates. Each one maximises the criterion over a
//! single factor of q with everything else held fixed.

use nalgebra::{DMatrix, DVector};

use super::QState;
use crate::error::Result;
use crate::linalg::{trace_product, SpdFactor};
use crate::model::ModelContext;

/// `E[eta] P1^- + E[lambda] P2^-`.
fn expected_factor_precision(q: &QState, ctx: &ModelContext) -> DMatrix<f64> {
    ctx.pen.precision(q.g_eta.mean_gamma(), q.g_lambda.mean_gamma())
}

pub fn update_q_f1(q: &mut QState, ctx: &ModelContext) -> Result<()> {
    let (p, n) = (ctx.p(), ctx.n());
    let g = ctx.cfg.gamma_sum();
    let kappa = ctx.cfg.kappa();
    let mut weight = 0.0;
    let mut target = DVector::zeros(p);
    for i in 0..n {
        let (m0, _) = q.z0_moments(i);
        weight += q.var_z1q[i] + q.mu_z1[i] * q.mu_z1[i];
        let r = q.registered.column(i) - DVector::from_element(p, m0) - &q.mu_f2 * (kappa * q.mu_z2[i]);
        target += r * q.mu_z1[i];
    }
    let a = &ctx.pen.sigma_inv * (g * weight) + expected_factor_precision(q, ctx);
    let fac = SpdFactor::new(&a, "q(f1) precision")?;
    q.mu_f1 = fac.solve(&(&ctx.pen.sigma_inv * target * g));
    q.cov_f1 = fac.inverse();
    Ok(())
}

pub fn update_q_f2(q: &mut QState, ctx: &ModelContext) -> Result<()> {
    let (p, n) = (ctx.p(), ctx.n());
    let g = ctx.cfg.gamma_sum();
    let kappa = ctx.cfg.kappa();
    let mut weight = 0.0;
    let mut target = DVector::zeros(p);
    for i in 0..n {
        let (m0, _) = q.z0_moments(i);
        weight += q.var_z2q[i] + q.mu_z2[i] * q.mu_z2[i];
        let r = q.registered.column(i) - DVector::from_element(p, m0) - &q.mu_f1 * q.mu_z1[i];
        target += r * q.mu_z2[i];
    }
    let a = &ctx.pen.sigma_inv * (g * kappa * kappa * weight) + expected_factor_precision(q, ctx);
    let fac = SpdFactor::new(&a, "q(f2) precision")?;
    q.mu_f2 = fac.solve(&(&ctx.pen.sigma_inv * target * (g * kappa)));
    q.cov_f2 = fac.inverse();
    Ok(())
}

/// Joint update of the free shifts `z0_1..z0_{N-1}`.
///
/// With the last shift tied to `-sum` of the others the free shifts are
/// coupled through a rank-one term, so the block optimum is solved exactly
/// (Sherman-Morrison) rather than by coordinate sweeps. The optimal
/// factorised variances are `1 / (E[1/s0^2] + 2 * g * 1'Sigma^-1 1)`.
pub fn update_q_z0(q: &mut QState, ctx: &ModelContext) {
    let n = ctx.n();
    let g = ctx.cfg.gamma_sum() * ctx.ones_sigma_inv_ones;
    let kappa = ctx.cfg.kappa();
    let tau = q.ig_z0.mean_gamma();
    let u: Vec<f64> = (0..n)
        .map(|i| {
            let r = q.registered.column(i) - &q.mu_f1 * q.mu_z1[i] - &q.mu_f2 * (kappa * q.mu_z2[i]);
            ctx.cfg.gamma_sum() * ctx.sigma_inv_ones.dot(&r)
        })
        .collect();
    let m = n - 1;
    let rhs: Vec<f64> = (0..m).map(|i| u[i] - u[n - 1]).collect();
    let alpha = tau + g;
    let total: f64 = rhs.iter().sum();
    let shrink = g / (alpha + g * m as f64) * total;
    q.mu_z0 = rhs.iter().map(|b| (b - shrink) / alpha).collect();
    q.var_z0q = vec![1.0 / (tau + 2.0 * g); m];
}

pub fn update_q_z1(q: &mut QState, ctx: &ModelContext) {
    let p = ctx.p();
    let g = ctx.cfg.gamma_sum();
    let kappa = ctx.cfg.kappa();
    let tau = q.ig_z1.mean_gamma();
    let energy = g * trace_product(&q.second_moment_f1(), &ctx.pen.sigma_inv);
    let var = 1.0 / (tau + energy);
    let sf = &ctx.pen.sigma_inv * &q.mu_f1;
    for i in 0..ctx.n() {
        let (m0, _) = q.z0_moments(i);
        let r = q.registered.column(i) - DVector::from_element(p, m0) - &q.mu_f2 * (kappa * q.mu_z2[i]);
        q.mu_z1[i] = var * (tau + g * sf.dot(&r));
        q.var_z1q[i] = var;
    }
}

pub fn update_q_z2(q: &mut QState, ctx: &ModelContext) {
    let p = ctx.p();
    let g = ctx.cfg.gamma_sum();
    let kappa = ctx.cfg.kappa();
    let tau = q.ig_z2.mean_gamma();
    let energy = g * kappa * kappa * trace_product(&q.second_moment_f2(), &ctx.pen.sigma_inv);
    let var = 1.0 / (tau + energy);
    let sf = &ctx.pen.sigma_inv * &q.mu_f2;
    for i in 0..ctx.n() {
        let (m0, _) = q.z0_moments(i);
        let r = q.registered.column(i) - DVector::from_element(p, m0) - &q.mu_f1 * q.mu_z1[i];
        q.mu_z2[i] = var * g * kappa * sf.dot(&r);
        q.var_z2q[i] = var;
    }
}

/// `q(z0)`, `q(z1)`, `q(z2)` in that order.
pub fn update_q_z(q: &mut QState, ctx: &ModelContext) {
    update_q_z0(q, ctx);
    update_q_z1(q, ctx);
    update_q_z2(q, ctx);
}

/// Rates of `q(eta), q(lambda)` and of the three weight variances. Shapes
/// never change after initialisation.
pub fn update_q_hyper(q: &mut QState, ctx: &ModelContext) {
    let cfg = &ctx.cfg;
    let m = q.second_moment_f1() + q.second_moment_f2();
    q.g_eta.rate = cfg.d + 0.5 * trace_product(&ctx.pen.p1_prec, &m);
    q.g_lambda.rate = cfg.d + 0.5 * trace_product(&ctx.pen.p2_prec, &m);
    let n = ctx.n();
    let z0: f64 = (0..n - 1).map(|i| q.var_z0q[i] + q.mu_z0[i] * q.mu_z0[i]).sum();
    let z1: f64 = (0..n).map(|i| q.var_z1q[i] + (q.mu_z1[i] - 1.0).powi(2)).sum();
    let z2: f64 = (0..n).map(|i| q.var_z2q[i] + q.mu_z2[i] * q.mu_z2[i]).sum();
    q.ig_z0.rate = cfg.b + 0.5 * z0;
    q.ig_z1.rate = cfg.b + 0.5 * z1;
    q.ig_z2.rate = cfg.b + 0.5 * z2;
}

