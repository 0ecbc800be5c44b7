//! The variational lower bound, split by term.

use super::{QState, ShapeRate};
use crate::error::Result;
use crate::linalg::{trace_product, SpdFactor};
use crate::model::ModelContext;
use crate::stats::ln_gamma;

/// Contributions to the criterion. `data` is the expected log likelihood;
/// every other field is `E[log prior] + entropy` for one factor of q, and
/// `bases` is the log prior of the point-estimated base functions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboTerms {
    pub data: f64,
    pub f1: f64,
    pub f2: f64,
    pub z0: f64,
    pub z1: f64,
    pub z2: f64,
    pub var_z0: f64,
    pub var_z1: f64,
    pub var_z2: f64,
    pub eta: f64,
    pub lambda: f64,
    pub bases: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.data
            + self.f1
            + self.f2
            + self.z0
            + self.z1
            + self.z2
            + self.var_z0
            + self.var_z1
            + self.var_z2
            + self.eta
            + self.lambda
            + self.bases
    }
}

pub fn elbo(q: &QState, ctx: &ModelContext, gamma_w: f64) -> Result<f64> {
    Ok(elbo_terms(q, ctx, gamma_w)?.total())
}

pub fn elbo_terms(q: &QState, ctx: &ModelContext, gamma_w: f64) -> Result<ElboTerms> {
    let cfg = &ctx.cfg;
    let (p, n) = (ctx.p(), ctx.n());
    let g = cfg.gamma_sum();
    let kappa = cfg.kappa();
    let si = &ctx.pen.sigma_inv;

    // expected log likelihood
    let m1 = q.second_moment_f1();
    let m2 = q.second_moment_f2();
    let tr1 = trace_product(&m1, si);
    let tr2 = trace_product(&m2, si);
    let si_f1 = si * &q.mu_f1;
    let si_f2 = si * &q.mu_f2;
    let one_f1 = ctx.sigma_inv_ones.dot(&q.mu_f1);
    let one_f2 = ctx.sigma_inv_ones.dot(&q.mu_f2);
    let f1_f2 = q.mu_f1.dot(&si_f2);
    let norm = ctx.data_log_norm();
    let mut data = 0.0;
    for i in 0..n {
        let x = q.registered.column(i);
        let (e0, e00) = q.z0_moments(i);
        let e11 = q.var_z1q[i] + q.mu_z1[i] * q.mu_z1[i];
        let e22 = q.var_z2q[i] + q.mu_z2[i] * q.mu_z2[i];
        let (e1, e2) = (q.mu_z1[i], q.mu_z2[i]);
        let xx = x.dot(&(si * x));
        let xm = e0 * ctx.sigma_inv_ones.dot(&x) + e1 * si_f1.dot(&x) + kappa * e2 * si_f2.dot(&x);
        let mm = e00 * ctx.ones_sigma_inv_ones
            + e11 * tr1
            + kappa * kappa * e22 * tr2
            + 2.0 * e0 * e1 * one_f1
            + 2.0 * kappa * e0 * e2 * one_f2
            + 2.0 * kappa * e1 * e2 * f1_f2;
        data += norm - 0.5 * g * (xx - 2.0 * xm + mm);
    }

    // factors
    let e_eta = q.g_eta.mean_gamma();
    let e_lambda = q.g_lambda.mean_gamma();
    let e_ln_det = 2.0 * q.g_eta.mean_ln_gamma()
        + (p - 2) as f64 * q.g_lambda.mean_ln_gamma()
        + ctx.pen.ln_pdet_p2_prec;
    let factor = |m: &nalgebra::DMatrix<f64>, cov: &nalgebra::DMatrix<f64>| -> Result<f64> {
        let ln_det_cov = SpdFactor::new(cov, "q factor covariance")?.ln_det();
        let energy = e_eta * trace_product(&ctx.pen.p1_prec, m) + e_lambda * trace_product(&ctx.pen.p2_prec, m);
        Ok(0.5 * e_ln_det - 0.5 * energy + 0.5 * ln_det_cov + 0.5 * p as f64)
    };
    let f1 = factor(&m1, &q.cov_f1)?;
    let f2 = factor(&m2, &q.cov_f2)?;

    // weights: E[log N(z; m, s^2)] + H[N(mu, v)] with s^2 ~ IG
    let weight = |mu: &[f64], var: &[f64], prior_mean: f64, ig: &ShapeRate| {
        let e_prec = ig.mean_gamma();
        let e_ln_var = ig.mean_ln_inv_gamma();
        mu.iter()
            .zip(var)
            .map(|(m, v)| -0.5 * e_ln_var - 0.5 * e_prec * (v + (m - prior_mean).powi(2)) + 0.5 * v.ln() + 0.5)
            .sum::<f64>()
    };
    let z0 = weight(&q.mu_z0, &q.var_z0q, 0.0, &q.ig_z0);
    let z1 = weight(&q.mu_z1, &q.var_z1q, 1.0, &q.ig_z1);
    let z2 = weight(&q.mu_z2, &q.var_z2q, 0.0, &q.ig_z2);

    let inv_gamma_kl = |q: &ShapeRate| {
        let (a, b) = (cfg.a, cfg.b);
        let e_ln = q.mean_ln_inv_gamma();
        let e_inv = q.mean_gamma();
        let prior = a * b.ln() - ln_gamma(a) - (a + 1.0) * e_ln - b * e_inv;
        let own = q.shape * q.rate.ln() - ln_gamma(q.shape) - (q.shape + 1.0) * e_ln - q.rate * e_inv;
        prior - own
    };
    let gamma_kl = |q: &ShapeRate| {
        let (c, d) = (cfg.c, cfg.d);
        let e_ln = q.mean_ln_gamma();
        let e = q.mean_gamma();
        let prior = c * d.ln() - ln_gamma(c) + (c - 1.0) * e_ln - d * e;
        let own = q.shape * q.rate.ln() - ln_gamma(q.shape) + (q.shape - 1.0) * e_ln - q.rate * e;
        prior - own
    };

    let base_prior = ctx.base_prior(gamma_w)?;
    let mut bases = 0.0;
    for w in &q.bases {
        bases += base_prior.log_density(&w.canonical()?.0);
    }

    Ok(ElboTerms {
        data,
        f1,
        f2,
        z0,
        z1,
        z2,
        var_z0: inv_gamma_kl(&q.ig_z0),
        var_z1: inv_gamma_kl(&q.ig_z1),
        var_z2: inv_gamma_kl(&q.ig_z2),
        eta: gamma_kl(&q.g_eta),
        lambda: gamma_kl(&q.g_lambda),
        bases,
    })
}
