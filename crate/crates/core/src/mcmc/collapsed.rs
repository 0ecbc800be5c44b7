//! Joint move of the smoothing parameters and both factors. The smoothing
//! step targets `p(eta, lambda | z, variances, w)` with `f1, f2` integrated
//! out, after which the factors are drawn jointly given the new values.
//! Plain Gibbs couples `lambda_f` tightly to the current factor roughness;
//! integrating the factors out removes that coupling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::std_normal;
use crate::error::Result;
use crate::linalg::SpdFactor;
use crate::model::{LatentState, ModelContext};
use crate::stats::ln_gamma_pdf;

/// Precision and linear term of the joint Gaussian conditional of the
/// stacked `(f1, f2)` at the given smoothing parameters.
pub fn factor_block(
    s: &LatentState,
    ctx: &ModelContext,
    registered: &DMatrix<f64>,
    eta: f64,
    lambda: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let p = ctx.p();
    let g = ctx.cfg.gamma_sum();
    let kappa = ctx.cfg.kappa();
    let (mut s11, mut s12, mut s22) = (0.0, 0.0, 0.0);
    let mut t1 = DVector::zeros(p);
    let mut t2 = DVector::zeros(p);
    for i in 0..ctx.n() {
        s11 += s.z1[i] * s.z1[i];
        s12 += s.z1[i] * s.z2[i];
        s22 += s.z2[i] * s.z2[i];
        let r = registered.column(i).add_scalar(-s.z0(i));
        t1 += &r * s.z1[i];
        t2 += &r * s.z2[i];
    }
    let si = &ctx.pen.sigma_inv;
    let prior = ctx.pen.precision(eta, lambda);
    let mut a = DMatrix::zeros(2 * p, 2 * p);
    a.view_mut((0, 0), (p, p)).copy_from(&(si * (g * s11) + &prior));
    a.view_mut((p, p), (p, p)).copy_from(&(si * (g * kappa * kappa * s22) + &prior));
    let cross = si * (g * kappa * s12);
    a.view_mut((0, p), (p, p)).copy_from(&cross);
    a.view_mut((p, 0), (p, p)).copy_from(&cross);
    let mut b = DVector::zeros(2 * p);
    b.rows_mut(0, p).copy_from(&(si * t1 * g));
    b.rows_mut(p, p).copy_from(&(si * t2 * (g * kappa)));
    (a, b)
}

/// Log density of `(log eta, log lambda)` with the factors integrated out,
/// up to a constant.
pub fn smoothing_log_marginal(
    s: &LatentState,
    ctx: &ModelContext,
    registered: &DMatrix<f64>,
    ln_eta: f64,
    ln_lambda: f64,
) -> Result<f64> {
    let (eta, lambda) = (ln_eta.exp(), ln_lambda.exp());
    let (a, b) = factor_block(s, ctx, registered, eta, lambda);
    let fac = SpdFactor::new(&a, "joint factor precision")?;
    let m = fac.solve(&b);
    let (c, d) = (ctx.cfg.c, ctx.cfg.d);
    Ok(ln_gamma_pdf(eta, c, d) + ln_gamma_pdf(lambda, c, d) + ln_eta + ln_lambda
        + ctx.pen.ln_det_precision(eta, lambda)
        - 0.5 * fac.ln_det()
        + 0.5 * b.dot(&m))
}

/// One Metropolis step on `(log eta, log lambda)` against the collapsed
/// target, then an exact joint draw of `(f1, f2)`. `step` scales proposal
/// standard deviations of `1/sqrt(c + 2)` and `1/sqrt(c + p - 2)`.
/// Returns whether the smoothing proposal was accepted.
pub fn sample_smoothing_collapsed<R: Rng + ?Sized>(
    s: &mut LatentState,
    ctx: &ModelContext,
    registered: &DMatrix<f64>,
    step: f64,
    rng: &mut R,
) -> Result<bool> {
    let p = ctx.p();
    let c = ctx.cfg.c;
    let (ln_eta, ln_lambda) = (s.eta_f.ln(), s.lambda_f.ln());
    let new_eta = ln_eta + step * std_normal(rng) / (c + 2.0).sqrt();
    let new_lambda = ln_lambda + step * std_normal(rng) / (c + (p - 2) as f64).sqrt();
    let u: f64 = rng.random();
    let current = smoothing_log_marginal(s, ctx, registered, ln_eta, ln_lambda)?;
    let proposed = smoothing_log_marginal(s, ctx, registered, new_eta, new_lambda)?;
    let accepted = proposed.is_finite() && (proposed >= current || u.ln() < proposed - current);
    if accepted {
        s.eta_f = new_eta.exp();
        s.lambda_f = new_lambda.exp();
    }
    let (a, b) = factor_block(s, ctx, registered, s.eta_f, s.lambda_f);
    let fac = SpdFactor::new(&a, "joint factor precision")?;
    let e = DVector::from_fn(2 * p, |_, _| std_normal(rng));
    let f = fac.solve(&b) + fac.solve_upper_transpose(&e);
    s.f1 = f.rows(0, p).into_owned();
    s.f2 = f.rows(p, p).into_owned();
    Ok(accepted)
}
