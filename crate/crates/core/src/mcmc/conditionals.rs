//! Parameters of every conjugate full conditional, exposed separately from
//! the draws so they can be checked against dense oracles.

use nalgebra::{DMatrix, DVector};

use crate::avb::ShapeRate;
use crate::error::Result;
use crate::linalg::SpdFactor;
use crate::model::{LatentState, ModelContext};

/// Gaussian conditional stored by precision, mean already solved.
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl GaussianConditional {
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        Ok(SpdFactor::new(&self.precision, "conditional precision")?.inverse())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarConditional {
    pub mean: f64,
    pub var: f64,
}

fn gaussian(precision: DMatrix<f64>, rhs: DVector<f64>, what: &str) -> Result<GaussianConditional> {
    let fac = SpdFactor::new(&precision, what)?;
    Ok(GaussianConditional { mean: fac.solve(&rhs), precision })
}

pub fn f1_conditional(s: &LatentState, ctx: &ModelContext, registered: &DMatrix<f64>) -> Result<GaussianConditional> {
    let p = ctx.p();
    let g = ctx.cfg.gamma_sum();
    let kappa = ctx.cfg.kappa();
    let mut weight = 0.0;
    let mut target = DVector::zeros(p);
    for i in 0..ctx.n() {
        weight += s.z1[i] * s.z1[i];
        let r = registered.column(i) - DVector::from_element(p, s.z0(i)) - &s.f2 * (kappa * s.z2[i]);
        target += r * s.z1[i];
    }
    let prec = &ctx.pen.sigma_inv * (g * weight) + ctx.pen.precision(s.eta_f, s.lambda_f);
    gaussian(prec, &ctx.pen.sigma_inv * target * g, "f1 conditional precision")
}

pub fn f2_conditional(s: &LatentState, ctx: &ModelContext, registered: &DMatrix<f64>) -> Result<GaussianConditional> {
    let p = ctx.p();
    let g = ctx.cfg.gamma_sum();
    let kappa = ctx.cfg.kappa();
    let mut weight = 0.0;
    let mut target = DVector::zeros(p);
    for i in 0..ctx.n() {
        weight += s.z2[i] * s.z2[i];
        let r = registered.column(i) - DVector::from_element(p, s.z0(i)) - &s.f1 * s.z1[i];
        target += r * s.z2[i];
    }
    let prec = &ctx.pen.sigma_inv * (g * kappa * kappa * weight) + ctx.pen.precision(s.eta_f, s.lambda_f);
    gaussian(prec, &ctx.pen.sigma_inv * target * (g * kappa), "f2 conditional precision")
}

/// `g 1' Sigma^-1 (x_i - z1_i f1 - k z2_i f2)`.
fn shift_score(s: &LatentState, ctx: &ModelContext, registered: &DMatrix<f64>, i: usize) -> f64 {
    let r = registered.column(i) - &s.f1 * s.z1[i] - &s.f2 * (ctx.cfg.kappa() * s.z2[i]);
    ctx.cfg.gamma_sum() * ctx.sigma_inv_ones.dot(&r)
}

/// Conditional of the free shift `z0_i` (`i < N - 1`) given all other free
/// shifts; the last shift moves with it to keep the sum at zero.
pub fn z0_conditional(s: &LatentState, ctx: &ModelContext, registered: &DMatrix<f64>, i: usize) -> ScalarConditional {
    let n = ctx.n();
    let gs = ctx.cfg.gamma_sum() * ctx.ones_sigma_inv_ones;
    let others: f64 = s.z0_free.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
    let var = 1.0 / (1.0 / s.var_z0 + 2.0 * gs);
    let mean = var * (shift_score(s, ctx, registered, i) - shift_score(s, ctx, registered, n - 1) - gs * others);
    ScalarConditional { mean, var }
}

pub fn z1_conditional(s: &LatentState, ctx: &ModelContext, registered: &DMatrix<f64>, i: usize) -> ScalarConditional {
    let p = ctx.p();
    let g = ctx.cfg.gamma_sum();
    let sf = &ctx.pen.sigma_inv * &s.f1;
    let var = 1.0 / (1.0 / s.var_z1 + g * s.f1.dot(&sf));
    let r = registered.column(i) - DVector::from_element(p, s.z0(i)) - &s.f2 * (ctx.cfg.kappa() * s.z2[i]);
    ScalarConditional { mean: var * (1.0 / s.var_z1 + g * sf.dot(&r)), var }
}

pub fn z2_conditional(s: &LatentState, ctx: &ModelContext, registered: &DMatrix<f64>, i: usize) -> ScalarConditional {
    let p = ctx.p();
    let g = ctx.cfg.gamma_sum();
    let kappa = ctx.cfg.kappa();
    let sf = &ctx.pen.sigma_inv * &s.f2;
    let var = 1.0 / (1.0 / s.var_z2 + g * kappa * kappa * s.f2.dot(&sf));
    let r = registered.column(i) - DVector::from_element(p, s.z0(i)) - &s.f1 * s.z1[i];
    ScalarConditional { mean: var * g * kappa * sf.dot(&r), var }
}

/// Inverse-gamma conditionals of `(s0^2, s1^2, s2^2)`.
pub fn variance_conditionals(s: &LatentState, ctx: &ModelContext) -> [ShapeRate; 3] {
    let (a, b) = (ctx.cfg.a, ctx.cfg.b);
    let n = s.n_functions() as f64;
    let ss0: f64 = s.z0_free.iter().map(|z| z * z).sum();
    let ss1: f64 = s.z1.iter().map(|z| (z - 1.0) * (z - 1.0)).sum();
    let ss2: f64 = s.z2.iter().map(|z| z * z).sum();
    [
        ShapeRate { shape: a + (n - 1.0) / 2.0, rate: b + 0.5 * ss0 },
        ShapeRate { shape: a + n / 2.0, rate: b + 0.5 * ss1 },
        ShapeRate { shape: a + n / 2.0, rate: b + 0.5 * ss2 },
    ]
}

/// Gamma conditionals of `(eta_f, lambda_f)`.
pub fn smoothing_conditionals(s: &LatentState, ctx: &ModelContext) -> [ShapeRate; 2] {
    let (c, d) = (ctx.cfg.c, ctx.cfg.d);
    let p = ctx.p() as f64;
    let q = |m: &DMatrix<f64>| s.f1.dot(&(m * &s.f1)) + s.f2.dot(&(m * &s.f2));
    [
        ShapeRate { shape: c + 2.0, rate: d + 0.5 * q(&ctx.pen.p1_prec) },
        ShapeRate { shape: c + (p - 2.0), rate: d + 0.5 * q(&ctx.pen.p2_prec) },
    ]
}
