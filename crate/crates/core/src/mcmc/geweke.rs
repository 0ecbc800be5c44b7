//! Joint-distribution ("getting it right") test harness for the conjugate
//! part of the sampler, with the base functions fixed at the identity.
//!
//! Marginal-conditional draws sample parameters from the prior and data
//! given parameters. Successive-conditional draws alternate one Gibbs sweep
//! with a fresh data draw. Both target the same joint, so any functional
//! must agree in expectation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{draw_gamma, draw_inv_gamma, gibbs_sweep, sample_smoothing_collapsed};
use crate::avb::ShapeRate;
use crate::error::Result;
use crate::linalg::SpdFactor;
use crate::model::{registered_mean, LatentState, ModelContext};
use crate::stats::{batch_means_se, mean};
use crate::warp::BaseFunction;

/// One full draw of all non-warp unknowns from the prior.
pub fn sample_prior<R: Rng + ?Sized>(ctx: &ModelContext, rng: &mut R) -> Result<LatentState> {
    let cfg = &ctx.cfg;
    let (p, n) = (ctx.p(), ctx.n());
    let ig = ShapeRate { shape: cfg.a, rate: cfg.b };
    let ga = ShapeRate { shape: cfg.c, rate: cfg.d };
    let var_z0 = draw_inv_gamma(&ig, rng)?;
    let var_z1 = draw_inv_gamma(&ig, rng)?;
    let var_z2 = draw_inv_gamma(&ig, rng)?;
    let eta_f = draw_gamma(&ga, rng)?;
    let lambda_f = draw_gamma(&ga, rng)?;
    let fac = SpdFactor::new(&ctx.pen.precision(eta_f, lambda_f), "factor prior precision")?;
    let mut factor = || {
        let e = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut *rng));
        fac.solve_upper_transpose(&e)
    };
    let f1 = factor();
    let f2 = factor();
    let mut scalar = |m: f64, v: f64| m + v.sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
    let z0_free = (0..n - 1).map(|_| scalar(0.0, var_z0)).collect();
    let z1 = (0..n).map(|_| scalar(1.0, var_z1)).collect();
    let z2 = (0..n).map(|_| scalar(0.0, var_z2)).collect();
    Ok(LatentState {
        f1,
        f2,
        z0_free,
        z1,
        z2,
        var_z0,
        var_z1,
        var_z2,
        eta_f,
        lambda_f,
        bases: vec![BaseFunction::zeros(p - 1); n],
    })
}

/// Registered data given the parameters (identity warps).
pub fn sample_data<R: Rng + ?Sized>(s: &LatentState, ctx: &ModelContext, rng: &mut R) -> Result<DMatrix<f64>> {
    let (p, n) = (ctx.p(), ctx.n());
    let fac = SpdFactor::new(&(&ctx.pen.sigma_inv * ctx.cfg.gamma_sum()), "data precision")?;
    let mut x = DMatrix::zeros(p, n);
    for i in 0..n {
        let e = DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
        x.set_column(i, &(registered_mean(s, i, &ctx.cfg) + fac.solve_upper_transpose(&e)));
    }
    Ok(x)
}

/// Scalar functionals compared by the harness.
pub const FUNCTIONALS: [&str; 8] =
    ["z1[0]", "z1[0]^2", "z2[0]", "z2[0]^2", "var_z1", "var_z1^2", "eta_f", "eta_f^2"];

fn functionals(s: &LatentState) -> [f64; 8] {
    [
        s.z1[0],
        s.z1[0] * s.z1[0],
        s.z2[0],
        s.z2[0] * s.z2[0],
        s.var_z1,
        s.var_z1 * s.var_z1,
        s.eta_f,
        s.eta_f * s.eta_f,
    ]
}

#[derive(Debug, Clone)]
pub struct GewekeComparison {
    pub name: &'static str,
    pub marginal_mean: f64,
    pub successive_mean: f64,
    /// Combined standard error of the difference.
    pub se: f64,
}

impl GewekeComparison {
    pub fn z(&self) -> f64 {
        (self.marginal_mean - self.successive_mean) / self.se
    }
}

/// Runs both simulators for `draws` iterations each. `ctx.data` only fixes
/// the shapes; its values are replaced on every data draw.
pub fn geweke_test(ctx: &ModelContext, draws: usize, seed: u64) -> Result<Vec<GewekeComparison>> {
    geweke_test_with(ctx, draws, seed, None)
}

/// As [`geweke_test`], optionally preceding each Gibbs sweep with the
/// collapsed smoothing move at the given proposal scale.
pub fn geweke_test_with(
    ctx: &ModelContext,
    draws: usize,
    seed: u64,
    collapsed_step: Option<f64>,
) -> Result<Vec<GewekeComparison>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut marginal = vec![Vec::with_capacity(draws); 8];
    for _ in 0..draws {
        let s = sample_prior(ctx, &mut rng)?;
        for (k, v) in functionals(&s).iter().enumerate() {
            marginal[k].push(*v);
        }
    }
    let mut successive = vec![Vec::with_capacity(draws); 8];
    let mut s = sample_prior(ctx, &mut rng)?;
    let mut x = sample_data(&s, ctx, &mut rng)?;
    for _ in 0..draws {
        if let Some(step) = collapsed_step {
            sample_smoothing_collapsed(&mut s, ctx, &x, step, &mut rng)?;
        }
        gibbs_sweep(&mut s, ctx, &x, &mut rng)?;
        x = sample_data(&s, ctx, &mut rng)?;
        for (k, v) in functionals(&s).iter().enumerate() {
            successive[k].push(*v);
        }
    }
    Ok((0..8)
        .map(|k| {
            let se_m = crate::stats::variance(&marginal[k]).sqrt() / (draws as f64).sqrt();
            let se_s = batch_means_se(&successive[k], 50);
            GewekeComparison {
                name: FUNCTIONALS[k],
                marginal_mean: mean(&marginal[k]),
                successive_mean: mean(&successive[k]),
                se: (se_m * se_m + se_s * se_s).sqrt(),
            }
        })
        .collect())
}
