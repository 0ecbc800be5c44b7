//! Random starting states drawn from a fitted approximation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{w_objective, QState};
use crate::error::{Error, Result};
use crate::model::{LatentState, ModelContext};
use crate::warp::BaseFunction;

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Negative Hessian of the base-function objective at `w`, by central
/// differences of the analytic gradient.
pub fn w_neg_hessian(w: &[f64], i: usize, q: &QState, ctx: &ModelContext, gamma_w: f64) -> Result<DMatrix<f64>> {
    let prior = ctx.base_prior(gamma_w)?;
    let target = q.mean_curve(i, ctx.cfg.kappa());
    let m = w.len();
    let grad = |x: &[f64]| {
        w_objective(x, i, &target, ctx, &prior)
            .map(|v| v.1)
            .ok_or_else(|| Error::Numerical("base function left the admissible range".into()))
    };
    let eps = 1e-5;
    let mut h = DMatrix::zeros(m, m);
    let mut x = w.to_vec();
    for k in 0..m {
        x[k] = w[k] + eps;
        let up = grad(&x)?;
        x[k] = w[k] - eps;
        let down = grad(&x)?;
        x[k] = w[k];
        for j in 0..m {
            h[(j, k)] = -(up[j] - down[j]) / (2.0 * eps);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Lower Cholesky factor of the Laplace covariance of `w_i` around the
/// fitted base, on the mean-zero subspace; `None` when the curvature is not
/// positive definite there.
pub fn laplace_factor(q: &QState, ctx: &ModelContext, i: usize, gamma_w: f64) -> Result<Option<DMatrix<f64>>> {
    let w = &q.bases[i].0;
    let m = w.len();
    let h = w_neg_hessian(w, i, q, ctx, gamma_w)?;
    // the objective is flat along constants; lift that direction
    let lifted = &h + DMatrix::from_element(m, m, 1.0);
    Ok(lifted.cholesky().map(|chol| {
        let inv_t = chol
            .l()
            .transpose()
            .solve_upper_triangular(&DMatrix::identity(m, m))
            .expect("cholesky factor has a positive diagonal");
        // x = L^-T e has covariance (L L^T)^-1; drop the constant direction
        let centering = DMatrix::identity(m, m) - DMatrix::from_element(m, m, 1.0 / m as f64);
        centering * inv_t
    }))
}

/// Starting state for a sampler: q-means for the continuous blocks (the
/// first Gibbs sweep redraws those exactly) and, for each warp, a draw from
/// a Laplace approximation around the fitted base function. Falls back to
/// the fitted base when its curvature is not positive definite.
pub fn draw_latent<R: Rng + ?Sized>(q: &QState, ctx: &ModelContext, gamma_w: f64, rng: &mut R) -> Result<LatentState> {
    let mut state = q.to_latent_state();
    for (i, w) in q.bases.iter().enumerate() {
        state.bases[i] = match laplace_factor(q, ctx, i, gamma_w)? {
            Some(f) => {
                let delta = f * DVector::from_fn(w.len(), |_, _| normal(rng));
                let moved: Vec<f64> = w.0.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
                BaseFunction(moved).canonical().unwrap_or_else(|_| w.clone())
            }
            None => {
                log::warn!("base function {i}: curvature not positive definite, starting at the fitted value");
                w.clone()
            }
        };
    }
    Ok(state)
}
