//! Point maximisation of one base function given the current q.

use nalgebra::DVector;

use super::QState;
use crate::error::Result;
use crate::interp::Interpolant;
use crate::model::ModelContext;
use crate::optim::{bfgs_maximize, coordinate_search, OptimOptions};
use crate::warp::{BaseFunction, BasePrior, WarpMap};

/// Result of [`maximize_w`].
#[derive(Debug, Clone)]
pub struct WStep {
    /// Canonical maximiser (or the previous base if nothing better was found).
    pub base: BaseFunction,
    pub value_before: f64,
    pub value_after: f64,
    pub improved: bool,
}

/// The part of the criterion that depends on `w_i`, with its gradient:
/// `-g/2 (X_i(h) - m)' Sigma^-1 (X_i(h) - m) + log p(w)` where `m` is the
/// q-mean of the registered curve. Returns `None` if `w` trips the overflow guard.
pub fn w_objective(
    w: &[f64],
    i: usize,
    target: &DVector<f64>,
    ctx: &ModelContext,
    prior: &BasePrior,
) -> Option<(f64, Vec<f64>)> {
    let grid = ctx.grid();
    let map = WarpMap::new(w, grid).ok()?;
    let x = ctx.data.values.column(i);
    let f = Interpolant::new(grid, x.as_slice(), ctx.cfg.interpolation);
    let p = grid.len();
    let mut r = DVector::zeros(p);
    let mut slope = vec![0.0; p];
    for j in 0..p {
        let (v, d) = f.eval_with_derivative(map.h[j]);
        r[j] = v - target[j];
        slope[j] = d;
    }
    let g = ctx.cfg.gamma_sum();
    let sr = &ctx.pen.sigma_inv * &r;
    let data = -0.5 * g * r.dot(&sr);
    let grad_h: Vec<f64> = (0..p).map(|j| -g * sr[j] * slope[j]).collect();
    let mut grad = map.pullback(&grad_h);

    // prior on the canonical representative w - logmeanexp(w)
    let shift = log_mean_exp(w);
    let canon: Vec<f64> = w.iter().map(|v| v - shift).collect();
    let pg = prior.gradient(&canon);
    let total: f64 = pg.iter().sum();
    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ew: Vec<f64> = w.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = ew.iter().sum();
    for k in 0..w.len() {
        grad[k] += pg[k] - ew[k] / z * total;
    }
    Some((data + prior.log_density(&canon), grad))
}

fn log_mean_exp(w: &[f64]) -> f64 {
    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = w.iter().map(|v| (v - max).exp()).sum();
    max + (s / w.len() as f64).ln()
}

/// Maximises the criterion over `w_i`, warm-started at the current base.
/// Falls back to a coordinate search when BFGS makes no progress and keeps
/// the current base if neither improves on it.
pub fn maximize_w(
    i: usize,
    q: &QState,
    ctx: &ModelContext,
    prior: &BasePrior,
    opts: &OptimOptions,
) -> Result<WStep> {
    let target = q.mean_curve(i, ctx.cfg.kappa());
    let start = q.bases[i].0.clone();
    let objective = |w: &[f64]| w_objective(w, i, &target, ctx, prior);
    let value_before = objective(&start).map(|v| v.0).unwrap_or(f64::NEG_INFINITY);
    let mut best: Option<(Vec<f64>, f64)> = bfgs_maximize(objective, &start, opts)
        .filter(|r| r.value > value_before)
        .map(|r| (r.x, r.value));
    if best.is_none() {
        let value_only = |w: &[f64]| objective(w).map(|v| v.0);
        best = coordinate_search(value_only, &start, 0.05, 10).filter(|(_, v)| *v > value_before);
    }
    match best {
        Some((w, value_after)) => Ok(WStep {
            base: BaseFunction(w).canonical()?,
            value_before,
            value_after,
            improved: true,
        }),
        None => Ok(WStep {
            base: q.bases[i].clone(),
            value_before,
            value_after: value_before,
            improved: false,
        }),
    }
}
