//! Adapted variational Bayes.
//!
//! Each iteration first maximises every base function `w_i` given the
//! current variational moments, then performs one sweep of exact mean-field
//! updates over `q(f1), q(f2), q(z0), q(z1), q(z2)`, the smoothing-parameter
//! rates and the weight-variance rates, in that order. The criterion
//! returned by [`elbo`] is non-decreasing across both steps for a fixed
//! warping penalty.

mod draw;
mod elbo;
mod run;
mod updates;
mod wstep;

pub use draw::{draw_latent, laplace_factor, w_neg_hessian};
pub use elbo::{elbo, elbo_terms, ElboTerms};
pub use run::{avb_iteration, run_avb, Annealer, AvbFit, AvbOptions, IterationDiagnostics};
pub use updates::{update_q_f1, update_q_f2, update_q_hyper, update_q_z, update_q_z0, update_q_z1, update_q_z2};
pub use wstep::{maximize_w, w_objective, WStep};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentState, ModelContext};
use crate::stats::digamma;
use crate::warp::BaseFunction;

/// Shape/rate pair of a gamma or inverse-gamma factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeRate {
    pub shape: f64,
    pub rate: f64,
}

impl ShapeRate {
    /// `E[x]` under Gamma, equivalently `E[1/x]` under inverse-gamma.
    pub fn mean_gamma(&self) -> f64 {
        self.shape / self.rate
    }

    /// `E[log x]` under Gamma.
    pub fn mean_ln_gamma(&self) -> f64 {
        digamma(self.shape) - self.rate.ln()
    }

    /// `E[log x]` under inverse-gamma.
    pub fn mean_ln_inv_gamma(&self) -> f64 {
        self.rate.ln() - digamma(self.shape)
    }
}

/// All variational parameters plus the current base-function point estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QState {
    pub mu_f1: DVector<f64>,
    pub mu_f2: DVector<f64>,
    pub cov_f1: DMatrix<f64>,
    pub cov_f2: DMatrix<f64>,
    pub mu_z0: Vec<f64>,
    pub var_z0q: Vec<f64>,
    pub mu_z1: Vec<f64>,
    pub var_z1q: Vec<f64>,
    pub mu_z2: Vec<f64>,
    pub var_z2q: Vec<f64>,
    pub ig_z0: ShapeRate,
    pub ig_z1: ShapeRate,
    pub ig_z2: ShapeRate,
    pub g_eta: ShapeRate,
    pub g_lambda: ShapeRate,
    pub bases: Vec<BaseFunction>,
    /// `X_i(h_i)` under the current bases, one column per function.
    pub registered: DMatrix<f64>,
    pub criterion_trace: Vec<f64>,
}

impl QState {
    pub fn n_functions(&self) -> usize {
        self.mu_z1.len()
    }

    /// `(E[z0_i], E[z0_i^2])`, including the constrained last shift.
    pub fn z0_moments(&self, i: usize) -> (f64, f64) {
        if i + 1 == self.n_functions() {
            let m: f64 = -self.mu_z0.iter().sum::<f64>();
            let v: f64 = self.var_z0q.iter().sum();
            (m, v + m * m)
        } else {
            (self.mu_z0[i], self.var_z0q[i] + self.mu_z0[i] * self.mu_z0[i])
        }
    }

    /// `Sigma_q(f) + mu mu'`.
    pub fn second_moment_f1(&self) -> DMatrix<f64> {
        &self.cov_f1 + &self.mu_f1 * self.mu_f1.transpose()
    }

    pub fn second_moment_f2(&self) -> DMatrix<f64> {
        &self.cov_f2 + &self.mu_f2 * self.mu_f2.transpose()
    }

    /// `E[z0_i 1 + z1_i f1 + k z2_i f2]` under q.
    pub fn mean_curve(&self, i: usize, kappa: f64) -> DVector<f64> {
        let (m0, _) = self.z0_moments(i);
        DVector::from_element(self.mu_f1.len(), m0)
            + &self.mu_f1 * self.mu_z1[i]
            + &self.mu_f2 * (kappa * self.mu_z2[i])
    }

    /// Point summary for seeding a sampler: q-means for locations and
    /// `1 / E[1/sigma^2]` for variances.
    pub fn to_latent_state(&self) -> LatentState {
        LatentState {
            f1: self.mu_f1.clone(),
            f2: self.mu_f2.clone(),
            z0_free: self.mu_z0.clone(),
            z1: self.mu_z1.clone(),
            z2: self.mu_z2.clone(),
            var_z0: 1.0 / self.ig_z0.mean_gamma(),
            var_z1: 1.0 / self.ig_z1.mean_gamma(),
            var_z2: 1.0 / self.ig_z2.mean_gamma(),
            eta_f: self.g_eta.mean_gamma(),
            lambda_f: self.g_lambda.mean_gamma(),
            bases: self.bases.clone(),
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        let pd = |m: &DMatrix<f64>| {
            let sym = (m - m.transpose()).amax() <= 1e-9 * m.amax().max(1.0);
            sym && m.clone().cholesky().is_some()
        };
        if !pd(&self.cov_f1) || !pd(&self.cov_f2) {
            return Err(Error::Numerical("factor covariance lost positive definiteness".into()));
        }
        let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !positive(&self.var_z0q) || !positive(&self.var_z1q) || !positive(&self.var_z2q) {
            return Err(Error::Numerical("non-positive weight variance".into()));
        }
        for sr in [self.ig_z0, self.ig_z1, self.ig_z2, self.g_eta, self.g_lambda] {
            if !(sr.shape > 0.0 && sr.rate > 0.0) {
                return Err(Error::Numerical("non-positive shape or rate".into()));
            }
        }
        Ok(())
    }
}

/// Outcome of [`avb_init`].
#[derive(Debug, Clone)]
pub struct AvbInit {
    pub q: QState,
    /// Set when the residuals carried no second direction and `f2` was
    /// seeded with the smoothest curvature direction instead.
    pub f2_fallback: bool,
}

const INIT_WEIGHT_VAR: f64 = 1e-2;

/// Starting point: identity warps, `f1` the sample mean curve, per-curve
/// least-squares shifts and scalings on it, and `f2` the leading principal
/// direction of what those fits leave over.
pub fn avb_init(ctx: &ModelContext) -> Result<AvbInit> {
    let (p, n) = (ctx.p(), ctx.n());
    let x = &ctx.data.values;
    let scale = x.amax().max(1.0);
    let constant_curves = (0..n).all(|i| {
        let c = x.column(i);
        c.max() - c.min() <= 1e-12 * scale
    });
    if constant_curves {
        return Err(Error::DegenerateData("every function is constant".into()));
    }
    let mean = x.column_mean();

    // least squares of each curve on span{1, mean}
    let mut design = DMatrix::from_element(p, 2, 1.0);
    design.set_column(1, &mean);
    let centered_mean = &mean - DVector::from_element(p, mean.mean());
    let use_scale = centered_mean.amax() > 1e-12 * scale;
    let mut shifts = vec![0.0; n];
    let mut scalings = vec![1.0; n];
    let mut resid = DMatrix::zeros(p, n);
    for i in 0..n {
        let col = x.column(i).into_owned();
        let (a, b) = if use_scale {
            let xtx = design.transpose() * &design;
            let coef = xtx.lu().solve(&(design.transpose() * &col)).ok_or_else(|| {
                Error::Numerical("singular least-squares system in initialisation".into())
            })?;
            (coef[0], coef[1])
        } else {
            (col.mean() - mean.mean(), 1.0)
        };
        shifts[i] = a;
        scalings[i] = b;
        resid.set_column(i, &(col - DVector::from_element(p, a) - &mean * b));
    }

    let kappa = ctx.cfg.kappa();
    let svd = resid.clone().svd(true, false);
    let (top, idx) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0.0, 0), |acc, (k, &s)| if s > acc.0 { (s, k) } else { acc });
    let mean_rms = (mean.norm_squared() / p as f64).sqrt();
    let f2_scale = if mean_rms > 0.0 { mean_rms } else { 1.0 };
    let f2_fallback = top <= 1e-10 * scale * ((p * n) as f64).sqrt();
    let (mu_f2, mu_z2) = if f2_fallback {
        let eig = ctx.pen.p2.clone().symmetric_eigen();
        let k = eig.eigenvalues.imax();
        let mut u = eig.eigenvectors.column(k).into_owned();
        orient(&mut u);
        (u.scale(f2_scale * (p as f64).sqrt()), vec![0.0; n])
    } else {
        let mut u = svd.u.as_ref().expect("left singular vectors requested").column(idx).into_owned();
        orient(&mut u);
        let scores: Vec<f64> = (0..n).map(|i| u.dot(&resid.column(i))).collect();
        let norm = f2_scale * (p as f64).sqrt();
        (u.scale(norm), scores.iter().map(|s| s / (kappa * norm)).collect())
    };

    let (cov, _) = crate::grid::sigma_f(&ctx.pen, 1.0, 1.0)?;
    let cfg = &ctx.cfg;
    let mut q = QState {
        mu_f1: mean,
        mu_f2,
        cov_f1: cov.clone(),
        cov_f2: cov,
        mu_z0: shifts[..n - 1].to_vec(),
        var_z0q: vec![INIT_WEIGHT_VAR; n - 1],
        mu_z1: scalings,
        var_z1q: vec![INIT_WEIGHT_VAR; n],
        mu_z2,
        var_z2q: vec![INIT_WEIGHT_VAR; n],
        ig_z0: ShapeRate { shape: cfg.a + (n - 1) as f64 / 2.0, rate: cfg.b },
        ig_z1: ShapeRate { shape: cfg.a + n as f64 / 2.0, rate: cfg.b },
        ig_z2: ShapeRate { shape: cfg.a + n as f64 / 2.0, rate: cfg.b },
        g_eta: ShapeRate { shape: cfg.c + 2.0, rate: cfg.d },
        g_lambda: ShapeRate { shape: cfg.c + (p - 2) as f64, rate: cfg.d },
        bases: vec![BaseFunction::zeros(p - 1); n],
        registered: x.clone(),
        criterion_trace: Vec::new(),
    };
    // Rates from the initial moments rather than the bare prior values,
    // which would pin every weight to its prior mean on the first sweep.
    update_q_hyper(&mut q, ctx);
    q.check_invariants()?;
    Ok(AvbInit { q, f2_fallback })
}

fn orient(u: &mut DVector<f64>) {
    let k = u.iamax();
    if u[k] < 0.0 {
        u.neg_mut();
    }
}

#[cfg(test)]
mod tests;
