//! The outer AVB loop: warping-penalty annealing, convergence, centring.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::{avb_init, elbo, maximize_w, update_q_f1, update_q_f2, update_q_hyper, update_q_z, QState};
use crate::error::{Error, Result};
use crate::interp::Interpolant;
use crate::model::ModelContext;
use crate::optim::OptimOptions;
use crate::warp::{mean_warp_center, warp_from_base, BaseFunction, Warp};

#[derive(Debug, Clone)]
pub struct AvbOptions {
    pub max_iters: usize,
    /// Relative criterion change below which the fit is declared converged
    /// (only once the warping penalty has reached its target value).
    pub tol: f64,
    pub parallel: bool,
    pub optim: OptimOptions,
}

impl Default for AvbOptions {
    fn default() -> Self {
        AvbOptions { max_iters: 500, tol: 1e-6, parallel: true, optim: OptimOptions::default() }
    }
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationDiagnostics {
    pub iter: usize,
    pub criterion: f64,
    pub gamma_w: f64,
    pub max_abs_dw: f64,
}

/// Warping-penalty schedule. An explicit schedule of `(multiplier,
/// threshold)` steps takes precedence: the first step whose threshold
/// exceeds the iteration sets `gamma_w = multiplier * target`. Otherwise the
/// adaptive mode starts at ten times the target and halves whenever the
/// criterion improved by less than `1e-4` (relative) over the last ten
/// iterations at the current value.
#[derive(Debug, Clone)]
pub struct Annealer {
    target: f64,
    schedule: Vec<(f64, usize)>,
    adaptive: bool,
    current: f64,
    since: usize,
}

const ANNEAL_START: f64 = 10.0;
const ANNEAL_WINDOW: usize = 10;
const ANNEAL_TOL: f64 = 1e-4;

impl Annealer {
    pub fn new(target: f64, schedule: Vec<(f64, usize)>, adaptive: bool) -> Self {
        let current = if schedule.is_empty() && adaptive { ANNEAL_START * target } else { target };
        Annealer { target, schedule, adaptive, current, since: 0 }
    }

    /// Penalty to use at (zero-based) iteration `iter`.
    pub fn gamma_w(&self, iter: usize) -> f64 {
        if !self.schedule.is_empty() {
            return self
                .schedule
                .iter()
                .find(|&&(_, until)| iter < until)
                .map_or(self.target, |&(mult, _)| mult * self.target);
        }
        self.current
    }

    /// True once the penalty used at `iter` will not change again.
    pub fn settled(&self, iter: usize) -> bool {
        if !self.schedule.is_empty() {
            let last = self.schedule.iter().map(|s| s.1).max().unwrap_or(0);
            return iter >= last;
        }
        !self.adaptive || self.current <= self.target
    }

    /// Feeds the criterion trace (values at the current penalty, newest last).
    pub fn observe(&mut self, trace: &[f64]) {
        if !self.schedule.is_empty() || !self.adaptive || self.current <= self.target {
            return;
        }
        self.since += 1;
        if self.since <= ANNEAL_WINDOW {
            return;
        }
        let now = trace[trace.len() - 1];
        let then = trace[trace.len() - 1 - ANNEAL_WINDOW];
        if (now - then) / now.abs().max(1e-300) < ANNEAL_TOL {
            self.current = (self.current / 2.0).max(self.target);
            self.since = 0;
        }
    }
}

/// A finished AVB fit.
#[derive(Debug, Clone)]
pub struct AvbFit {
    pub q: QState,
    /// Warps after recentring so their pointwise mean is the identity.
    pub warps: Vec<Warp>,
    pub bases: Vec<BaseFunction>,
    /// `X_i(h_i)` under the recentred warps.
    pub registered: DMatrix<f64>,
    /// Factor means expressed on the recentred time axis.
    pub f1: DVector<f64>,
    pub f2: DVector<f64>,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub converged: bool,
    pub f2_fallback: bool,
}

impl AvbFit {
    pub fn criterion(&self) -> f64 {
        self.diagnostics.last().map(|d| d.criterion).unwrap_or(f64::NEG_INFINITY)
    }
}

/// Runs one iteration (base functions, then one mean-field sweep) and
/// returns the largest absolute change in any base function.
pub fn avb_iteration(q: &mut QState, ctx: &ModelContext, gamma_w: f64, opts: &AvbOptions) -> Result<f64> {
    let prior = ctx.base_prior(gamma_w)?;
    let step = |i: usize| maximize_w(i, q, ctx, &prior, &opts.optim);
    let steps: Vec<_> = if opts.parallel {
        (0..ctx.n()).into_par_iter().map(step).collect::<Result<_>>()?
    } else {
        (0..ctx.n()).map(step).collect::<Result<_>>()?
    };
    let mut max_dw: f64 = 0.0;
    for (i, s) in steps.into_iter().enumerate() {
        for (a, b) in s.base.0.iter().zip(&q.bases[i].0) {
            max_dw = max_dw.max((a - b).abs());
        }
        q.bases[i] = s.base;
    }
    q.registered = ctx.registered_data(&q.bases)?;
    update_q_f1(q, ctx)?;
    update_q_f2(q, ctx)?;
    update_q_z(q, ctx);
    update_q_hyper(q, ctx);
    Ok(max_dw)
}

pub fn run_avb(ctx: &ModelContext, opts: &AvbOptions) -> Result<AvbFit> {
    let init = avb_init(ctx)?;
    if init.f2_fallback {
        log::warn!("residuals have no second direction; f2 seeded from the smoothest prior direction");
    }
    let mut q = init.q;
    let mut annealer = Annealer::new(ctx.cfg.gamma_w, ctx.cfg.anneal_schedule.clone(), ctx.cfg.adaptive_anneal);
    let mut diagnostics = Vec::new();
    let mut stage_trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut prev_gamma = f64::NAN;
    for iter in 0..opts.max_iters {
        let gamma_w = annealer.gamma_w(iter);
        if gamma_w != prev_gamma {
            stage_trace.clear();
            prev_gamma = gamma_w;
        }
        let max_dw = avb_iteration(&mut q, ctx, gamma_w, opts)?;
        let value = elbo(&q, ctx, gamma_w)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("criterion became {value} at iteration {iter}")));
        }
        q.criterion_trace.push(value);
        diagnostics.push(IterationDiagnostics { iter, criterion: value, gamma_w, max_abs_dw: max_dw });
        log::debug!("avb iter {iter}: criterion {value:.10e}, gamma_w {gamma_w}, max|dw| {max_dw:.3e}");
        if let Some(&last) = stage_trace.last() {
            let rel = (value - last).abs() / value.abs().max(1e-300);
            if annealer.settled(iter) && rel < opts.tol {
                converged = true;
                stage_trace.push(value);
                break;
            }
        }
        stage_trace.push(value);
        annealer.observe(&stage_trace);
    }
    if !converged {
        log::warn!("AVB stopped after {} iterations without meeting the tolerance", opts.max_iters);
    }
    finish(ctx, q, diagnostics, converged, init.f2_fallback)
}

fn finish(
    ctx: &ModelContext,
    q: QState,
    diagnostics: Vec<IterationDiagnostics>,
    converged: bool,
    f2_fallback: bool,
) -> Result<AvbFit> {
    let grid = ctx.grid();
    let raw: Vec<Warp> = q.bases.iter().map(|w| warp_from_base(w, grid)).collect::<Result<_>>()?;
    let centered = mean_warp_center(&raw, grid);
    let mut registered = DMatrix::zeros(ctx.p(), ctx.n());
    for (i, h) in centered.warps.iter().enumerate() {
        registered.set_column(i, &DVector::from_vec(ctx.warp_column(i, h)));
    }
    let shift = |f: &DVector<f64>| {
        let it = Interpolant::new(grid, f.as_slice(), ctx.cfg.interpolation);
        DVector::from_iterator(f.len(), centered.mean_inverse.iter().map(|&s| it.eval(s)))
    };
    let f1 = shift(&q.mu_f1);
    let f2 = shift(&q.mu_f2);
    Ok(AvbFit {
        warps: centered.warps,
        bases: centered.bases,
        registered,
        f1,
        f2,
        q,
        diagnostics,
        converged,
        f2_fallback,
    })
}
