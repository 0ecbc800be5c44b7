//! Metropolis-within-Gibbs sampler.
//!
//! Every block except the base functions is drawn exactly from its full
//! conditional; each `w_i` gets a random-walk Metropolis step.

mod collapsed;
mod conditionals;
pub mod geweke;

pub use collapsed::{factor_block, sample_smoothing_collapsed, smoothing_log_marginal};
pub use conditionals::{
    f1_conditional, f2_conditional, smoothing_conditionals, variance_conditionals, z0_conditional,
    z1_conditional, z2_conditional, GaussianConditional, ScalarConditional,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::Serialize;

use crate::avb::{QState, ShapeRate};
use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::model::{data_loglik, log_priors, LatentState, ModelContext};
use crate::warp::{warp_from_base, BaseFunction, BasePrior};

pub type ChainRng = ChaCha8Rng;

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub(crate) fn draw_gaussian<R: Rng + ?Sized>(c: &GaussianConditional, rng: &mut R) -> Result<DVector<f64>> {
    let fac = SpdFactor::new(&c.precision, "conditional precision")?;
    let e = DVector::from_fn(c.mean.len(), |_, _| std_normal(rng));
    Ok(&c.mean + fac.solve_upper_transpose(&e))
}


pub(crate) fn draw_gamma<R: Rng + ?Sized>(sr: &ShapeRate, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(sr.shape, 1.0 / sr.rate)
        .map_err(|e| Error::Numerical(format!("gamma({}, {}) : {e}", sr.shape, sr.rate)))?;
    Ok(g.sample(rng))
}

pub(crate) fn draw_inv_gamma<R: Rng + ?Sized>(sr: &ShapeRate, rng: &mut R) -> Result<f64> {
    Ok(1.0 / draw_gamma(sr, rng)?)
}

pub fn sample_f1<R: Rng + ?Sized>(s: &mut LatentState, ctx: &ModelContext, reg: &DMatrix<f64>, rng: &mut R) -> Result<()> {
    s.f1 = draw_gaussian(&f1_conditional(s, ctx, reg)?, rng)?;
    Ok(())
}

pub fn sample_f2<R: Rng + ?Sized>(s: &mut LatentState, ctx: &ModelContext, reg: &DMatrix<f64>, rng: &mut R) -> Result<()> {
    s.f2 = draw_gaussian(&f2_conditional(s, ctx, reg)?, rng)?;
    Ok(())
}

/// Sequential scalar draws: free shifts, then `z1`, then `z2`.
pub fn sample_z<R: Rng + ?Sized>(s: &mut LatentState, ctx: &ModelContext, reg: &DMatrix<f64>, rng: &mut R) {
    for i in 0..s.z0_free.len() {
        let c = z0_conditional(s, ctx, reg, i);
        s.z0_free[i] = c.mean + c.var.sqrt() * std_normal(rng);
    }
    for i in 0..s.n_functions() {
        let c = z1_conditional(s, ctx, reg, i);
        s.z1[i] = c.mean + c.var.sqrt() * std_normal(rng);
    }
    for i in 0..s.n_functions() {
        let c = z2_conditional(s, ctx, reg, i);
        s.z2[i] = c.mean + c.var.sqrt() * std_normal(rng);
    }
}

/// Weight variances, then `eta_f`, then `lambda_f`.
pub fn sample_variances<R: Rng + ?Sized>(s: &mut LatentState, ctx: &ModelContext, rng: &mut R) -> Result<()> {
    let [v0, v1, v2] = variance_conditionals(s, ctx);
    s.var_z0 = draw_inv_gamma(&v0, rng)?;
    s.var_z1 = draw_inv_gamma(&v1, rng)?;
    s.var_z2 = draw_inv_gamma(&v2, rng)?;
    let [eta, lambda] = smoothing_conditionals(s, ctx);
    s.eta_f = draw_gamma(&eta, rng)?;
    s.lambda_f = draw_gamma(&lambda, rng)?;
    Ok(())
}

/// All conjugate blocks in scan order, with the base functions held fixed.
pub fn gibbs_sweep<R: Rng + ?Sized>(s: &mut LatentState, ctx: &ModelContext, reg: &DMatrix<f64>, rng: &mut R) -> Result<()> {
    sample_f1(s, ctx, reg, rng)?;
    sample_f2(s, ctx, reg, rng)?;
    sample_z(s, ctx, reg, rng);
    sample_variances(s, ctx, rng)
}

/// Log target restricted to the terms that involve `w_i`, given its
/// registered curve.
fn w_log_target(s: &LatentState, ctx: &ModelContext, i: usize, x: &DVector<f64>, w: &[f64], prior: &BasePrior) -> f64 {
    let r = x - crate::model::registered_mean(s, i, &ctx.cfg);
    let data = -0.5 * ctx.cfg.gamma_sum() * r.dot(&(&ctx.pen.sigma_inv * &r));
    data + prior.log_density(w)
}

/// Outcome of one [`metropolis_w`] step.
#[derive(Debug, Clone)]
pub struct WProposal {
    pub base: BaseFunction,
    pub registered: DVector<f64>,
    pub accepted: bool,
}

/// Random-walk Metropolis for `w_i`. The walk moves the mean-zero
/// representative `u = w - mean(w)`; every `u` maps to one warp, and the
/// stored base is the canonical representative of that warp. Increments are
/// `step * S e` with `e` standard normal, where `S` is `shape` (a fixed
/// matrix whose columns sum to zero) or the centring projection.
#[allow(clippy::too_many_arguments)]
pub fn metropolis_w<R: Rng + ?Sized>(
    i: usize,
    s: &LatentState,
    ctx: &ModelContext,
    prior: &BasePrior,
    current_registered: &DVector<f64>,
    step: f64,
    shape: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> Result<WProposal> {
    let w = &s.bases[i].0;
    let m = w.len();
    let mean = w.iter().sum::<f64>() / m as f64;
    let mut u: Vec<f64> = w.iter().map(|v| v - mean).collect();
    let noise = DVector::from_fn(m, |_, _| std_normal(rng));
    let incr = match shape {
        Some(sh) => sh * noise,
        None => noise.add_scalar(-noise.mean()),
    };
    for (uk, e) in u.iter_mut().zip(incr.iter()) {
        *uk += step * e;
    }
    let u_min: f64 = rng.random();
    let reject = || WProposal { base: s.bases[i].clone(), registered: current_registered.clone(), accepted: false };
    let candidate = match BaseFunction(u).canonical() {
        Ok(c) => c,
        Err(Error::WarpOverflow(_)) => return Ok(reject()),
        Err(e) => return Err(e),
    };
    let h = warp_from_base(&candidate, ctx.grid())?;
    let x_new = DVector::from_vec(ctx.warp_column(i, &h));
    let current = w_log_target(s, ctx, i, current_registered, w, prior);
    let proposed = w_log_target(s, ctx, i, &x_new, &candidate.0, prior);
    let log_ratio = proposed - current;
    if log_ratio >= 0.0 || u_min.ln() < log_ratio {
        Ok(WProposal { base: candidate, registered: x_new, accepted: true })
    } else {
        Ok(reject())
    }
}

/// Where a chain starts.
#[derive(Debug, Clone)]
pub enum ChainInit {
    State(LatentState),
    /// A random draw from a variational fit (see [`crate::avb::draw_latent`]).
    Variational(Box<QState>),
    /// Point summary of a variational fit.
    VariationalMean(Box<QState>),
    /// Prior-centred state: zero shifts and factors, unit scalings, identity warps.
    Prior,
}

#[derive(Debug, Clone)]
pub struct ChainOptions {
    pub n_iter: usize,
    pub thin: usize,
    pub seed: u64,
    pub initial_step: f64,
    /// Fraction of iterations during which the proposal scale adapts.
    pub adapt_fraction: f64,
    pub target_acceptance: f64,
    /// Shape the warp proposals of a chain started from a variational fit
    /// by the Laplace covariance around the fitted base functions.
    pub precondition: bool,
    /// Metropolis updates of each `w_i` per sweep.
    pub w_substeps: usize,
    /// Add a joint move of `(eta, lambda, f1, f2)` with the factors
    /// integrated out of the smoothing step, ahead of the Gibbs sweep.
    pub collapsed_smoothing: bool,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions { n_iter: 2000, thin: 1, seed: 0, initial_step: 0.05, adapt_fraction: 0.2, target_acceptance: 0.3, precondition: true, w_substeps: 1, collapsed_smoothing: true }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainSamples {
    pub draws: Vec<LatentState>,
    /// Iteration number (1-based) of each stored draw.
    pub iterations: Vec<usize>,
    /// Log joint density after every iteration (not thinned).
    pub log_joint: Vec<f64>,
    pub acceptance_rates: Vec<f64>,
    pub final_steps: Vec<f64>,
    /// Acceptance rate of the collapsed smoothing move, when enabled.
    pub smoothing_acceptance: Option<f64>,
    pub rng_seed: u64,
}

impl ChainSamples {
    /// Stored draws with iteration number above `burn`.
    pub fn after(&self, burn: usize) -> impl Iterator<Item = &LatentState> {
        self.draws.iter().zip(&self.iterations).filter(move |(_, &it)| it > burn).map(|(d, _)| d)
    }
}

fn log_joint_cached(s: &LatentState, ctx: &ModelContext, reg: &DMatrix<f64>) -> Result<f64> {
    Ok(data_loglik(s, ctx, reg) + log_priors(s, ctx, ctx.cfg.gamma_w)?.total())
}

pub fn run_chain(ctx: &ModelContext, init: ChainInit, opts: &ChainOptions) -> Result<ChainSamples> {
    if opts.n_iter == 0 {
        return Err(Error::InvalidParameter { name: "n_iter", reason: "must be at least 1".into() });
    }
    if opts.w_substeps == 0 {
        return Err(Error::InvalidParameter { name: "w_substeps", reason: "must be at least 1".into() });
    }
    if opts.thin == 0 {
        return Err(Error::InvalidParameter { name: "thin", reason: "must be at least 1".into() });
    }
    crate::error::check_positive("initial_step", opts.initial_step)?;
    let (p, n) = (ctx.p(), ctx.n());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut shapes: Vec<Option<DMatrix<f64>>> = vec![None; n];
    let mut initial_step = vec![opts.initial_step; n];
    let fitted = match &init {
        ChainInit::Variational(q) | ChainInit::VariationalMean(q) => Some(q.as_ref()),
        _ => None,
    };
    if let (Some(q), true) = (fitted, opts.precondition) {
        for (i, shape) in shapes.iter_mut().enumerate() {
            *shape = crate::avb::laplace_factor(q, ctx, i, ctx.cfg.gamma_w)?;
            if shape.is_some() {
                initial_step[i] = 2.38 / ((p - 2) as f64).sqrt();
            }
        }
    }
    let mut state = match init {
        ChainInit::State(s) => s,
        ChainInit::Variational(q) => crate::avb::draw_latent(&q, ctx, ctx.cfg.gamma_w, &mut rng)?,
        ChainInit::VariationalMean(q) => q.to_latent_state(),
        ChainInit::Prior => LatentState::centered(p, n),
    };
    state.check_invariants()?;
    for w in state.bases.iter_mut() {
        *w = w.canonical()?;
    }
    let mut registered = ctx.registered_data(&state.bases)?;
    let prior = ctx.base_prior(ctx.cfg.gamma_w)?;
    let adapt_until = (opts.adapt_fraction * opts.n_iter as f64).floor() as usize;
    let mut log_step: Vec<f64> = initial_step.iter().map(|s| s.ln()).collect();
    let mut accepted = vec![0usize; n];
    let mut out = ChainSamples {
        draws: Vec::new(),
        iterations: Vec::new(),
        log_joint: Vec::with_capacity(opts.n_iter),
        acceptance_rates: Vec::new(),
        final_steps: Vec::new(),
        smoothing_acceptance: None,
        rng_seed: opts.seed,
    };
    let mut smoothing_log_step = 0.0f64;
    let mut smoothing_accepted = 0usize;
    for iter in 0..opts.n_iter {
        for i in 0..n {
            for _ in 0..opts.w_substeps {
                let current = registered.column(i).into_owned();
                let step = log_step[i].exp();
                let prop = metropolis_w(i, &state, ctx, &prior, &current, step, shapes[i].as_ref(), &mut rng)?;
                if prop.accepted {
                    accepted[i] += 1;
                    state.bases[i] = prop.base;
                    registered.set_column(i, &prop.registered);
                }
                if iter < adapt_until {
                    let a = if prop.accepted { 1.0 } else { 0.0 };
                    log_step[i] += (a - opts.target_acceptance) / (iter as f64 + 1.0).powf(0.6);
                }
            }
        }
        if opts.collapsed_smoothing {
            let acc = sample_smoothing_collapsed(&mut state, ctx, &registered, smoothing_log_step.exp(), &mut rng)?;
            smoothing_accepted += acc as usize;
            if iter < adapt_until {
                let a = if acc { 1.0 } else { 0.0 };
                smoothing_log_step += (a - opts.target_acceptance) / (iter as f64 + 1.0).powf(0.6);
            }
        }
        gibbs_sweep(&mut state, ctx, &registered, &mut rng)?;
        out.log_joint.push(log_joint_cached(&state, ctx, &registered)?);
        if (iter + 1) % opts.thin == 0 || iter + 1 == opts.n_iter {
            out.draws.push(state.clone());
            out.iterations.push(iter + 1);
        }
    }
    let proposals = (opts.n_iter * opts.w_substeps) as f64;
    out.acceptance_rates = accepted.iter().map(|&a| a as f64 / proposals).collect();
    out.final_steps = log_step.iter().map(|l| l.exp()).collect();
    if opts.collapsed_smoothing {
        out.smoothing_acceptance = Some(smoothing_accepted as f64 / opts.n_iter as f64);
    }
    Ok(out)
}
