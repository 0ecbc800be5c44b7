//! Model configuration, latent state, the registered-curve likelihood and
//! the unnormalised log joint shared by both inference engines.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_positive, Error, Result};
use crate::grid::{PenaltySet, TimeGrid};
use crate::interp::Interpolation;
use crate::stats::{ln_gamma_pdf, ln_inv_gamma, ln_normal};
use crate::warp::{apply_warp, warp_from_base, BaseFunction, BasePrior, Warp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma_w: f64,
    pub lambda_w: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub interpolation: Interpolation,
    /// Explicit `(gamma_w multiplier, iteration threshold)` steps: the
    /// multiplier applies while the iteration is below the threshold. Once
    /// every threshold has passed the multiplier is 1.
    pub anneal_schedule: Vec<(f64, usize)>,
    /// Used when `anneal_schedule` is empty: start at 10x `gamma_w` and halve
    /// whenever progress stalls, down to `gamma_w`.
    pub adaptive_anneal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            gamma1: 100.0,
            gamma2: 10.0,
            gamma_w: 1e-4,
            lambda_w: 1.0,
            a: 0.001,
            b: 0.001,
            c: 0.001,
            d: 0.001,
            interpolation: Interpolation::MonotoneCubic,
            anneal_schedule: Vec::new(),
            adaptive_anneal: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("gamma1", self.gamma1)?;
        check_positive("gamma2", self.gamma2)?;
        check_positive("gamma_w", self.gamma_w)?;
        check_positive("lambda_w", self.lambda_w)?;
        check_positive("a", self.a)?;
        check_positive("b", self.b)?;
        check_positive("c", self.c)?;
        check_positive("d", self.d)?;
        if self.gamma1 <= self.gamma2 {
            return Err(Error::InvalidParameter {
                name: "gamma1",
                reason: format!("must exceed gamma2 ({} <= {})", self.gamma1, self.gamma2),
            });
        }
        for &(m, _) in &self.anneal_schedule {
            check_positive("anneal_schedule multiplier", m)?;
        }
        Ok(())
    }

    /// `gamma1 + gamma2`, the precision multiplier of the registered curves.
    pub fn gamma_sum(&self) -> f64 {
        self.gamma1 + self.gamma2
    }

    /// Coefficient `gamma2 / (gamma1 + gamma2)` of `z2 f2` in the mean.
    pub fn kappa(&self) -> f64 {
        self.gamma2 / (self.gamma1 + self.gamma2)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `p x N` matrix of curves observed on a common grid (one column per curve).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: TimeGrid,
    pub values: DMatrix<f64>,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn new(grid: TimeGrid, values: DMatrix<f64>) -> Result<Self> {
        let names = (1..=values.ncols()).map(|i| format!("f{i}")).collect();
        Self::with_names(grid, values, names)
    }

    pub fn with_names(grid: TimeGrid, values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if values.nrows() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows of data for a {}-point grid",
                values.nrows(),
                grid.len()
            )));
        }
        if names.len() != values.ncols() {
            return Err(Error::ShapeMismatch("one name per function required".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateData("non-finite observation".into()));
        }
        Ok(Dataset { grid, values, names })
    }

    pub fn n_functions(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_points(&self) -> usize {
        self.values.nrows()
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.values.column(i).iter().cloned().collect()
    }

    /// Keeps only the listed columns, in order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let values = DMatrix::from_fn(self.n_points(), idx.len(), |r, c| self.values[(r, idx[c])]);
        let names = idx.iter().map(|&i| self.names[i].clone()).collect();
        Dataset { grid: self.grid.clone(), values, names }
    }
}

/// One full configuration of every model unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub f1: DVector<f64>,
    pub f2: DVector<f64>,
    /// Free vertical shifts `z0_1 .. z0_{N-1}`; `z0_N` is always `-sum`.
    pub z0_free: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub var_z0: f64,
    pub var_z1: f64,
    pub var_z2: f64,
    pub eta_f: f64,
    pub lambda_f: f64,
    pub bases: Vec<BaseFunction>,
}

impl LatentState {
    pub fn n_functions(&self) -> usize {
        self.z1.len()
    }

    pub fn z0(&self, i: usize) -> f64 {
        if i + 1 == self.n_functions() {
            -self.z0_free.iter().sum::<f64>()
        } else {
            self.z0_free[i]
        }
    }

    pub fn z0_full(&self) -> Vec<f64> {
        (0..self.n_functions()).map(|i| self.z0(i)).collect()
    }

    /// Prior-centred state: no warping, unit first-factor weights, zero
    /// shifts, zero factors and unit variances.
    pub fn centered(p: usize, n: usize) -> Self {
        LatentState {
            f1: DVector::zeros(p),
            f2: DVector::zeros(p),
            z0_free: vec![0.0; n - 1],
            z1: vec![1.0; n],
            z2: vec![0.0; n],
            var_z0: 1.0,
            var_z1: 1.0,
            var_z2: 1.0,
            eta_f: 1.0,
            lambda_f: 1.0,
            bases: vec![BaseFunction::zeros(p - 1); n],
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        check_positive("var_z0", self.var_z0)?;
        check_positive("var_z1", self.var_z1)?;
        check_positive("var_z2", self.var_z2)?;
        check_positive("eta_f", self.eta_f)?;
        check_positive("lambda_f", self.lambda_f)?;
        let n = self.n_functions();
        if self.z0_free.len() + 1 != n || self.z2.len() != n || self.bases.len() != n {
            return Err(Error::ShapeMismatch("inconsistent per-function block sizes".into()));
        }
        Ok(())
    }
}

/// Everything that stays fixed while fitting one dataset: the data, the
/// configuration and the derived penalty quantities.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub data: Dataset,
    pub cfg: ModelConfig,
    pub pen: PenaltySet,
    pub pen_reduced: PenaltySet,
    /// `Sigma^-1 1`.
    pub sigma_inv_ones: DVector<f64>,
    /// `1' Sigma^-1 1`.
    pub ones_sigma_inv_ones: f64,
}

impl ModelContext {
    pub fn new(data: Dataset, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if data.n_functions() < 2 {
            return Err(Error::DegenerateData("need at least two functions".into()));
        }
        let pen = PenaltySet::new(&data.grid)?;
        let pen_reduced = PenaltySet::reduced(&data.grid)?;
        let ones = DVector::from_element(data.n_points(), 1.0);
        let sigma_inv_ones = &pen.sigma_inv * &ones;
        let ones_sigma_inv_ones = ones.dot(&sigma_inv_ones);
        Ok(ModelContext { data, cfg, pen, pen_reduced, sigma_inv_ones, ones_sigma_inv_ones })
    }

    pub fn p(&self) -> usize {
        self.data.n_points()
    }

    pub fn n(&self) -> usize {
        self.data.n_functions()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.data.grid
    }

    pub fn base_prior(&self, gamma_w: f64) -> Result<BasePrior> {
        BasePrior::new(&self.pen_reduced, gamma_w, self.cfg.lambda_w)
    }

    /// `X_i(h_i)` for every function, one column each.
    pub fn registered_data(&self, bases: &[BaseFunction]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.p(), self.n());
        for (i, w) in bases.iter().enumerate() {
            let h = warp_from_base(w, self.grid())?;
            out.set_column(i, &DVector::from_vec(self.warp_column(i, &h)));
        }
        Ok(out)
    }

    pub fn warp_column(&self, i: usize, h: &Warp) -> Vec<f64> {
        apply_warp(self.data.values.column(i).as_slice(), h, self.grid(), self.cfg.interpolation)
    }

    /// Log normalising constant of `N_p(., (g1 + g2)^-1 Sigma)`.
    pub fn data_log_norm(&self) -> f64 {
        let p = self.p() as f64;
        -0.5 * p * (2.0 * std::f64::consts::PI).ln()
            + 0.5 * (p * self.cfg.gamma_sum().ln() + self.pen.ln_det_sigma_inv())
    }
}

/// `z0_i 1 + z1_i f1 + k z2_i f2`.
pub fn registered_mean(state: &LatentState, i: usize, cfg: &ModelConfig) -> DVector<f64> {
    let p = state.f1.len();
    DVector::from_element(p, state.z0(i)) + &state.f1 * state.z1[i] + &state.f2 * (cfg.kappa() * state.z2[i])
}

/// `sum_i log N_p(X_i(h_i); mean_i, (g1 + g2)^-1 Sigma)` for pre-warped data.
pub fn data_loglik(state: &LatentState, ctx: &ModelContext, registered: &DMatrix<f64>) -> f64 {
    let norm = ctx.data_log_norm();
    let g = ctx.cfg.gamma_sum();
    (0..ctx.n())
        .map(|i| {
            let r = registered.column(i) - registered_mean(state, i, &ctx.cfg);
            norm - 0.5 * g * r.dot(&(&ctx.pen.sigma_inv * &r))
        })
        .sum()
}

/// Per-block prior log densities; summed by [`log_joint`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PriorTerms {
    pub bases: f64,
    pub z0: f64,
    pub z1: f64,
    pub z2: f64,
    pub variances: f64,
    pub factors: f64,
    pub smoothing: f64,
}

impl PriorTerms {
    pub fn total(&self) -> f64 {
        self.bases + self.z0 + self.z1 + self.z2 + self.variances + self.factors + self.smoothing
    }
}

pub fn log_priors(state: &LatentState, ctx: &ModelContext, gamma_w: f64) -> Result<PriorTerms> {
    let cfg = &ctx.cfg;
    let base_prior = ctx.base_prior(gamma_w)?;
    let mut bases = 0.0;
    for w in &state.bases {
        bases += base_prior.log_density(&w.canonical()?.0);
    }
    let z0 = state.z0_free.iter().map(|&z| ln_normal(z, 0.0, state.var_z0)).sum();
    let z1 = state.z1.iter().map(|&z| ln_normal(z, 1.0, state.var_z1)).sum();
    let z2 = state.z2.iter().map(|&z| ln_normal(z, 0.0, state.var_z2)).sum();
    let variances = [state.var_z0, state.var_z1, state.var_z2]
        .iter()
        .map(|&v| ln_inv_gamma(v, cfg.a, cfg.b))
        .sum();
    let prec = ctx.pen.precision(state.eta_f, state.lambda_f);
    let ln_det = ctx.pen.ln_det_precision(state.eta_f, state.lambda_f);
    let p = ctx.p() as f64;
    let factor = |f: &DVector<f64>| {
        -0.5 * p * (2.0 * std::f64::consts::PI).ln() + 0.5 * ln_det - 0.5 * f.dot(&(&prec * f))
    };
    let factors = factor(&state.f1) + factor(&state.f2);
    let smoothing = ln_gamma_pdf(state.eta_f, cfg.c, cfg.d) + ln_gamma_pdf(state.lambda_f, cfg.c, cfg.d);
    Ok(PriorTerms { bases, z0, z1, z2, variances, factors, smoothing })
}

/// Unnormalised log joint density of data and all unknowns.
pub fn log_joint(state: &LatentState, ctx: &ModelContext) -> Result<f64> {
    log_joint_with_gamma_w(state, ctx, ctx.cfg.gamma_w)
}

pub fn log_joint_with_gamma_w(state: &LatentState, ctx: &ModelContext, gamma_w: f64) -> Result<f64> {
    let registered = ctx.registered_data(&state.bases)?;
    Ok(data_loglik(state, ctx, &registered) + log_priors(state, ctx, gamma_w)?.total())
}
