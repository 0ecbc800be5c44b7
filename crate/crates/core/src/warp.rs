//! Base functions, the monotone warps they induce, and the base-function prior.
//!
//! A base function `w` (length `p - 1`) defines increments
//! `h(t_j) - h(t_{j-1}) = (t_j - t_{j-1}) exp(w(t_{j-1}))`. Adding a constant
//! to `w` rescales every increment, so each `w` is stored in its canonical
//! form: shifted so that the increments sum exactly to `t_p - t_1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_positive, Error, Result};
use crate::grid::{PenaltySet, TimeGrid};
use crate::interp::{Interpolant, Interpolation};

/// Largest admissible `|w|`; `exp(30)` is far beyond any plausible warp slope.
pub const WARP_GUARD: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseFunction(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warp(pub Vec<f64>);

impl BaseFunction {
    pub fn zeros(len: usize) -> Self {
        BaseFunction(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    /// Canonical representative: the unique shift whose warp ends at `t_p`.
    pub fn canonical(&self) -> Result<BaseFunction> {
        check_range(&self.0)?;
        let c = log_mean_exp(&self.0);
        let w: Vec<f64> = self.0.iter().map(|v| v - c).collect();
        check_range(&w)?;
        Ok(BaseFunction(w))
    }
}

impl Warp {
    pub fn identity(grid: &TimeGrid) -> Self {
        Warp(grid.points().to_vec())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Endpoint and strict monotonicity check.
    pub fn is_admissible(&self, grid: &TimeGrid, tol: f64) -> bool {
        let h = &self.0;
        h.len() == grid.len()
            && (h[0] - grid.start()).abs() <= tol
            && (h[h.len() - 1] - grid.end()).abs() <= tol
            && h.windows(2).all(|w| w[1] > w[0])
    }

    /// Base function reproducing this warp (log of the increment ratios).
    pub fn to_base(&self, grid: &TimeGrid) -> BaseFunction {
        let dt = grid.spacing();
        BaseFunction(self.0.windows(2).map(|w| ((w[1] - w[0]) / dt).ln()).collect())
    }
}

fn check_range(w: &[f64]) -> Result<()> {
    for &v in w {
        if !v.is_finite() || v.abs() > WARP_GUARD {
            return Err(Error::WarpOverflow(v.abs()));
        }
    }
    Ok(())
}

// With equal spacing, sum_k dt e^{w_k} / (t_p - t_1) is the mean of e^{w_k}.
fn log_mean_exp(w: &[f64]) -> f64 {
    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = w.iter().map(|v| (v - max).exp()).sum();
    max + (s / w.len() as f64).ln()
}

/// Endpoint-normalized cumulative map `w -> h`, kept around for gradients.
pub(crate) struct WarpMap {
    pub h: Vec<f64>,
    incr: Vec<f64>,
    cum: Vec<f64>,
    total: f64,
    width: f64,
}

impl WarpMap {
    pub(crate) fn new(w: &[f64], grid: &TimeGrid) -> Result<Self> {
        let p = grid.len();
        if w.len() != p - 1 {
            return Err(Error::ShapeMismatch(format!(
                "base function has {} values, grid needs {}",
                w.len(),
                p - 1
            )));
        }
        check_range(w)?;
        let width = grid.width();
        if w.iter().all(|&v| v == w[0]) {
            // Any constant base function is the identity warp.
            let incr = vec![1.0; p - 1];
            let cum: Vec<f64> = (0..p).map(|j| j as f64).collect();
            return Ok(WarpMap {
                h: grid.points().to_vec(),
                incr,
                total: (p - 1) as f64,
                cum,
                width,
            });
        }
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let incr: Vec<f64> = w.iter().map(|v| (v - max).exp()).collect();
        let mut cum = Vec::with_capacity(p);
        cum.push(0.0);
        let mut acc = 0.0;
        for a in &incr {
            acc += a;
            cum.push(acc);
        }
        let total = acc;
        let t0 = grid.start();
        let mut h: Vec<f64> = cum.iter().map(|s| t0 + width * s / total).collect();
        h[0] = t0;
        h[p - 1] = grid.end();
        Ok(WarpMap { h, incr, cum, total, width })
    }

    /// Pulls a gradient with respect to `h` back to the raw base function.
    pub(crate) fn pullback(&self, grad_h: &[f64]) -> Vec<f64> {
        let m = self.incr.len();
        let weighted: f64 = grad_h.iter().zip(&self.cum).map(|(g, s)| g * s).sum::<f64>() / self.total;
        let mut suffix = vec![0.0; m + 1];
        for j in (0..m).rev() {
            suffix[j] = suffix[j + 1] + grad_h[j + 1];
        }
        (0..m)
            .map(|k| self.width * self.incr[k] / self.total * (suffix[k] - weighted))
            .collect()
    }
}

/// Warp induced by `w`; satisfies both endpoint constraints exactly.
pub fn warp_from_base(w: &BaseFunction, grid: &TimeGrid) -> Result<Warp> {
    Ok(Warp(WarpMap::new(&w.0, grid)?.h))
}

/// `x` (samples on `grid`) evaluated at the warped times `h(t_j)`.
pub fn apply_warp(x: &[f64], h: &Warp, grid: &TimeGrid, kind: Interpolation) -> Vec<f64> {
    let f = Interpolant::new(grid, x, kind);
    h.0.iter().map(|&t| f.eval(t)).collect()
}

/// Gaussian prior on base functions, precision `g_w P1^- + (1/g_w + 1/l_w)^-1 P2^-`
/// on the truncated grid.
#[derive(Debug, Clone)]
pub struct BasePrior {
    pub precision: DMatrix<f64>,
    pub ln_det_precision: f64,
}

impl BasePrior {
    pub fn new(pen_reduced: &PenaltySet, gamma_w: f64, lambda_w: f64) -> Result<Self> {
        check_positive("gamma_w", gamma_w)?;
        check_positive("lambda_w", lambda_w)?;
        let curvature = 1.0 / (1.0 / gamma_w + 1.0 / lambda_w);
        Ok(BasePrior {
            precision: pen_reduced.precision(gamma_w, curvature),
            ln_det_precision: pen_reduced.ln_det_precision(gamma_w, curvature),
        })
    }

    pub fn dim(&self) -> usize {
        self.precision.nrows()
    }

    pub fn log_density(&self, w: &[f64]) -> f64 {
        let v = DVector::from_column_slice(w);
        let m = self.dim() as f64;
        -0.5 * m * (2.0 * std::f64::consts::PI).ln() + 0.5 * self.ln_det_precision
            - 0.5 * v.dot(&(&self.precision * &v))
    }

    pub(crate) fn gradient(&self, w: &[f64]) -> DVector<f64> {
        -(&self.precision * DVector::from_column_slice(w))
    }
}

/// Log prior density of the canonical representative of `w`.
pub fn log_base_prior(
    w: &BaseFunction,
    pen_reduced: &PenaltySet,
    gamma_w: f64,
    lambda_w: f64,
) -> Result<f64> {
    let prior = BasePrior::new(pen_reduced, gamma_w, lambda_w)?;
    Ok(prior.log_density(&w.canonical()?.0))
}

/// Result of recentring a sample of warps so their pointwise mean is the identity.
#[derive(Debug, Clone)]
pub struct CenteredWarps {
    pub warps: Vec<Warp>,
    pub bases: Vec<BaseFunction>,
    /// Pointwise mean of the input warps.
    pub mean_warp: Warp,
    /// `mean_warp^-1(t_j)`: registered times re-expressed on the centred axis.
    pub mean_inverse: Vec<f64>,
}

/// Replaces each `h_i` by `h_i o hbar^-1`, with piecewise-linear `h_i` and `hbar`.
/// The pointwise mean of the result is the identity up to rounding.
pub fn mean_warp_center(warps: &[Warp], grid: &TimeGrid) -> CenteredWarps {
    let p = grid.len();
    let n = warps.len() as f64;
    let mut mean = vec![0.0; p];
    for h in warps {
        for (m, v) in mean.iter_mut().zip(&h.0) {
            *m += v / n;
        }
    }
    mean[0] = grid.start();
    mean[p - 1] = grid.end();
    let inverse = invert_piecewise_linear(&mean, grid);
    let mut out_warps = Vec::with_capacity(warps.len());
    let mut out_bases = Vec::with_capacity(warps.len());
    for h in warps {
        let lin = Interpolant::new(grid, &h.0, Interpolation::Linear);
        let mut v: Vec<f64> = inverse.iter().map(|&s| lin.eval(s)).collect();
        v[0] = grid.start();
        v[p - 1] = grid.end();
        let warp = Warp(v);
        out_bases.push(warp.to_base(grid));
        out_warps.push(warp);
    }
    CenteredWarps {
        warps: out_warps,
        bases: out_bases,
        mean_warp: Warp(mean),
        mean_inverse: inverse,
    }
}

/// `s_j` with `hbar(s_j) = t_j`, for strictly increasing piecewise-linear `hbar`.
fn invert_piecewise_linear(hbar: &[f64], grid: &TimeGrid) -> Vec<f64> {
    let pts = grid.points();
    let p = pts.len();
    let mut out = Vec::with_capacity(p);
    let mut k = 0;
    for &t in pts {
        while k < p - 2 && hbar[k + 1] < t {
            k += 1;
        }
        let (a, b) = (hbar[k], hbar[k + 1]);
        let frac = ((t - a) / (b - a)).clamp(0.0, 1.0);
        out.push(pts[k] + frac * (pts[k + 1] - pts[k]));
    }
    out[0] = grid.start();
    out[p - 1] = grid.end();
    out
}
