//! Common time grid and the penalty matrices built on it.
//!
//! `P2` is the pseudo-inverse of the scaled second-difference penalty
//! `K = D^T D` (null space `span{1, t}`), `P1 = B B^T` projects onto the
//! constant-and-linear subspace, and `Sigma = P1 + P2`. Because the two
//! ranges are orthogonal every `eta^-1 P1 + lambda^-1 P2` is inverted in
//! closed form by `eta P1^- + lambda P2^-`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_positive, Error, Result};
use crate::linalg::sym_pinv;

const PINV_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
    spacing: f64,
}

impl TimeGrid {
    /// `p` equally spaced points from `t_start` to `t_end` inclusive.
    pub fn new(t_start: f64, t_end: f64, p: usize) -> Result<Self> {
        if p < 4 {
            return Err(Error::InvalidGrid(format!("need at least 4 points, got {p}")));
        }
        Self::with_min_len(t_start, t_end, p, 4)
    }

    fn with_min_len(t_start: f64, t_end: f64, p: usize, min: usize) -> Result<Self> {
        if p < min {
            return Err(Error::InvalidGrid(format!("need at least {min} points, got {p}")));
        }
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(Error::InvalidGrid(format!(
                "t_end ({t_end}) must exceed t_start ({t_start})"
            )));
        }
        let spacing = (t_end - t_start) / (p - 1) as f64;
        let mut points: Vec<f64> = (0..p).map(|j| t_start + j as f64 * spacing).collect();
        points[p - 1] = t_end;
        Ok(TimeGrid { points, spacing })
    }

    /// The first `p - 1` points, the domain of the base functions.
    /// Allowed down to three points so that `p = 4` models still have a
    /// base-function prior.
    pub fn truncated(&self) -> TimeGrid {
        let p = self.len() - 1;
        let mut points = self.points[..p].to_vec();
        points[p - 1] = self.points[p - 1];
        TimeGrid { points, spacing: self.spacing }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn width(&self) -> f64 {
        self.end() - self.start()
    }

    /// Index of the grid point equal to `t`, if `t` lies exactly on the grid.
    pub(crate) fn exact_index(&self, t: f64) -> Option<usize> {
        let k = ((t - self.start()) / self.spacing).round();
        if k < 0.0 || k >= self.len() as f64 {
            return None;
        }
        let k = k as usize;
        (self.points[k] == t).then_some(k)
    }
}

/// Penalty and covariance matrices on a grid. Immutable once built.
#[derive(Debug, Clone)]
pub struct PenaltySet {
    pub p1: DMatrix<f64>,
    pub p2: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    /// Precision counterpart of `p1` (equal to `p1`, a projection).
    pub p1_prec: DMatrix<f64>,
    /// Precision counterpart of `p2`: the curvature penalty `K`.
    pub p2_prec: DMatrix<f64>,
    pub sigma_inv: DMatrix<f64>,
    pub grid: TimeGrid,
    /// `log pdet(K)`, the log of the product of the nonzero eigenvalues of `K`.
    pub ln_pdet_p2_prec: f64,
}

impl PenaltySet {
    pub fn new(grid: &TimeGrid) -> Result<Self> {
        let p = grid.len();
        if p < 3 {
            return Err(Error::InvalidGrid("penalties need at least 3 points".into()));
        }
        let dt2 = grid.spacing() * grid.spacing();
        let mut diff = DMatrix::zeros(p - 2, p);
        for r in 0..p - 2 {
            diff[(r, r)] = 1.0 / dt2;
            diff[(r, r + 1)] = -2.0 / dt2;
            diff[(r, r + 2)] = 1.0 / dt2;
        }
        let p2_prec = diff.transpose() * &diff;
        let (p2, kept) = sym_pinv(&p2_prec, PINV_CUTOFF)?;
        if kept.len() != p - 2 {
            return Err(Error::Numerical(format!(
                "curvature penalty has rank {} on a {p}-point grid, expected {}",
                kept.len(),
                p - 2
            )));
        }
        let ln_pdet_p2_prec = kept.iter().map(|l| l.ln()).sum();

        let ones = DVector::from_element(p, 1.0);
        let b1 = &ones / (p as f64).sqrt();
        let t = DVector::from_column_slice(grid.points());
        let mut b2 = &t - b1.scale(b1.dot(&t));
        b2 /= b2.norm();
        let p1 = &b1 * b1.transpose() + &b2 * b2.transpose();

        let sigma = &p1 + &p2;
        let sigma_inv = &p1 + &p2_prec;
        Ok(PenaltySet {
            p1_prec: p1.clone(),
            p1,
            p2,
            sigma,
            p2_prec,
            sigma_inv,
            grid: grid.clone(),
            ln_pdet_p2_prec,
        })
    }

    /// Penalties on the truncated `(p - 1)`-point grid of the base functions.
    pub fn reduced(grid: &TimeGrid) -> Result<Self> {
        if grid.len() < 4 {
            return Err(Error::InvalidGrid("reduced penalties need p >= 4".into()));
        }
        Self::new(&grid.truncated())
    }

    pub fn dim(&self) -> usize {
        self.grid.len()
    }

    /// `log det(eta P1^- + lambda P2^-)`.
    pub fn ln_det_precision(&self, eta: f64, lambda: f64) -> f64 {
        2.0 * eta.ln() + (self.dim() - 2) as f64 * lambda.ln() + self.ln_pdet_p2_prec
    }

    /// `log det(Sigma^-1)`.
    pub fn ln_det_sigma_inv(&self) -> f64 {
        self.ln_pdet_p2_prec
    }

    /// `eta P1^- + lambda P2^-`.
    pub fn precision(&self, eta: f64, lambda: f64) -> DMatrix<f64> {
        &self.p1_prec * eta + &self.p2_prec * lambda
    }
}

/// Factor prior covariance `eta^-1 P1 + lambda^-1 P2` and its precision.
pub fn sigma_f(pen: &PenaltySet, eta: f64, lambda: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_positive("eta", eta)?;
    check_positive("lambda", lambda)?;
    let cov = &pen.p1 / eta + &pen.p2 / lambda;
    Ok((cov, pen.precision(eta, lambda)))
}
