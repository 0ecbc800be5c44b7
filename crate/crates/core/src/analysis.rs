//! Alignment quality (sls), weight-based grouping and factor recovery.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Derivative of each column: centred differences inside, one-sided
/// first-order differences at the two ends.
pub fn derivatives(x: &DMatrix<f64>, grid: &TimeGrid) -> DMatrix<f64> {
    let (p, n) = x.shape();
    let dt = grid.spacing();
    let mut d = DMatrix::zeros(p, n);
    for i in 0..n {
        d[(0, i)] = (x[(1, i)] - x[(0, i)]) / dt;
        d[(p - 1, i)] = (x[(p - 1, i)] - x[(p - 2, i)]) / dt;
        for j in 1..p - 1 {
            d[(j, i)] = (x[(j + 1, i)] - x[(j - 1, i)]) / (2.0 * dt);
        }
    }
    d
}

/// Trapezoid integral over `t` of the cross-sectional variance of the
/// derivatives.
pub fn derivative_variance(x: &DMatrix<f64>, grid: &TimeGrid) -> f64 {
    let d = derivatives(x, grid);
    let (p, n) = d.shape();
    let var: Vec<f64> = (0..p)
        .map(|j| {
            // shifted by the first value so identical rows give exactly zero
            let row = d.row(j);
            let shifted: Vec<f64> = row.iter().map(|v| v - row[0]).collect();
            let m = shifted.iter().sum::<f64>() / n as f64;
            shifted.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64
        })
        .collect();
    let dt = grid.spacing();
    dt * (var.iter().sum::<f64>() - 0.5 * (var[0] + var[p - 1]))
}

fn check_pair(original: &DMatrix<f64>, registered: &DMatrix<f64>, grid: &TimeGrid) -> Result<()> {
    if original.shape() != registered.shape() {
        return Err(Error::ShapeMismatch(format!(
            "original is {:?}, registered is {:?}",
            original.shape(),
            registered.shape()
        )));
    }
    if original.nrows() != grid.len() || grid.len() < 4 {
        return Err(Error::ShapeMismatch("curves must have one row per grid point (p >= 4)".into()));
    }
    Ok(())
}

/// Integrated derivative variance of the registered curves relative to the
/// original ones; lower is better aligned.
pub fn sls(original: &DMatrix<f64>, registered: &DMatrix<f64>, grid: &TimeGrid) -> Result<f64> {
    check_pair(original, registered, grid)?;
    let den = derivative_variance(original, grid);
    if den <= 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(derivative_variance(registered, grid) / den)
}

/// Sum of per-group [`sls`] values. Groups with fewer than two functions
/// carry no variance and are skipped with a warning.
pub fn sls_grouped(
    original: &DMatrix<f64>,
    registered: &DMatrix<f64>,
    groups: &GroupAssignment,
    grid: &TimeGrid,
) -> Result<f64> {
    check_pair(original, registered, grid)?;
    if groups.labels.len() != original.ncols() {
        return Err(Error::ShapeMismatch("one group label per function required".into()));
    }
    let mut total = 0.0;
    let mut used = 0;
    for label in groups.distinct_labels() {
        let idx = groups.members(label);
        if idx.len() < 2 {
            log::warn!("group {label} has {} function(s); excluded from grouped sls", idx.len());
            continue;
        }
        total += sls(&original.select_columns(&idx), &registered.select_columns(&idx), grid)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::DegenerateData("no group with at least two functions".into()));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum GroupMode {
    /// Quadrant of `(z1 - mean, z2 - mean)`.
    QuadrantCenteredBoth,
    /// Quadrant of `(z1 - mean, z2)`.
    QuadrantCenteredZ1Only,
    /// 1 = `z2` in `[lo, hi]`, 2 = below, 3 = above.
    Z2Threshold { lo: f64, hi: f64 },
}

/// The rule that produced a grouping, enough to re-derive it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRule {
    pub mode: GroupMode,
    pub z1_centered: bool,
    pub z2_centered: bool,
    /// Means subtracted from the weights (0 when not centred).
    pub z1_offset: f64,
    pub z2_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub labels: Vec<u8>,
    pub rule: GroupRule,
}

impl GroupAssignment {
    pub fn distinct_labels(&self) -> Vec<u8> {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn members(&self, label: u8) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == label).map(|(i, _)| i).collect()
    }
}

/// Quadrants are numbered counter-clockwise from `z1 > 0, z2 > 0`.
/// A weight exactly on a boundary goes to the lower-numbered group.
fn quadrant(z1: f64, z2: f64) -> u8 {
    if z2 >= 0.0 {
        if z1 >= 0.0 {
            1
        } else {
            2
        }
    } else if z1 <= 0.0 {
        3
    } else {
        4
    }
}

pub fn group_by_weights(z1: &[f64], z2: &[f64], mode: GroupMode) -> Result<GroupAssignment> {
    if z1.len() != z2.len() {
        return Err(Error::ShapeMismatch("z1 and z2 differ in length".into()));
    }
    if z1.iter().chain(z2).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter { name: "weights", reason: "must be finite".into() });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (z1_centered, z2_centered) = match mode {
        GroupMode::QuadrantCenteredBoth => (true, true),
        GroupMode::QuadrantCenteredZ1Only => (true, false),
        GroupMode::Z2Threshold { .. } => (false, false),
    };
    let z1_offset = if z1_centered { mean(z1) } else { 0.0 };
    let z2_offset = if z2_centered { mean(z2) } else { 0.0 };
    let labels = z1
        .iter()
        .zip(z2)
        .map(|(&a, &b)| {
            let (a, b) = (a - z1_offset, b - z2_offset);
            match mode {
                GroupMode::Z2Threshold { lo, hi } => {
                    if b >= lo && b <= hi {
                        1
                    } else if b < lo {
                        2
                    } else {
                        3
                    }
                }
                _ => quadrant(a, b),
            }
        })
        .collect();
    Ok(GroupAssignment { labels, rule: GroupRule { mode, z1_centered, z2_centered, z1_offset, z2_offset } })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorRecovery {
    /// Cosines of the principal angles, largest first.
    pub correlations: [f64; 2],
    /// The estimated pair spans fewer than two dimensions.
    pub rank_deficient: bool,
}

fn orthonormal_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let top = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| top > 0.0 && svd.singular_values[k] > 1e-10 * top)
        .collect();
    u.select_columns(&keep)
}

/// Canonical correlations between `span{f1, f2}` and the columns of `truth`.
pub fn factor_recovery_score(f1: &[f64], f2: &[f64], truth: &DMatrix<f64>) -> Result<FactorRecovery> {
    let p = f1.len();
    if f2.len() != p || truth.nrows() != p || truth.ncols() != 2 {
        return Err(Error::ShapeMismatch("factor recovery needs two p-vectors and a p x 2 basis".into()));
    }
    let qt = orthonormal_basis(truth);
    if qt.ncols() < 2 {
        return Err(Error::DegenerateData("true factor basis is not of rank 2".into()));
    }
    let mut est = DMatrix::zeros(p, 2);
    est.column_mut(0).copy_from_slice(f1);
    est.column_mut(1).copy_from_slice(f2);
    let qe = orthonormal_basis(&est);
    let rank_deficient = qe.ncols() < 2;
    let mut correlations = [0.0; 2];
    if qe.ncols() > 0 {
        let s = (qe.transpose() * qt).singular_values();
        let mut s: Vec<f64> = s.iter().map(|v| v.min(1.0)).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        for (c, v) in correlations.iter_mut().zip(s) {
            *c = v;
        }
    }
    if rank_deficient {
        log::warn!("estimated factors are rank deficient; second canonical correlation set to 0");
        correlations[1] = 0.0;
    }
    Ok(FactorRecovery { correlations, rank_deficient })
}
