//! Scalar densities, special functions and the trend/Monte Carlo helpers
//! used by the diagnostics.

use std::f64::consts::PI;

pub use statrs::function::gamma::{digamma, ln_gamma};

pub fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (2.0 * PI * var).ln() - 0.5 * r * r / var
}

/// Inverse-gamma log density, shape/rate parameterisation.
pub fn ln_inv_gamma(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// Gamma log density, shape/rate parameterisation.
pub fn ln_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannKendall {
    pub s: f64,
    pub z: f64,
    pub p_value: f64,
}

impl MannKendall {
    pub fn significant(&self, level: f64) -> bool {
        self.p_value < level
    }
}

/// `S` statistic and its tie-corrected null variance.
fn kendall_s(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            s += match x[j].partial_cmp(&x[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut ties = 0.0;
    let mut k = 0;
    while k < n {
        let mut m = k + 1;
        while m < n && sorted[m] == sorted[k] {
            m += 1;
        }
        let t = (m - k) as f64;
        ties += t * (t - 1.0) * (2.0 * t + 5.0);
        k = m;
    }
    let nf = n as f64;
    (s as f64, (nf * (nf - 1.0) * (2.0 * nf + 5.0) - ties) / 18.0)
}

fn finish(s: f64, var: f64) -> MannKendall {
    let z = if var <= 0.0 {
        0.0
    } else if s > 0.0 {
        (s - 1.0) / var.sqrt()
    } else if s < 0.0 {
        (s + 1.0) / var.sqrt()
    } else {
        0.0
    };
    MannKendall { s, z, p_value: 2.0 * (1.0 - normal_cdf(z.abs())) }
}

/// Two-sided Mann-Kendall trend test with the tie-corrected variance.
/// Assumes independent observations.
pub fn mann_kendall(x: &[f64]) -> MannKendall {
    let (s, var) = kendall_s(x);
    finish(s, var)
}

/// Median of all pairwise slopes.
pub fn sen_slope(x: &[f64]) -> f64 {
    let n = x.len();
    let mut slopes = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            slopes.push((x[j] - x[i]) / (j - i) as f64);
        }
    }
    if slopes.is_empty() {
        return 0.0;
    }
    slopes.sort_by(|a, b| a.total_cmp(b));
    let m = slopes.len();
    if m % 2 == 1 {
        slopes[m / 2]
    } else {
        0.5 * (slopes[m / 2 - 1] + slopes[m / 2])
    }
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut m = k + 1;
        while m < n && x[idx[m]] == x[idx[k]] {
            m += 1;
        }
        let r = (k + m + 1) as f64 / 2.0;
        for &i in &idx[k..m] {
            ranks[i] = r;
        }
        k = m;
    }
    ranks
}

/// Mann-Kendall test with the Hamed-Rao variance correction for serial
/// correlation: the variance of `S` is inflated by the effective-sample-size
/// factor computed from the significant autocorrelations of the ranks of
/// the Sen-detrended series.
pub fn mann_kendall_hamed_rao(x: &[f64]) -> MannKendall {
    let n = x.len();
    let (s, var) = kendall_s(x);
    if n < 4 {
        return finish(s, var);
    }
    let slope = sen_slope(x);
    let detrended: Vec<f64> = x.iter().enumerate().map(|(i, v)| v - slope * i as f64).collect();
    let ranks = average_ranks(&detrended);
    let m = mean(&ranks);
    let c0: f64 = ranks.iter().map(|r| (r - m) * (r - m)).sum();
    let nf = n as f64;
    let bound = 1.96 / nf.sqrt();
    let mut acc = 0.0;
    if c0 > 0.0 {
        for k in 1..n {
            let ck: f64 = (0..n - k).map(|i| (ranks[i] - m) * (ranks[i + k] - m)).sum();
            let rho = ck / c0;
            if rho.abs() > bound {
                let kf = k as f64;
                acc += (nf - kf) * (nf - kf - 1.0) * (nf - kf - 2.0) * rho;
            }
        }
    }
    let factor = 1.0 + 2.0 / (nf * (nf - 1.0) * (nf - 2.0)) * acc;
    let factor = if factor > 0.0 { factor } else { 1.0 };
    finish(s, var * factor)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Standard error of the mean of an autocorrelated series by non-overlapping
/// batch means.
pub fn batch_means_se(x: &[f64], batches: usize) -> f64 {
    let size = x.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| mean(&x[b * size..(b + 1) * size])).collect();
    (variance(&means) / batches as f64).sqrt()
}
