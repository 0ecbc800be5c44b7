//! Interpolation of grid samples at arbitrary (warped) times.

use serde::{Deserialize, Serialize};

use crate::grid::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Fritsch-Carlson monotone piecewise cubic Hermite.
    #[default]
    MonotoneCubic,
    Linear,
}

/// A C1 (cubic) or C0 (linear) interpolant of samples on an equally spaced grid.
#[derive(Debug, Clone)]
pub struct Interpolant<'a> {
    grid: &'a TimeGrid,
    values: &'a [f64],
    slopes: Vec<f64>,
    kind: Interpolation,
}

impl<'a> Interpolant<'a> {
    pub fn new(grid: &'a TimeGrid, values: &'a [f64], kind: Interpolation) -> Self {
        assert_eq!(grid.len(), values.len(), "values must match the grid");
        let slopes = match kind {
            Interpolation::MonotoneCubic => fritsch_carlson_slopes(values, grid.spacing()),
            Interpolation::Linear => Vec::new(),
        };
        Interpolant { grid, values, slopes, kind }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.eval_with_derivative(t).0
    }

    /// Value and first derivative at `t`; `t` is clamped to the grid.
    pub fn eval_with_derivative(&self, t: f64) -> (f64, f64) {
        let n = self.values.len();
        let dt = self.grid.spacing();
        let t0 = self.grid.start();
        let t = t.clamp(t0, self.grid.end());
        let k = (((t - t0) / dt).floor() as usize).min(n - 2);
        let s = (t - self.grid.points()[k]) / dt;
        let (y0, y1) = (self.values[k], self.values[k + 1]);
        let exact = self.grid.exact_index(t);
        match self.kind {
            Interpolation::Linear => {
                let d = (y1 - y0) / dt;
                match exact {
                    Some(j) => (self.values[j], d),
                    None => (y0 + s * (y1 - y0), d),
                }
            }
            Interpolation::MonotoneCubic => {
                let (m0, m1) = (self.slopes[k], self.slopes[k + 1]);
                let s2 = s * s;
                let s3 = s2 * s;
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                let dh00 = 6.0 * s2 - 6.0 * s;
                let dh10 = 3.0 * s2 - 4.0 * s + 1.0;
                let dh01 = -6.0 * s2 + 6.0 * s;
                let dh11 = 3.0 * s2 - 2.0 * s;
                let d = (dh00 * y0 + dh01 * y1) / dt + dh10 * m0 + dh11 * m1;
                match exact {
                    Some(j) => (self.values[j], self.slopes[j]),
                    None => (h00 * y0 + h10 * dt * m0 + h01 * y1 + h11 * dt * m1, d),
                }
            }
        }
    }
}

fn fritsch_carlson_slopes(y: &[f64], dt: f64) -> Vec<f64> {
    let n = y.len();
    let secants: Vec<f64> = y.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let mut m = vec![0.0; n];
    m[0] = secants[0];
    m[n - 1] = secants[n - 2];
    for k in 1..n - 1 {
        let (a, b) = (secants[k - 1], secants[k]);
        m[k] = if a * b <= 0.0 { 0.0 } else { 0.5 * (a + b) };
    }
    for k in 0..n - 1 {
        let d = secants[k];
        if d == 0.0 {
            m[k] = 0.0;
            m[k + 1] = 0.0;
            continue;
        }
        let alpha = m[k] / d;
        let beta = m[k + 1] / d;
        let r = alpha * alpha + beta * beta;
        if r > 9.0 {
            let tau = 3.0 / r.sqrt();
            m[k] = tau * alpha * d;
            m[k + 1] = tau * beta * d;
        }
    }
    m
}
