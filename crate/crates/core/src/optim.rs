//! Dense BFGS maximiser with Armijo backtracking, plus a coordinate line
//! search used as a fallback when the quasi-Newton step stalls.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Stop when the max-norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step improves the objective by less than this
    /// (relative to `1 + |f|`).
    pub f_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions { max_iters: 400, grad_tol: 1e-7, f_tol: 1e-14 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximises `f`, which returns `(value, gradient)` or `None` outside its domain.
pub fn bfgs_maximize<F>(f: F, x0: &[f64], opts: &OptimOptions) -> Option<OptimResult>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (mut fx, g) = f(x0)?;
    let mut x = DVector::from_column_slice(x0);
    let mut grad = DVector::from_vec(g);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iters {
        if grad.amax() < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut dir = &hinv * &grad;
        let mut slope = dir.dot(&grad);
        if !(slope > 0.0) {
            hinv.fill_with_identity();
            dir = grad.clone();
            slope = dir.dot(&grad);
        }
        let mut step = if scaled { 1.0 } else { (1.0 / grad.amax()).min(1.0) };
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + &dir * step;
            if let Some((ft, gt)) = f(trial.as_slice()) {
                if ft.is_finite() && ft >= fx + 1e-4 * step * slope {
                    accepted = Some((trial, ft, DVector::from_vec(gt)));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            break;
        };
        let s = &xn - &x;
        // ascent: the curvature pair uses the negated gradient change
        let y = &grad - &gnew;
        let sy = s.dot(&y);
        let gain = fnew - fx;
        x = xn;
        fx = fnew;
        grad = gnew;
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled {
                hinv *= sy / y.dot(&y);
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        if gain <= opts.f_tol * (1.0 + fx.abs()) {
            converged = grad.amax() < opts.grad_tol;
            break;
        }
    }
    Some(OptimResult {
        grad_inf: grad.amax(),
        x: x.as_slice().to_vec(),
        value: fx,
        iterations,
        converged,
    })
}

/// Cyclic coordinate search with step halving; slow but only needs values.
pub fn coordinate_search<F>(f: F, x0: &[f64], initial_step: f64, sweeps: usize) -> Option<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let mut x = x0.to_vec();
    let mut fx = f(&x)?;
    let mut step = initial_step;
    for _ in 0..sweeps {
        let mut improved = false;
        for k in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut trial = x.clone();
                trial[k] += dir * step;
                if let Some(ft) = f(&trial) {
                    if ft > fx {
                        x = trial;
                        fx = ft;
                        improved = true;
                        break;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-10 {
                break;
            }
        }
    }
    Some((x, fx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximises_a_concave_quadratic() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let f = |x: &[f64]| {
            let x = DVector::from_column_slice(x);
            let ax = &a * &x;
            Some((b.dot(&x) - 0.5 * x.dot(&ax), (&b - ax).as_slice().to_vec()))
        };
        let r = bfgs_maximize(f, &[0.0; 3], &OptimOptions::default()).unwrap();
        let exact = a.clone().lu().solve(&b).unwrap();
        for k in 0..3 {
            assert!((r.x[k] - exact[k]).abs() < 1e-7);
        }
        assert!(r.converged);
    }

    #[test]
    fn rosenbrock_valley() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2));
            let ga = 2.0 * (1.0 - a) + 400.0 * a * (b - a * a);
            let gb = -200.0 * (b - a * a);
            Some((v, vec![ga, gb]))
        };
        let opts = OptimOptions { max_iters: 2000, ..Default::default() };
        let r = bfgs_maximize(f, &[-1.2, 1.0], &opts).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn coordinate_search_improves() {
        let f = |x: &[f64]| Some(-(x[0] - 0.3).powi(2) - (x[1] + 0.7).powi(2));
        let (x, v) = coordinate_search(f, &[0.0, 0.0], 0.5, 200).unwrap();
        assert!(v > -1e-12);
        assert!((x[0] - 0.3).abs() < 1e-5);
    }
}
