//! The two simulated benchmark datasets, with ground truth.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::Dataset;
use crate::warp::Warp;

pub const DOMAIN: (f64, f64) = (-3.0, 3.0);
pub const SET1_FUNCTIONS: usize = 21;
pub const SET2_FUNCTIONS: usize = 20;

/// `6 (e^{a(t+3)/6} - 1) / (e^a - 1) - 3` on `[-3, 3]`; the identity when `a = 0`.
pub fn kr_warp(a: f64, t: f64) -> f64 {
    kr_warp_on(a, t, DOMAIN.0, DOMAIN.1)
}

/// The same family rescaled to `[lo, hi]`.
pub fn kr_warp_on(a: f64, t: f64, lo: f64, hi: f64) -> f64 {
    if a == 0.0 {
        return t;
    }
    let width = hi - lo;
    lo + width * (a * (t - lo) / width).exp_m1() / a.exp_m1()
}

fn bump(t: f64, center: f64, width: f64) -> f64 {
    (-0.5 * ((t - center) / width).powi(2)).exp()
}

/// A simulated dataset and everything used to generate it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimDataset {
    pub set: u8,
    pub seed: u64,
    #[serde(skip)]
    pub observed: Option<Dataset>,
    pub t_start: f64,
    pub t_end: f64,
    pub p: usize,
    /// Registered curves, one column per function.
    pub true_registered: DMatrix<f64>,
    /// Generating warps: `observed_i(t) = registered_i(h_i(t))`.
    pub true_warps: Vec<Warp>,
    /// `(c1, c2)` for set 1, `(z1, z2)` for set 2.
    pub true_weights: Vec<(f64, f64)>,
    /// Factor curves on the grid (`p x 2`).
    pub true_factors: DMatrix<f64>,
    /// Group labels (`+1` / `-1`, the sign of `z2`); set 2 only.
    pub group_labels: Option<Vec<i8>>,
}

impl SimDataset {
    pub fn dataset(&self) -> &Dataset {
        self.observed.as_ref().expect("dataset is populated on generation")
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t_start, self.t_end, self.p)
    }

    pub fn truth_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Reads a truth sidecar and attaches the observed dataset it describes.
    pub fn from_truth_json(text: &str, observed: Dataset) -> Result<Self> {
        let mut sim: SimDataset = serde_json::from_str(text)?;
        sim.observed = Some(observed);
        sim.validate()?;
        Ok(sim)
    }

    /// Checks that the observed curves are the registered curves composed
    /// with the stored warps (analytically for the generator families, so
    /// only up to interpolation error when re-derived from grid values).
    pub fn validate(&self) -> Result<()> {
        let data = self.dataset();
        let n = data.n_functions();
        let mismatch = |what: &str| Err(Error::ShapeMismatch(format!("truth does not match dataset: {what}")));
        if data.n_points() != self.p || self.true_registered.ncols() != n || self.true_warps.len() != n {
            return mismatch("dimensions");
        }
        let grid = self.grid()?;
        if (grid.start() - data.grid.start()).abs() > 1e-9 || (grid.end() - data.grid.end()).abs() > 1e-9 {
            return mismatch("time grid");
        }
        for (i, h) in self.true_warps.iter().enumerate() {
            if !h.is_admissible(&grid, 1e-10) {
                return mismatch("inadmissible warp");
            }
            let reg = self.true_registered.column(i);
            let back = crate::warp::apply_warp(reg.as_slice(), h, &grid, crate::Interpolation::MonotoneCubic);
            let scale = reg.amax().max(1.0);
            let tol = 0.05 * scale;
            for (j, v) in back.iter().enumerate() {
                if (v - data.values[(j, i)]).abs() > tol {
                    return mismatch("observed curve is not the warped registered curve");
                }
            }
        }
        Ok(())
    }
}

/// Shapes and weight laws for the second dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorSpec {
    pub f1_center: f64,
    pub f1_width: f64,
    pub f2_center: f64,
    pub f2_width: f64,
    pub z1_sd: f64,
    pub z2_mean: f64,
    pub z2_sd: f64,
    /// Forces every `z2` to zero when set.
    pub zero_z2: bool,
    /// Disables warping when set.
    pub no_warp: bool,
}

impl Default for FactorSpec {
    fn default() -> Self {
        FactorSpec {
            f1_center: -0.75,
            f1_width: 0.9,
            f2_center: 1.5,
            f2_width: 0.5,
            z1_sd: 0.1,
            z2_mean: 0.5,
            z2_sd: 0.1,
            zero_z2: false,
            no_warp: false,
        }
    }
}

impl FactorSpec {
    pub fn f1(&self, t: f64) -> f64 {
        bump(t, self.f1_center, self.f1_width)
    }

    pub fn f2(&self, t: f64) -> f64 {
        bump(t, self.f2_center, self.f2_width)
    }
}

fn check_p(p: usize) -> Result<TimeGrid> {
    if p < 20 {
        log::warn!("p = {p} is coarse for the simulated curves");
    }
    TimeGrid::new(DOMAIN.0, DOMAIN.1, p)
}

/// 21 two-bump curves `c1 e^{-(t-1.5)^2/2} + c2 e^{-(t+1.5)^2/2}` with
/// `c ~ N(1, 0.25^2)`, warped by the exponential family at `a` equally
/// spaced on `[-1, 1]`.
pub fn simulate_set1(p: usize, seed: u64) -> Result<SimDataset> {
    let grid = check_p(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(1.0, 0.25).expect("valid normal");
    let n = SET1_FUNCTIONS;
    let mut observed = DMatrix::zeros(p, n);
    let mut registered = DMatrix::zeros(p, n);
    let mut warps = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let a = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
        let (c1, c2) = (normal.sample(&mut rng), normal.sample(&mut rng));
        let g = |t: f64| c1 * bump(t, 1.5, 1.0) + c2 * bump(t, -1.5, 1.0);
        let mut h: Vec<f64> = grid.points().iter().map(|&t| kr_warp(a, t)).collect();
        h[0] = grid.start();
        h[p - 1] = grid.end();
        for (j, &t) in grid.points().iter().enumerate() {
            registered[(j, i)] = g(t);
            observed[(j, i)] = g(h[j]);
        }
        warps.push(Warp(h));
        weights.push((c1, c2));
    }
    let mut factors = DMatrix::zeros(p, 2);
    for (j, &t) in grid.points().iter().enumerate() {
        factors[(j, 0)] = bump(t, 1.5, 1.0);
        factors[(j, 1)] = bump(t, -1.5, 1.0);
    }
    Ok(SimDataset {
        set: 1,
        seed,
        observed: Some(Dataset::new(grid.clone(), observed)?),
        t_start: grid.start(),
        t_end: grid.end(),
        p,
        true_registered: registered,
        true_warps: warps,
        true_weights: weights,
        true_factors: factors,
        group_labels: None,
    })
}

/// `n` curves `z1 f1 + z2 f2` with `z1 ~ N(1, sd^2)` and
/// `z2 = s |N(m, sd^2)|`, `s` alternating `+1, -1`, each warped with
/// `a ~ U(-1, 1)`.
pub fn simulate_set2(p: usize, n: usize, seed: u64, spec: &FactorSpec) -> Result<SimDataset> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::InvalidParameter { name: "n", reason: format!("must be even and >= 2, got {n}") });
    }
    let grid = check_p(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z1_law = Normal::new(1.0, spec.z1_sd)
        .map_err(|e| Error::InvalidParameter { name: "z1_sd", reason: e.to_string() })?;
    let z2_law = Normal::new(spec.z2_mean, spec.z2_sd)
        .map_err(|e| Error::InvalidParameter { name: "z2_sd", reason: e.to_string() })?;
    let a_law = Uniform::new(-1.0, 1.0).expect("valid uniform");
    let mut observed = DMatrix::zeros(p, n);
    let mut registered = DMatrix::zeros(p, n);
    let mut warps = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        let z1 = z1_law.sample(&mut rng);
        let z2 = if spec.zero_z2 { 0.0 } else { sign * z2_law.sample(&mut rng).abs() };
        let a: f64 = rng.sample(a_law);
        let a = if spec.no_warp { 0.0 } else { a };
        let g = |t: f64| z1 * spec.f1(t) + z2 * spec.f2(t);
        let mut h: Vec<f64> = grid.points().iter().map(|&t| kr_warp(a, t)).collect();
        h[0] = grid.start();
        h[p - 1] = grid.end();
        for (j, &t) in grid.points().iter().enumerate() {
            registered[(j, i)] = g(t);
            observed[(j, i)] = g(h[j]);
        }
        warps.push(Warp(h));
        weights.push((z1, z2));
        labels.push(if sign > 0.0 { 1 } else { -1 });
    }
    let mut factors = DMatrix::zeros(p, 2);
    for (j, &t) in grid.points().iter().enumerate() {
        factors[(j, 0)] = spec.f1(t);
        factors[(j, 1)] = spec.f2(t);
    }
    Ok(SimDataset {
        set: 2,
        seed,
        observed: Some(Dataset::new(grid.clone(), observed)?),
        t_start: grid.start(),
        t_end: grid.end(),
        p,
        true_registered: registered,
        true_warps: warps,
        true_weights: weights,
        true_factors: factors,
        group_labels: Some(labels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kr_warp_examples() {
        for t in [-3.0, -1.2, 0.0, 2.9] {
            assert_eq!(kr_warp(0.0, t), t);
        }
        for a in [-1.0, -0.3, 0.7, 1.0] {
            assert_relative_eq!(kr_warp(a, -3.0), -3.0, epsilon = 1e-14);
            assert_relative_eq!(kr_warp(a, 3.0), 3.0, epsilon = 1e-12);
        }
        // 6 (e^0.5 - 1) / (e - 1) - 3, evaluated independently
        let expected = 6.0 * (0.5f64.exp() - 1.0) / (1f64.exp() - 1.0) - 3.0;
        assert_relative_eq!(kr_warp(1.0, 0.0), expected, epsilon = 1e-14);
        assert_relative_eq!(kr_warp(1.0, 0.0), -0.734756, epsilon = 1e-6);
    }

    #[test]
    fn set1_middle_function_is_unwarped() {
        let sim = simulate_set1(61, 3).unwrap();
        let data = sim.dataset();
        assert_eq!(data.n_functions(), 21);
        assert_eq!(data.values.column(10), sim.true_registered.column(10));
        for h in &sim.true_warps {
            assert!(h.is_admissible(&data.grid, 1e-10));
        }
        sim.validate().unwrap();
    }

    #[test]
    fn set1_weight_mean() {
        let mut sum = 0.0;
        let mut count = 0.0;
        for seed in 0..500 {
            let sim = simulate_set1(20, seed).unwrap();
            for (c1, _) in &sim.true_weights {
                sum += c1;
                count += 1.0;
            }
        }
        // 10,500 draws, sd of the mean 0.0024
        assert!((sum / count - 1.0).abs() < 0.01);
    }

    #[test]
    fn regeneration_is_bitwise() {
        let a = simulate_set2(40, 20, 9, &FactorSpec::default()).unwrap();
        let b = simulate_set2(40, 20, 9, &FactorSpec::default()).unwrap();
        assert_eq!(a.dataset().values, b.dataset().values);
        assert_eq!(a.true_weights, b.true_weights);
    }

    #[test]
    fn set2_groups_and_shapes() {
        let sim = simulate_set2(61, 20, 4, &FactorSpec::default()).unwrap();
        let labels = sim.group_labels.clone().unwrap();
        for ((_, z2), l) in sim.true_weights.iter().zip(&labels) {
            assert_eq!(z2.signum() as i8, *l);
        }
        assert_eq!(labels.iter().filter(|&&l| l > 0).count(), 10);
        sim.validate().unwrap();

        let spec = FactorSpec { no_warp: true, ..FactorSpec::default() };
        let sim = simulate_set2(61, 20, 4, &spec).unwrap();
        let grid = sim.grid().unwrap();
        let j = grid.points().iter().position(|&t| (t - 1.5).abs() < 1e-9).unwrap();
        let x = &sim.dataset().values;
        let labels = sim.group_labels.clone().unwrap();
        // the f2 bump is a peak in the positive group and a dip in the other,
        // relative to the f1-only level at the same time
        for i in 0..20 {
            let (z1, _) = sim.true_weights[i];
            let base = z1 * spec.f1(1.5);
            assert_eq!((x[(j, i)] - base).signum() as i8, labels[i]);
        }

        let spec = FactorSpec { zero_z2: true, ..FactorSpec::default() };
        let sim = simulate_set2(61, 20, 4, &spec).unwrap();
        for (i, (z1, _)) in sim.true_weights.iter().enumerate() {
            for (j, &ht) in sim.true_warps[i].0.iter().enumerate() {
                assert_relative_eq!(sim.dataset().values[(j, i)], z1 * spec.f1(ht), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn set2_rejects_odd_n() {
        assert!(simulate_set2(30, 7, 0, &FactorSpec::default()).is_err());
    }
}
