use super::*;
use crate::grid::TimeGrid;
use crate::model::{Dataset, ModelConfig};
use crate::optim::OptimOptions;
use crate::simgen::simulate_set1;
use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Gamma, InverseGamma};
use statrs::function::gamma::{digamma as sdigamma, ln_gamma as sln_gamma};
use statrs::statistics::Distribution;

fn cfg() -> ModelConfig {
    ModelConfig { gamma1: 9.0, gamma2: 2.0, a: 1.5, b: 0.7, c: 2.0, d: 0.4, ..ModelConfig::default() }
}

fn random_context(p: usize, n: usize, seed: u64) -> ModelContext {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = TimeGrid::new(0.0, (p - 1) as f64, p).unwrap();
    let values = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
    ModelContext::new(Dataset::new(grid, values).unwrap(), cfg()).unwrap()
}

fn spd(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.5..0.5));
    &a * a.transpose() + DMatrix::identity(m, m) * 0.05
}

fn random_q(ctx: &ModelContext, seed: u64) -> QState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let (p, n) = (ctx.p(), ctx.n());
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let sr = |shape: f64| ShapeRate { shape, rate: 0.0 };
    let mut q = QState {
        mu_f1: DVector::zeros(p),
        mu_f2: DVector::zeros(p),
        cov_f1: DMatrix::zeros(p, p),
        cov_f2: DMatrix::zeros(p, p),
        mu_z0: vec![0.0; n - 1],
        var_z0q: vec![0.0; n - 1],
        mu_z1: vec![0.0; n],
        var_z1q: vec![0.0; n],
        mu_z2: vec![0.0; n],
        var_z2q: vec![0.0; n],
        ig_z0: sr(ctx.cfg.a + (n - 1) as f64 / 2.0),
        ig_z1: sr(ctx.cfg.a + n as f64 / 2.0),
        ig_z2: sr(ctx.cfg.a + n as f64 / 2.0),
        g_eta: sr(ctx.cfg.c + 2.0),
        g_lambda: sr(ctx.cfg.c + (p - 2) as f64),
        bases: vec![BaseFunction::zeros(p - 1); n],
        registered: DMatrix::zeros(p, n),
        criterion_trace: Vec::new(),
    };
    q.mu_f1 = DVector::from_fn(p, |_, _| u(-1.0, 1.0));
    q.mu_f2 = DVector::from_fn(p, |_, _| u(-1.0, 1.0));
    q.mu_z0 = (0..n - 1).map(|_| u(-0.5, 0.5)).collect();
    q.var_z0q = (0..n - 1).map(|_| u(0.01, 0.3)).collect();
    q.mu_z1 = (0..n).map(|_| u(0.5, 1.5)).collect();
    q.var_z1q = (0..n).map(|_| u(0.01, 0.3)).collect();
    q.mu_z2 = (0..n).map(|_| u(-1.0, 1.0)).collect();
    q.var_z2q = (0..n).map(|_| u(0.01, 0.3)).collect();
    for s in [&mut q.ig_z0, &mut q.ig_z1, &mut q.ig_z2, &mut q.g_eta, &mut q.g_lambda] {
        s.rate = u(0.3, 3.0);
    }
    q.bases = (0..n).map(|_| BaseFunction((0..p - 1).map(|_| u(-0.3, 0.3)).collect()).canonical().unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    q.cov_f1 = spd(p, &mut rng);
    q.cov_f2 = spd(p, &mut rng);
    q.registered = ctx.registered_data(&q.bases).unwrap();
    q
}

/// `[I; -1']`, mapping free shifts to all `N` shifts.
fn constraint(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n - 1, |r, c| if r == c { 1.0 } else if r == n - 1 { -1.0 } else { 0.0 })
}

fn stacked(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// `I_N (x) g Sigma^-1`, the precision of all registered curves stacked.
fn big_w(ctx: &ModelContext) -> DMatrix<f64> {
    DMatrix::<f64>::identity(ctx.n(), ctx.n()).kronecker(&(&ctx.pen.sigma_inv * ctx.cfg.gamma_sum()))
}

/// Stacked q-means of `z0_i 1`, `z1_i f1` and `k z2_i f2`.
fn mean_parts(q: &QState, ctx: &ModelContext) -> [DVector<f64>; 3] {
    let (p, n) = (ctx.p(), ctx.n());
    let z0 = constraint(n) * DVector::from_column_slice(&q.mu_z0);
    let ones = DVector::from_element(p, 1.0);
    let kappa = ctx.cfg.kappa();
    [
        z0.kronecker(&ones),
        DVector::from_column_slice(&q.mu_z1).kronecker(&q.mu_f1),
        DVector::from_column_slice(&q.mu_z2).kronecker(&q.mu_f2) * kappa,
    ]
}

fn dense_solve(prec: &DMatrix<f64>, rhs: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let inv = prec.clone().try_inverse().unwrap();
    (&inv * rhs, inv)
}

fn max_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

#[test]
fn factor_updates_match_kronecker_oracle() {
    for seed in 0..4 {
        let ctx = random_context(4, 3, seed);
        let q0 = random_q(&ctx, seed);
        let w = big_w(&ctx);
        let x = stacked(&q0.registered);
        let [m0, m1, m2] = mean_parts(&q0, &ctx);
        let eye = DMatrix::<f64>::identity(4, 4);
        let kappa = ctx.cfg.kappa();
        let prior = &ctx.pen.p1_prec * q0.g_eta.mean_gamma() + &ctx.pen.p2_prec * q0.g_lambda.mean_gamma();

        // f1: mean design (mu_z1 (x) I), plus the z1 variances on the diagonal blocks
        let b = DMatrix::from_column_slice(3, 1, &q0.mu_z1).kronecker(&eye);
        let var_part: f64 = q0.var_z1q.iter().sum();
        let prec = b.transpose() * &w * &b + &ctx.pen.sigma_inv * (ctx.cfg.gamma_sum() * var_part) + &prior;
        let (mean, cov) = dense_solve(&prec, &(b.transpose() * &w * (&x - &m0 - &m2)));
        let mut q = q0.clone();
        update_q_f1(&mut q, &ctx).unwrap();
        assert!((&q.mu_f1 - &mean).amax() < 1e-9 * mean.amax().max(1.0), "seed {seed}");
        assert!(max_rel(&q.cov_f1, &cov) < 1e-9);

        let b = DMatrix::from_column_slice(3, 1, &q0.mu_z2).kronecker(&eye) * kappa;
        let var_part: f64 = q0.var_z2q.iter().sum();
        let prec =
            b.transpose() * &w * &b + &ctx.pen.sigma_inv * (ctx.cfg.gamma_sum() * kappa * kappa * var_part) + &prior;
        let (mean, cov) = dense_solve(&prec, &(b.transpose() * &w * (&x - &m0 - &m1)));
        let mut q = q0.clone();
        update_q_f2(&mut q, &ctx).unwrap();
        assert!((&q.mu_f2 - &mean).amax() < 1e-9 * mean.amax().max(1.0));
        assert!(max_rel(&q.cov_f2, &cov) < 1e-9);
    }
}

fn trace_dense(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut t = 0.0;
    for j in 0..a.nrows() {
        for k in 0..a.ncols() {
            t += a[(j, k)] * b[(k, j)];
        }
    }
    t
}

#[test]
fn weight_updates_match_kronecker_oracle() {
    for seed in 0..4 {
        let n = 3 + seed as usize;
        let ctx = random_context(4, n, seed);
        let q0 = random_q(&ctx, seed);
        let w = big_w(&ctx);
        let x = stacked(&q0.registered);
        let [_, m1, m2] = mean_parts(&q0, &ctx);
        let g = ctx.cfg.gamma_sum();
        let kappa = ctx.cfg.kappa();

        // shifts: the whole free block as one Gaussian
        let d = constraint(n).kronecker(&DVector::from_element(4, 1.0));
        let tau = q0.ig_z0.mean_gamma();
        let prec = d.transpose() * &w * &d + DMatrix::identity(n - 1, n - 1) * tau;
        let (mean, _) = dense_solve(&prec, &(d.transpose() * &w * (&x - &m1 - &m2)));
        let mut q = q0.clone();
        update_q_z0(&mut q, &ctx);
        for i in 0..n - 1 {
            assert_relative_eq!(q.mu_z0[i], mean[i], epsilon = 1e-10, max_relative = 1e-9);
            // factorised optimum: reciprocal of the diagonal precision
            assert_relative_eq!(q.var_z0q[i], 1.0 / prec[(i, i)], max_relative = 1e-12);
        }

        // scalings: design I_N (x) f1, expected Gram diagonal
        let f = DMatrix::<f64>::identity(n, n).kronecker(&q0.mu_f1);
        let tau = q0.ig_z1.mean_gamma();
        let extra = g * trace_dense(&ctx.pen.sigma_inv, &q0.cov_f1);
        let [m0, _, m2] = mean_parts(&q0, &ctx);
        let prec = f.transpose() * &w * &f + DMatrix::identity(n, n) * (tau + extra);
        let rhs = f.transpose() * &w * (&x - &m0 - &m2) + DVector::from_element(n, tau);
        let (mean, _) = dense_solve(&prec, &rhs);
        let mut q = q0.clone();
        update_q_z1(&mut q, &ctx);
        for i in 0..n {
            assert_relative_eq!(q.mu_z1[i], mean[i], max_relative = 1e-9);
            assert_relative_eq!(q.var_z1q[i], 1.0 / prec[(i, i)], max_relative = 1e-12);
        }

        let f = DMatrix::<f64>::identity(n, n).kronecker(&q0.mu_f2) * kappa;
        let tau = q0.ig_z2.mean_gamma();
        let extra = g * kappa * kappa * trace_dense(&ctx.pen.sigma_inv, &q0.cov_f2);
        let [m0, m1, _] = mean_parts(&q0, &ctx);
        let prec = f.transpose() * &w * &f + DMatrix::identity(n, n) * (tau + extra);
        let (mean, _) = dense_solve(&prec, &(f.transpose() * &w * (&x - &m0 - &m1)));
        let mut q = q0.clone();
        update_q_z2(&mut q, &ctx);
        for i in 0..n {
            assert_relative_eq!(q.mu_z2[i], mean[i], epsilon = 1e-10, max_relative = 1e-9);
            assert_relative_eq!(q.var_z2q[i], 1.0 / prec[(i, i)], max_relative = 1e-12);
        }
    }
}

#[test]
fn shift_block_is_a_fixed_point_of_coordinate_sweeps() {
    // Coordinate ascent on the coupled shifts converges to the block solution.
    let ctx = random_context(5, 4, 11);
    let mut q = random_q(&ctx, 11);
    update_q_z0(&mut q, &ctx);
    let g = ctx.cfg.gamma_sum() * ctx.ones_sigma_inv_ones;
    let tau = q.ig_z0.mean_gamma();
    let kappa = ctx.cfg.kappa();
    let u: Vec<f64> = (0..4)
        .map(|i| {
            let r = q.registered.column(i) - &q.mu_f1 * q.mu_z1[i] - &q.mu_f2 * (kappa * q.mu_z2[i]);
            ctx.cfg.gamma_sum() * ctx.sigma_inv_ones.dot(&r)
        })
        .collect();
    for i in 0..3 {
        let others: f64 = (0..3).filter(|&k| k != i).map(|k| q.mu_z0[k]).sum();
        let one_step = (u[i] - u[3] - g * others) / (tau + 2.0 * g);
        assert_relative_eq!(one_step, q.mu_z0[i], epsilon = 1e-10, max_relative = 1e-9);
    }
}

#[test]
fn hyper_rates_match_hand_traces() {
    for seed in 0..3 {
        let ctx = random_context(5, 3, seed);
        let mut q = random_q(&ctx, seed);
        let before = q.clone();
        update_q_hyper(&mut q, &ctx);
        let m = &q.cov_f1 + &q.mu_f1 * q.mu_f1.transpose() + &q.cov_f2 + &q.mu_f2 * q.mu_f2.transpose();
        let (d, b) = (ctx.cfg.d, ctx.cfg.b);
        assert_relative_eq!(q.g_eta.rate, d + 0.5 * trace_dense(&ctx.pen.p1_prec, &m), max_relative = 1e-12);
        assert_relative_eq!(q.g_lambda.rate, d + 0.5 * trace_dense(&ctx.pen.p2_prec, &m), max_relative = 1e-12);
        let mut s0 = 0.0;
        for i in 0..2 {
            s0 += q.var_z0q[i] + q.mu_z0[i].powi(2);
        }
        assert_relative_eq!(q.ig_z0.rate, b + 0.5 * s0, max_relative = 1e-12);
        let s1: f64 = (0..3).map(|i| q.var_z1q[i] + (q.mu_z1[i] - 1.0).powi(2)).sum();
        assert_relative_eq!(q.ig_z1.rate, b + 0.5 * s1, max_relative = 1e-12);
        let s2: f64 = (0..3).map(|i| q.var_z2q[i] + q.mu_z2[i].powi(2)).sum();
        assert_relative_eq!(q.ig_z2.rate, b + 0.5 * s2, max_relative = 1e-12);
        for (x, y) in [(q.ig_z0, before.ig_z0), (q.g_eta, before.g_eta), (q.g_lambda, before.g_lambda)] {
            assert_eq!(x.shape, y.shape);
        }
        assert_eq!(q.mu_f1, before.mu_f1);
    }
}

#[test]
fn hyper_rates_at_prior_moments() {
    let ctx = random_context(5, 3, 2);
    let mut q = random_q(&ctx, 2);
    q.mu_f1.fill(0.0);
    q.mu_f2.fill(0.0);
    q.cov_f1.fill(0.0);
    q.cov_f2.fill(0.0);
    q.mu_z0.fill(0.0);
    q.var_z0q.fill(0.0);
    q.mu_z2.fill(0.0);
    q.var_z2q.fill(0.0);
    // scalings are centred on one, so "no deviation" is mean one
    q.mu_z1.fill(1.0);
    q.var_z1q.fill(0.0);
    update_q_hyper(&mut q, &ctx);
    assert_eq!(q.g_eta.rate, ctx.cfg.d);
    assert_eq!(q.g_lambda.rate, ctx.cfg.d);
    for r in [q.ig_z0.rate, q.ig_z1.rate, q.ig_z2.rate] {
        assert_eq!(r, ctx.cfg.b);
    }
}

#[test]
fn zero_scalings_give_prior_factor_and_weight_updates() {
    let ctx = random_context(4, 2, 5);
    let mut q = random_q(&ctx, 5);
    q.mu_z1.fill(0.0);
    q.var_z1q.fill(0.0);
    update_q_f1(&mut q, &ctx).unwrap();
    let (cov, _) = crate::grid::sigma_f(&ctx.pen, q.g_eta.mean_gamma(), q.g_lambda.mean_gamma()).unwrap();
    assert!(q.mu_f1.amax() < 1e-14);
    assert!(max_rel(&q.cov_f1, &cov) < 1e-8);

    q.mu_f1.fill(0.0);
    q.cov_f1.fill(0.0);
    update_q_z1(&mut q, &ctx);
    for i in 0..2 {
        assert_relative_eq!(q.var_z1q[i], 1.0 / q.ig_z1.mean_gamma(), max_relative = 1e-14);
        assert_relative_eq!(q.mu_z1[i], 1.0, max_relative = 1e-14);
    }
}

#[test]
fn identical_pair_gets_zero_shift() {
    let grid = TimeGrid::new(0.0, 1.0, 12).unwrap();
    let col = DVector::from_fn(12, |j, _| (j as f64 * 0.5).sin());
    let values = DMatrix::from_columns(&[col.clone(), col]);
    let ctx = ModelContext::new(Dataset::new(grid, values).unwrap(), cfg()).unwrap();
    let init = avb_init(&ctx).unwrap();
    assert!(init.f2_fallback);
    let mut q = init.q;
    update_q_z0(&mut q, &ctx);
    assert!(q.mu_z0[0].abs() < 1e-12);
}

// ---- criterion -------------------------------------------------------------

fn gaussian_entropy(cov: &DMatrix<f64>) -> f64 {
    let m = cov.nrows() as f64;
    let l = cov.clone().cholesky().unwrap();
    let ln_det: f64 = 2.0 * l.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    0.5 * m * (1.0 + (2.0 * std::f64::consts::PI).ln()) + 0.5 * ln_det
}

fn dense_ln_det(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant().ln()
}

#[test]
fn criterion_terms_match_dense_oracle() {
    for seed in 0..4 {
        let ctx = random_context(4, 2 + seed as usize % 2, seed);
        let q = random_q(&ctx, seed);
        let gamma_w = 0.3;
        let t = elbo_terms(&q, &ctx, gamma_w).unwrap();
        let (p, n) = (ctx.p(), ctx.n());
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let kappa = ctx.cfg.kappa();

        // data: E[(x-m)'W(x-m)] = (x - Em)'W(x - Em) + tr(W Cov m)
        let w = big_w(&ctx);
        let x = stacked(&q.registered);
        let [m0, m1, m2] = mean_parts(&q, &ctx);
        let r = &x - m0 - m1 - m2;
        let c = constraint(n);
        let ones = DMatrix::from_element(p, p, 1.0);
        let cov_z0 = &c * DMatrix::from_diagonal(&DVector::from_column_slice(&q.var_z0q)) * c.transpose();
        let second = |mu: &[f64], var: &[f64]| {
            let v = DVector::from_column_slice(mu);
            &v * v.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(var))
        };
        let outer = |mu: &[f64]| {
            let v = DVector::from_column_slice(mu);
            &v * v.transpose()
        };
        let cov_m = cov_z0.kronecker(&ones)
            + second(&q.mu_z1, &q.var_z1q).kronecker(&q.second_moment_f1())
            - outer(&q.mu_z1).kronecker(&(&q.mu_f1 * q.mu_f1.transpose()))
            + (second(&q.mu_z2, &q.var_z2q).kronecker(&q.second_moment_f2())
                - outer(&q.mu_z2).kronecker(&(&q.mu_f2 * q.mu_f2.transpose())))
                * (kappa * kappa);
        let ln_det_w = dense_ln_det(&w);
        let data = -0.5 * (p * n) as f64 * ln2pi + 0.5 * ln_det_w - 0.5 * (r.dot(&(&w * &r)) + trace_dense(&w, &cov_m));
        assert_relative_eq!(t.data, data, max_relative = 1e-9);

        // factors: pseudo-determinant offset measured densely at eta = lambda = 1
        let e_eta = q.g_eta.shape / q.g_eta.rate;
        let e_lambda = q.g_lambda.shape / q.g_lambda.rate;
        let ln_eta = sdigamma(q.g_eta.shape) - q.g_eta.rate.ln();
        let ln_lambda = sdigamma(q.g_lambda.shape) - q.g_lambda.rate.ln();
        let offset = dense_ln_det(&ctx.pen.precision(1.0, 1.0));
        let e_ln_det = offset + 2.0 * ln_eta + (p - 2) as f64 * ln_lambda;
        let prec = &ctx.pen.p1_prec * e_eta + &ctx.pen.p2_prec * e_lambda;
        for (term, mu, cov) in [(t.f1, &q.mu_f1, &q.cov_f1), (t.f2, &q.mu_f2, &q.cov_f2)] {
            let m = cov + mu * mu.transpose();
            let expected = -0.5 * p as f64 * ln2pi + 0.5 * e_ln_det - 0.5 * trace_dense(&prec, &m) + gaussian_entropy(cov);
            assert_relative_eq!(term, expected, epsilon = 1e-9, max_relative = 1e-9);
        }

        // weights
        let weight = |mu: &[f64], var: &[f64], centre: f64, ig: &ShapeRate| {
            let e_prec = ig.shape / ig.rate;
            let e_ln_var = ig.rate.ln() - sdigamma(ig.shape);
            mu.iter()
                .zip(var)
                .map(|(m, v)| {
                    -0.5 * ln2pi - 0.5 * e_ln_var - 0.5 * e_prec * (v + (m - centre).powi(2))
                        + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * v).ln()
                })
                .sum::<f64>()
        };
        assert_relative_eq!(t.z0, weight(&q.mu_z0, &q.var_z0q, 0.0, &q.ig_z0), epsilon = 1e-10, max_relative = 1e-10);
        assert_relative_eq!(t.z1, weight(&q.mu_z1, &q.var_z1q, 1.0, &q.ig_z1), epsilon = 1e-10, max_relative = 1e-10);
        assert_relative_eq!(t.z2, weight(&q.mu_z2, &q.var_z2q, 0.0, &q.ig_z2), epsilon = 1e-10, max_relative = 1e-10);

        let (a, b, cc, d) = (ctx.cfg.a, ctx.cfg.b, ctx.cfg.c, ctx.cfg.d);
        for (term, s) in [(t.var_z0, q.ig_z0), (t.var_z1, q.ig_z1), (t.var_z2, q.ig_z2)] {
            let e_ln = s.rate.ln() - sdigamma(s.shape);
            let e_inv = s.shape / s.rate;
            let h = InverseGamma::new(s.shape, s.rate).unwrap().entropy().unwrap();
            let expected = a * b.ln() - sln_gamma(a) - (a + 1.0) * e_ln - b * e_inv + h;
            assert_relative_eq!(term, expected, epsilon = 1e-10, max_relative = 1e-10);
        }
        for (term, s) in [(t.eta, q.g_eta), (t.lambda, q.g_lambda)] {
            let e_ln = sdigamma(s.shape) - s.rate.ln();
            let h = Gamma::new(s.shape, s.rate).unwrap().entropy().unwrap();
            let expected = cc * d.ln() - sln_gamma(cc) + (cc - 1.0) * e_ln - d * s.shape / s.rate + h;
            assert_relative_eq!(term, expected, epsilon = 1e-10, max_relative = 1e-10);
        }

        let curv = 1.0 / (1.0 / gamma_w + 1.0 / ctx.cfg.lambda_w);
        let bp = ctx.pen_reduced.precision(gamma_w, curv);
        let ln_det_bp = dense_ln_det(&bp);
        let bases: f64 = q
            .bases
            .iter()
            .map(|w| {
                let v = w.to_dvector();
                -0.5 * (p - 1) as f64 * ln2pi + 0.5 * ln_det_bp - 0.5 * v.dot(&(&bp * &v))
            })
            .sum();
        assert_relative_eq!(t.bases, bases, max_relative = 1e-9);
        assert_relative_eq!(t.total(), elbo(&q, &ctx, gamma_w).unwrap(), max_relative = 1e-15);
    }
}

#[test]
fn criterion_is_deterministic() {
    let ctx = random_context(6, 3, 1);
    let q = random_q(&ctx, 1);
    let copy = q.clone();
    assert_eq!(elbo(&q, &ctx, 0.1).unwrap().to_bits(), elbo(&copy, &ctx, 0.1).unwrap().to_bits());
}

fn same_except(a: &QState, b: &QState, changed: &[&str]) {
    let check = |name: &str, same: bool| {
        if !changed.contains(&name) {
            assert!(same, "block {name} changed");
        }
    };
    check("f1", a.mu_f1 == b.mu_f1 && a.cov_f1 == b.cov_f1);
    check("f2", a.mu_f2 == b.mu_f2 && a.cov_f2 == b.cov_f2);
    check("z0", a.mu_z0 == b.mu_z0 && a.var_z0q == b.var_z0q);
    check("z1", a.mu_z1 == b.mu_z1 && a.var_z1q == b.var_z1q);
    check("z2", a.mu_z2 == b.mu_z2 && a.var_z2q == b.var_z2q);
    check("hyper", a.ig_z0 == b.ig_z0 && a.ig_z1 == b.ig_z1 && a.ig_z2 == b.ig_z2 && a.g_eta == b.g_eta && a.g_lambda == b.g_lambda);
    assert_eq!(a.bases, b.bases);
    assert_eq!(a.registered, b.registered);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_update_raises_the_criterion(seed in 0u64..10_000, p in 4usize..9, n in 2usize..6) {
        let ctx = random_context(p, n, seed);
        let mut q = random_q(&ctx, seed);
        type Update = fn(&mut QState, &ModelContext);
        let steps: [(&str, Update); 6] = [
            ("f1", |q, c| update_q_f1(q, c).unwrap()),
            ("f2", |q, c| update_q_f2(q, c).unwrap()),
            ("z0", update_q_z0),
            ("z1", update_q_z1),
            ("z2", update_q_z2),
            ("hyper", update_q_hyper),
        ];
        for _ in 0..2 {
            for (name, step) in steps {
                let before = q.clone();
                let v0 = elbo(&q, &ctx, 0.5).unwrap();
                step(&mut q, &ctx);
                let v1 = elbo(&q, &ctx, 0.5).unwrap();
                prop_assert!(v1 >= v0 - 1e-8 * v0.abs().max(1.0), "{name}: {v0} -> {v1}");
                same_except(&q, &before, &[name]);
                q.check_invariants().unwrap();
                let lo = q.cov_f1.clone().symmetric_eigen().eigenvalues.min()
                    .min(q.cov_f2.clone().symmetric_eigen().eigenvalues.min());
                prop_assert!(lo > 0.0);
            }
        }
    }

    #[test]
    fn w_objective_gradient_matches_differences(seed in 0u64..10_000) {
        let ctx = random_context(20, 3, seed);
        let q = random_q(&ctx, seed);
        let prior = ctx.base_prior(0.2).unwrap();
        let target = q.mean_curve(1, ctx.cfg.kappa());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..19).map(|_| rng.random_range(-0.4..0.4)).collect();
        let (_, grad) = w_objective(&w, 1, &target, &ctx, &prior).unwrap();
        let eps = 1e-6;
        for k in 0..19 {
            let mut up = w.clone();
            up[k] += eps;
            let mut down = w.clone();
            down[k] -= eps;
            let fd = (w_objective(&up, 1, &target, &ctx, &prior).unwrap().0
                - w_objective(&down, 1, &target, &ctx, &prior).unwrap().0) / (2.0 * eps);
            let scale = grad.iter().fold(1.0f64, |m, g| m.max(g.abs()));
            prop_assert!((fd - grad[k]).abs() < 1e-5 * scale, "k {k}: fd {fd} analytic {}", grad[k]);
        }
    }
}

#[test]
fn w_objective_tracks_the_criterion() {
    // The criterion depends on w_i only through the terms the objective keeps.
    let ctx = random_context(10, 3, 4);
    let q = random_q(&ctx, 4);
    let prior = ctx.base_prior(0.5).unwrap();
    let target = q.mean_curve(2, ctx.cfg.kappa());
    let mut moved = q.clone();
    moved.bases[2] = BaseFunction((0..9).map(|k| 0.2 * (k as f64).cos()).collect()).canonical().unwrap();
    moved.registered = ctx.registered_data(&moved.bases).unwrap();
    let d_elbo = elbo(&moved, &ctx, 0.5).unwrap() - elbo(&q, &ctx, 0.5).unwrap();
    let d_obj = w_objective(&moved.bases[2].0, 2, &target, &ctx, &prior).unwrap().0
        - w_objective(&q.bases[2].0, 2, &target, &ctx, &prior).unwrap().0;
    assert_relative_eq!(d_elbo, d_obj, epsilon = 1e-9, max_relative = 1e-9);
}

#[test]
fn maximize_w_never_loses_ground() {
    for seed in 0..5 {
        let ctx = random_context(15, 3, seed);
        let q = random_q(&ctx, seed);
        let prior = ctx.base_prior(0.05).unwrap();
        for i in 0..3 {
            let step = maximize_w(i, &q, &ctx, &prior, &OptimOptions::default()).unwrap();
            assert!(step.value_after >= step.value_before);
            let mut next = q.clone();
            next.bases[i] = step.base.clone();
            next.registered = ctx.registered_data(&next.bases).unwrap();
            assert!(elbo(&next, &ctx, 0.05).unwrap() >= elbo(&q, &ctx, 0.05).unwrap() - 1e-9);
        }
    }
}

#[test]
fn maximize_w_aligns_a_shifted_bump() {
    let p = 41;
    let grid = TimeGrid::new(-3.0, 3.0, p).unwrap();
    let bump = |t: f64| (-(t * t) / 0.5).exp();
    let shifted = DVector::from_iterator(p, grid.points().iter().map(|&t| bump(t - 0.5)));
    let centred = DVector::from_iterator(p, grid.points().iter().map(|&t| bump(t)));
    let values = DMatrix::from_columns(&[shifted.clone(), centred.clone()]);
    let ctx = ModelContext::new(Dataset::new(grid, values).unwrap(), ModelConfig::default()).unwrap();
    let mut q = avb_init(&ctx).unwrap().q;
    q.mu_f1 = centred.clone();
    q.mu_z0 = vec![0.0];
    q.mu_z1 = vec![1.0, 1.0];
    q.mu_z2 = vec![0.0, 0.0];
    let prior = ctx.base_prior(1e-4).unwrap();
    let step = maximize_w(0, &q, &ctx, &prior, &OptimOptions::default()).unwrap();
    assert!(step.improved);
    let h = crate::warp::warp_from_base(&step.base, ctx.grid()).unwrap();
    let aligned = DVector::from_vec(ctx.warp_column(0, &h));
    let before = (&shifted - &centred).norm();
    let after = (&aligned - &centred).norm();
    assert!(after < 0.1 * before, "residual {before} -> {after}");
    // the peak moves from t = 0.5 back to t = 0
    let mid = h.0[p / 2];
    assert!((mid - 0.5).abs() < 0.05, "h(0) = {mid}");
}

// ---- initialisation and the outer loop -------------------------------------

#[test]
fn init_shapes_and_invariants() {
    let sim = simulate_set1(30, 0).unwrap();
    let ctx = ModelContext::new(sim.dataset().clone(), ModelConfig::default()).unwrap();
    let init = avb_init(&ctx).unwrap();
    assert!(!init.f2_fallback);
    let q = &init.q;
    let (a, c) = (ctx.cfg.a, ctx.cfg.c);
    assert_eq!(q.ig_z0.shape, a + 10.0);
    assert_eq!(q.ig_z1.shape, a + 10.5);
    assert_eq!(q.g_eta.shape, c + 2.0);
    assert_eq!(q.g_lambda.shape, c + 28.0);
    q.check_invariants().unwrap();
    assert!(q.bases.iter().all(|w| w.0.iter().all(|v| *v == 0.0)));
    assert!(elbo(q, &ctx, ctx.cfg.gamma_w).unwrap().is_finite());
}

#[test]
fn init_rejects_constant_data() {
    let grid = TimeGrid::new(0.0, 1.0, 6).unwrap();
    let values = DMatrix::from_fn(6, 3, |_, c| c as f64);
    let ctx = ModelContext::new(Dataset::new(grid, values).unwrap(), cfg()).unwrap();
    assert!(matches!(avb_init(&ctx), Err(Error::DegenerateData(_))));
}

#[test]
fn annealer_schedules() {
    let a = Annealer::new(0.01, vec![(100.0, 5), (10.0, 12)], true);
    assert_eq!(a.gamma_w(0), 1.0);
    assert_eq!(a.gamma_w(4), 1.0);
    assert_relative_eq!(a.gamma_w(5), 0.1, max_relative = 1e-15);
    assert_eq!(a.gamma_w(12), 0.01);
    assert!(!a.settled(11) && a.settled(12));

    let fixed = Annealer::new(0.01, Vec::new(), false);
    assert_eq!(fixed.gamma_w(0), 0.01);
    assert!(fixed.settled(0));

    let mut adaptive = Annealer::new(0.01, Vec::new(), true);
    assert_relative_eq!(adaptive.gamma_w(0), 0.1, max_relative = 1e-15);
    let mut trace: Vec<f64> = Vec::new();
    let mut halvings = 0;
    for k in 0..200 {
        trace.push(-100.0);
        let before = adaptive.gamma_w(k);
        adaptive.observe(&trace);
        if adaptive.gamma_w(k) < before {
            halvings += 1;
            trace.clear();
        }
    }
    // 0.1 -> 0.05 -> 0.025 -> 0.0125 -> 0.01
    assert_eq!(halvings, 4);
    assert_eq!(adaptive.gamma_w(0), 0.01);
    assert!(adaptive.settled(0));

    // steady progress holds the penalty
    let mut busy = Annealer::new(0.01, Vec::new(), true);
    let trace: Vec<f64> = (0..40).map(|k| -100.0 + k as f64).collect();
    for k in 1..=40 {
        busy.observe(&trace[..k]);
    }
    assert_relative_eq!(busy.gamma_w(40), 0.1, max_relative = 1e-15);
}

fn scaled_dataset(scalings: &[f64], p: usize) -> Dataset {
    let grid = TimeGrid::new(-3.0, 3.0, p).unwrap();
    let f = |t: f64| (-(t - 0.5).powi(2)).exp() - 0.6 * (-(t + 1.2).powi(2) / 0.5).exp();
    let values = DMatrix::from_fn(p, scalings.len(), |j, i| scalings[i] * f(grid.points()[j]));
    Dataset::new(grid, values).unwrap()
}

#[test]
fn recovers_scalings_without_warping() {
    let scalings = [0.8, 0.9, 1.0, 1.1, 1.2];
    let cfg = ModelConfig { gamma_w: 1e4, adaptive_anneal: false, ..ModelConfig::default() };
    let ctx = ModelContext::new(scaled_dataset(&scalings, 30), cfg).unwrap();
    let fit = run_avb(&ctx, &AvbOptions { max_iters: 100, ..AvbOptions::default() }).unwrap();
    let grid = ctx.grid();
    for h in &fit.warps {
        for (a, b) in h.0.iter().zip(grid.points()) {
            assert!((a - b).abs() < 0.02, "warp strays: {a} vs {b}");
        }
    }
    for (m, s) in fit.q.mu_z1.iter().zip(scalings) {
        assert!((m - s).abs() < 0.05, "scaling {m} vs {s}");
    }
}

#[test]
fn permuting_functions_permutes_outputs() {
    let sim = simulate_set1(25, 7).unwrap();
    let data = sim.dataset().select(&[0, 3, 6, 9, 12, 15]);
    let perm = [3, 0, 4, 1, 2, 5];
    let cfg = ModelConfig { gamma_w: 1e-3, adaptive_anneal: false, ..ModelConfig::default() };
    let opts = AvbOptions { max_iters: 15, ..AvbOptions::default() };
    let a = run_avb(&ModelContext::new(data.clone(), cfg.clone()).unwrap(), &opts).unwrap();
    let b = run_avb(&ModelContext::new(data.select(&perm), cfg).unwrap(), &opts).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_relative_eq!(a.q.mu_z1[i], b.q.mu_z1[k], epsilon = 1e-6);
        assert_relative_eq!(a.q.mu_z2[i], b.q.mu_z2[k], epsilon = 1e-6);
        for (x, y) in a.warps[i].0.iter().zip(&b.warps[k].0) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    assert!((&a.f1 - &b.f1).amax() < 1e-6);
    assert_relative_eq!(a.criterion(), b.criterion(), max_relative = 1e-9);
}

#[test]
fn fixed_penalty_trace_is_monotone_and_deterministic() {
    let sim = simulate_set1(20, 2).unwrap();
    let data = sim.dataset().select(&[1, 5, 9, 13]);
    let cfg = ModelConfig { gamma_w: 1e-3, adaptive_anneal: false, ..ModelConfig::default() };
    let ctx = ModelContext::new(data, cfg).unwrap();
    let opts = AvbOptions { max_iters: 40, ..AvbOptions::default() };
    let fit = run_avb(&ctx, &opts).unwrap();
    let trace = &fit.q.criterion_trace;
    for w in trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }
    let serial = run_avb(&ctx, &AvbOptions { parallel: false, ..opts }).unwrap();
    assert_eq!(serial.q.criterion_trace, fit.q.criterion_trace);
    let mean: Vec<f64> = (0..20)
        .map(|j| fit.warps.iter().map(|h| h.0[j]).sum::<f64>() / fit.warps.len() as f64)
        .collect();
    for (m, t) in mean.iter().zip(ctx.grid().points()) {
        assert!((m - t).abs() < 1e-6);
    }
}
