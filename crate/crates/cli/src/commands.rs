use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use warpfactor_core::analysis::{
    factor_recovery_score, group_by_weights, sls, sls_grouped, GroupAssignment, GroupMode, GroupRule,
};
use warpfactor_core::avb::{run_avb, AvbFit, AvbOptions, IterationDiagnostics};
use warpfactor_core::io::{fmt_f64, load_functions_csv, load_group_labels, save_dataset_csv, save_functions_csv, save_groups_csv, write_json, write_rows, Metrics};
use warpfactor_core::mcmc::{run_chain, ChainInit, ChainOptions, ChainSamples};
use warpfactor_core::simgen::{simulate_set1, simulate_set2, FactorSpec, SimDataset};
use warpfactor_core::warp::warp_from_base;
use warpfactor_core::{Dataset, Error, LatentState, ModelConfig, ModelContext, Warp};

use crate::manifest::RunManifest;
use crate::{Engine, EvaluateArgs, GroupModeArg, RegisterArgs, SimulateArgs};

type CmdResult = Result<(), String>;

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Runs `body` and writes the manifest whatever the outcome.
fn orchestrate(mut manifest: RunManifest, out_dir: &Path, body: impl FnOnce(&mut RunManifest) -> CmdResult) -> CmdResult {
    let outcome = std::fs::create_dir_all(out_dir).map_err(fail).and_then(|_| body(&mut manifest));
    manifest.finish(out_dir, &outcome);
    outcome
}

/// Point estimates and optional posterior spreads of one fit.
struct Summary {
    warps: Vec<Warp>,
    registered: DMatrix<f64>,
    f1: DVector<f64>,
    f2: DVector<f64>,
    z0: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
    sds: Option<[Vec<f64>; 3]>,
}

fn summarize_avb(fit: &AvbFit) -> Summary {
    let n = fit.q.n_functions();
    Summary {
        warps: fit.warps.clone(),
        registered: fit.registered.clone(),
        f1: fit.f1.clone(),
        f2: fit.f2.clone(),
        z0: (0..n).map(|i| fit.q.z0_moments(i).0).collect(),
        z1: fit.q.mu_z1.clone(),
        z2: fit.q.mu_z2.clone(),
        sds: None,
    }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let k = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / k;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Posterior means over the kept draws; the registered curves use the
/// pointwise mean warp, which is again monotone and endpoint preserving.
fn summarize_chain(ctx: &ModelContext, kept: &[&LatentState]) -> Result<Summary, Error> {
    let (p, n) = (ctx.p(), ctx.n());
    let k = kept.len() as f64;
    let mut warps = vec![vec![0.0; p]; n];
    for s in kept {
        for (i, b) in s.bases.iter().enumerate() {
            let h = warp_from_base(b, ctx.grid())?;
            for (acc, v) in warps[i].iter_mut().zip(&h.0) {
                *acc += v / k;
            }
        }
    }
    let warps: Vec<Warp> = warps
        .into_iter()
        .map(|mut h| {
            h[0] = ctx.grid().start();
            h[p - 1] = ctx.grid().end();
            Warp(h)
        })
        .collect();
    let mut registered = DMatrix::zeros(p, n);
    for (i, h) in warps.iter().enumerate() {
        registered.column_mut(i).copy_from_slice(&ctx.warp_column(i, h));
    }
    let f1 = kept.iter().fold(DVector::zeros(p), |a, s| a + &s.f1) / k;
    let f2 = kept.iter().fold(DVector::zeros(p), |a, s| a + &s.f2) / k;
    let per = |get: &dyn Fn(&LatentState, usize) -> f64| -> (Vec<f64>, Vec<f64>) {
        (0..n).map(|i| mean_sd(kept.iter().map(|s| get(s, i)))).unzip()
    };
    let (z0, z0_sd) = per(&|s, i| s.z0(i));
    let (z1, z1_sd) = per(&|s, i| s.z1[i]);
    let (z2, z2_sd) = per(&|s, i| s.z2[i]);
    Ok(Summary { warps, registered, f1, f2, z0, z1, z2, sds: Some([z0_sd, z1_sd, z2_sd]) })
}

#[derive(Serialize)]
struct ChainDiagnostics<'a> {
    iterations: usize,
    kept_draws: usize,
    burn_in: usize,
    acceptance_rates: &'a [f64],
    final_steps: &'a [f64],
    smoothing_acceptance: Option<f64>,
    log_joint: &'a [f64],
}

#[derive(Serialize, Default)]
struct Diagnostics<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    avb_iterations: Option<&'a [IterationDiagnostics]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    avb_converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    f2_fallback: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mcmc: Option<ChainDiagnostics<'a>>,
}

fn write_draws(path: &Path, chain: &ChainSamples, n: usize) -> Result<(), Error> {
    let mut header: Vec<String> =
        ["iteration", "log_joint", "var_z0", "var_z1", "var_z2", "eta_f", "lambda_f"].map(String::from).to_vec();
    for name in ["z0", "z1", "z2"] {
        header.extend((1..=n).map(|i| format!("{name}_{i}")));
    }
    let rows = chain.draws.iter().zip(&chain.iterations).map(|(s, &it)| {
        let mut row = vec![it as f64, chain.log_joint[it - 1], s.var_z0, s.var_z1, s.var_z2, s.eta_f, s.lambda_f];
        row.extend(s.z0_full());
        row.extend(&s.z1);
        row.extend(&s.z2);
        row
    });
    write_rows(path, &header, rows)
}

fn group_mode(args: &RegisterArgs) -> GroupMode {
    match args.group_mode {
        GroupModeArg::Quadrant => GroupMode::QuadrantCenteredBoth,
        GroupModeArg::QuadrantZ1 => GroupMode::QuadrantCenteredZ1Only,
        GroupModeArg::Z2Threshold => GroupMode::Z2Threshold { lo: args.z2_lo, hi: args.z2_hi },
    }
}

pub fn register(args: &RegisterArgs) -> CmdResult {
    let mut manifest = RunManifest::start("register");
    manifest.seed = Some(args.seed);
    manifest.engine = Some(args.engine.name().to_string());
    orchestrate(manifest, &args.out_dir, |m| {
        m.hash_input("input", &args.input).map_err(|e| format!("{}: {e}", args.input.display()))?;
        let cfg = match &args.config {
            Some(path) => {
                m.hash_input("config", path).map_err(|e| format!("{}: {e}", path.display()))?;
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                ModelConfig::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => ModelConfig::default(),
        };
        m.config = serde_json::to_value(&cfg).map_err(fail)?;
        let data = load_functions_csv(&args.input).map_err(fail)?;
        let names = data.names.clone();
        let ctx = ModelContext::new(data, cfg).map_err(fail)?;
        let out = &args.out_dir;

        let avb_opts = AvbOptions { max_iters: args.avb_iters, ..AvbOptions::default() };
        let fit = match args.engine {
            Engine::Avb | Engine::AvbMcmc => Some(run_avb(&ctx, &avb_opts).map_err(fail)?),
            Engine::Mcmc => None,
        };
        let chain = match args.engine {
            Engine::Avb => None,
            _ => {
                let init = match &fit {
                    Some(f) => ChainInit::Variational(Box::new(f.q.clone())),
                    None => ChainInit::Prior,
                };
                let opts = ChainOptions { n_iter: args.iters, thin: args.thin, seed: args.seed, ..ChainOptions::default() };
                Some(run_chain(&ctx, init, &opts).map_err(fail)?)
            }
        };
        // a chain started from the variational fit needs no burn-in; one
        // started from the prior drops its first half
        let burn = match (&chain, &fit) {
            (Some(c), None) => c.iterations.last().copied().unwrap_or(0) / 2,
            _ => 0,
        };
        let summary = match &chain {
            Some(c) => {
                let kept: Vec<&LatentState> = c.after(burn).collect();
                if kept.is_empty() {
                    return Err("no MCMC draws kept after burn-in; raise --iters or lower --thin".into());
                }
                summarize_chain(&ctx, &kept).map_err(fail)?
            }
            None => summarize_avb(fit.as_ref().expect("AVB ran")),
        };

        let grid = ctx.grid();
        save_functions_csv(&out.join("registered.csv"), grid, &summary.registered, &names).map_err(fail)?;
        let warp_matrix = DMatrix::from_fn(ctx.p(), ctx.n(), |j, i| summary.warps[i].0[j]);
        save_functions_csv(&out.join("warps.csv"), grid, &warp_matrix, &names).map_err(fail)?;
        let mut factors = DMatrix::zeros(ctx.p(), 2);
        factors.column_mut(0).copy_from(&summary.f1);
        factors.column_mut(1).copy_from(&summary.f2);
        save_functions_csv(&out.join("factors.csv"), grid, &factors, &["f1".into(), "f2".into()]).map_err(fail)?;
        write_weights(&out.join("weights.csv"), &names, &summary).map_err(fail)?;
        let groups = group_by_weights(&summary.z1, &summary.z2, group_mode(args)).map_err(fail)?;
        save_groups_csv(&out.join("groups.csv"), &names, &groups, &summary.z1, &summary.z2).map_err(fail)?;

        let original = &ctx.data.values;
        let metrics = Metrics {
            sls: sls(original, &summary.registered, grid).map_err(fail)?,
            sls_grouped: grouped_or_warn(original, &summary.registered, &groups, &ctx),
            canonical_correlations: None,
            criterion_trace: fit.as_ref().map(|f| f.q.criterion_trace.clone()).unwrap_or_default(),
        };
        write_json(&out.join("metrics.json"), &metrics).map_err(fail)?;

        let mut diag = Diagnostics::default();
        if let Some(f) = &fit {
            diag.avb_iterations = Some(&f.diagnostics);
            diag.avb_converged = Some(f.converged);
            diag.f2_fallback = Some(f.f2_fallback);
        }
        if let Some(c) = &chain {
            write_draws(&out.join("draws.csv"), c, ctx.n()).map_err(fail)?;
            diag.mcmc = Some(ChainDiagnostics {
                iterations: c.log_joint.len(),
                kept_draws: c.after(burn).count(),
                burn_in: burn,
                acceptance_rates: &c.acceptance_rates,
                final_steps: &c.final_steps,
                smoothing_acceptance: c.smoothing_acceptance,
                log_joint: &c.log_joint,
            });
        }
        write_json(&out.join("diagnostics.json"), &diag).map_err(fail)?;
        println!("sls {:.6}", metrics.sls);
        Ok(())
    })
}

fn grouped_or_warn(original: &DMatrix<f64>, registered: &DMatrix<f64>, groups: &GroupAssignment, ctx: &ModelContext) -> Option<f64> {
    match sls_grouped(original, registered, groups, ctx.grid()) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("grouped sls not available: {e}");
            None
        }
    }
}

/// `function_id,z0,z1,z2`, plus `z0_sd,z1_sd,z2_sd` for MCMC fits.
fn write_weights(path: &Path, names: &[String], s: &Summary) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let sd_header = if s.sds.is_some() { ",z0_sd,z1_sd,z2_sd" } else { "" };
    writeln!(out, "function_id,z0,z1,z2{sd_header}")?;
    for (i, name) in names.iter().enumerate() {
        let mut values = vec![s.z0[i], s.z1[i], s.z2[i]];
        if let Some(sd) = &s.sds {
            values.extend([sd[0][i], sd[1][i], sd[2][i]]);
        }
        let fields: Vec<String> = values.into_iter().map(fmt_f64).collect();
        writeln!(out, "{name},{}", fields.join(","))?;
    }
    out.flush()
}

pub fn simulate(args: &SimulateArgs) -> CmdResult {
    let mut manifest = RunManifest::start("simulate");
    manifest.seed = Some(args.seed);
    orchestrate(manifest, &args.out_dir, |m| {
        m.config = serde_json::json!({ "set": args.set, "p": args.p, "n": args.n });
        let sim: SimDataset = match args.set {
            1 => simulate_set1(args.p, args.seed),
            2 => simulate_set2(args.p, args.n, args.seed, &FactorSpec::default()),
            other => return Err(format!("unknown simulation set {other}; expected 1 or 2")),
        }
        .map_err(fail)?;
        let data = sim.dataset();
        let csv_path = args.out_dir.join("dataset.csv");
        save_dataset_csv(&csv_path, data).map_err(fail)?;
        std::fs::write(args.out_dir.join("truth.json"), sim.truth_json().map_err(fail)? + "\n").map_err(fail)?;
        println!("wrote {} functions on {} points to {}", data.n_functions(), data.n_points(), csv_path.display());
        Ok(())
    })
}

pub fn evaluate(args: &EvaluateArgs) -> CmdResult {
    let manifest = RunManifest::start("evaluate");
    orchestrate(manifest, &args.out_dir, |m| {
        m.hash_input("original", &args.original).map_err(|e| format!("{}: {e}", args.original.display()))?;
        m.hash_input("registered", &args.registered).map_err(|e| format!("{}: {e}", args.registered.display()))?;
        let original = load_functions_csv(&args.original).map_err(fail)?;
        let registered = load_functions_csv(&args.registered).map_err(fail)?;
        check_same_grid(&original, &registered)?;
        let grid = &original.grid;
        let mut metrics = Metrics { sls: sls(&original.values, &registered.values, grid).map_err(fail)?, ..Metrics::default() };

        if let Some(path) = &args.groups {
            m.hash_input("groups", path).map_err(|e| format!("{}: {e}", path.display()))?;
            let labels = load_group_labels(path).map_err(fail)?;
            // only the labels matter for scoring
            let groups = GroupAssignment {
                labels,
                rule: GroupRule {
                    mode: GroupMode::QuadrantCenteredBoth,
                    z1_centered: false,
                    z2_centered: false,
                    z1_offset: 0.0,
                    z2_offset: 0.0,
                },
            };
            metrics.sls_grouped = Some(sls_grouped(&original.values, &registered.values, &groups, grid).map_err(fail)?);
        }

        if let Some(path) = &args.truth {
            m.hash_input("truth", path).map_err(|e| format!("{}: {e}", path.display()))?;
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let sim = SimDataset::from_truth_json(&text, original.clone()).map_err(fail)?;
            let factors_path = match &args.factors {
                Some(p) => p.clone(),
                None => args.registered.with_file_name("factors.csv"),
            };
            m.hash_input("factors", &factors_path).map_err(|e| format!("{}: {e}", factors_path.display()))?;
            let factors = load_functions_csv(&factors_path).map_err(fail)?;
            if factors.n_points() != original.n_points() || factors.n_functions() != 2 {
                return Err(format!("{}: expected two factor columns on the original grid", factors_path.display()));
            }
            let score = factor_recovery_score(&factors.column(0), &factors.column(1), &sim.true_factors).map_err(fail)?;
            metrics.canonical_correlations = Some(score.correlations);
        }

        write_json(&args.out_dir.join("metrics.json"), &metrics).map_err(fail)?;
        println!("{}", serde_json::to_string_pretty(&metrics).map_err(fail)?);
        Ok(())
    })
}

fn check_same_grid(a: &Dataset, b: &Dataset) -> CmdResult {
    if a.values.shape() != b.values.shape() {
        return Err(format!(
            "shape mismatch: original is {}x{}, registered is {}x{}",
            a.n_points(),
            a.n_functions(),
            b.n_points(),
            b.n_functions()
        ));
    }
    let same = a.grid.points().iter().zip(b.grid.points()).all(|(x, y)| (x - y).abs() <= 1e-9 * x.abs().max(1.0));
    if !same {
        return Err("original and registered files use different time grids".into());
    }
    Ok(())
}
