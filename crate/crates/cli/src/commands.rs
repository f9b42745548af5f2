//! Command implementations. Each command writes its resolved configuration
//! next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use gmcr::baselines::{mcr_als_fit, nmf_fit, nnls_concentrations, zero_leakage, FactorPair, Method};
use gmcr::decontam::{
    clean, fit_clean_process, pollution_channels_report, supports_disjoint, write_channel_report, Manifest, RunLabel,
    WindowPlan, WindowSolver,
};
use gmcr::io::{read_json, read_matrix_csv, write_atomic, write_json_atomic, write_matrix_csv};
use gmcr::metrics::{aggregate_replicates, r_squared, realized_snr_db, summarize, CurvePoint, EvalReport};
use gmcr::optimizer::{evaluate_model, train, TrainOutcome};
use gmcr::synth::{generate, read_bundle, write_bundle, Bundle, SynthConfig};
use gmcr::{GmcrError, HyperParams, Matrix, ModelConfig, Result, Rng, SolverCheckpoint};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{output_dir, BenchConfig, CleanConfig, FileConfig, RunConfig};
use crate::{
    contamination_config, BenchArgs, CleanArgs, Cli, Command, EvalArgs, FitArgs, ReportArgs, SynthArgs, TrainFlags,
};

pub const FIXTURE_FILE: &str = "fixture.json";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const FACTORS_FILE: &str = "factors.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_FILE: &str = "eval.json";

/// Runs the parsed command. Returns the rendered report for `report`.
pub fn dispatch(cli: Cli) -> Result<Option<String>> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let out = |name: &str| output_dir(cli.out.as_deref(), name);
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &file, seed, out("synth")),
        Command::Fit(a) => cmd_fit(a, &file, seed, out("fit")),
        Command::Eval(a) => cmd_eval(a, seed, out("eval")),
        Command::Bench(a) => cmd_bench(a, &file, seed, out("bench")),
        Command::Clean(a) => cmd_clean(a, &file, seed, out("clean")),
        Command::Report(a) => return cmd_report(a).map(Some),
    }
    .map(|_| None)
}

/// Pollution bookkeeping stored beside a contamination fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureInfo {
    pub clean_mz: Vec<u32>,
    pub pollution_mz: Vec<u32>,
    pub supports_disjoint: bool,
}

pub fn cmd_synth(args: &SynthArgs, file: &FileConfig, seed: u64, out: PathBuf) -> Result<()> {
    let mut run = RunConfig::new("synth", seed, out.clone());
    if args.contamination {
        let cfg = contamination_config(file.contamination, &args.synth, seed);
        let fixture = cfg.generate()?;
        fixture.write(&out)?;
        write_matrix_csv(&out.join("S_clean.csv"), &fixture.s_clean, None)?;
        write_matrix_csv(&out.join("S_pollution.csv"), &fixture.s_pollution, None)?;
        let info = FixtureInfo {
            clean_mz: fixture.clean_mz.clone(),
            pollution_mz: fixture.pollution_mz.clone(),
            supports_disjoint: supports_disjoint(&fixture.s_clean, &fixture.s_pollution),
        };
        write_json_atomic(&out.join(FIXTURE_FILE), &info)?;
        info!(
            "wrote {} clean and {} polluted runs to {}",
            fixture.clean_runs.len(),
            fixture.polluted_runs.len(),
            out.display()
        );
        run.contamination = Some(cfg);
    } else {
        let mut cfg = file.synth.unwrap_or_default();
        args.synth.apply(&mut cfg);
        cfg.seed = seed;
        let truth = generate(&cfg)?;
        write_bundle(&out, &cfg, &truth)?;
        info!(
            "wrote {} mixtures of dimension {} to {}",
            cfg.n_samples(),
            cfg.d,
            out.display()
        );
        run.synth = Some(cfg);
    }
    run.write()
}

/// Mixtures from a bundle directory or a CSV file.
pub fn load_data(path: &Path, header: bool) -> Result<(Matrix, Option<Bundle>)> {
    if path.is_dir() {
        let b = read_bundle(path)?;
        Ok((b.mixtures.clone(), Some(b)))
    } else {
        Ok((read_matrix_csv(path, header)?.1, None))
    }
}

fn resolve_train(file: &FileConfig, flags: &TrainFlags, d: usize, seed: u64) -> (ModelConfig, HyperParams) {
    let mut model = file.model.unwrap_or_default();
    let mut hp = file.hyper.unwrap_or_else(|| HyperParams::for_dim(d));
    flags.apply(&mut model, &mut hp);
    hp.seed = seed;
    (model, hp)
}

#[derive(Debug, Clone, Serialize)]
struct TraceRow {
    iteration: usize,
    temperature: f64,
    recon: f64,
    usage: f64,
    dyn_energy: f64,
    static_energy: f64,
    ambiguity: f64,
    total: f64,
}

pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let enc = |e: csv::Error| GmcrError::argument(format!("csv encoding: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(enc)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| GmcrError::argument(format!("csv encoding: {e}")))?;
    write_atomic(path, &bytes)
}

/// Summary of a fit, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub method: Method,
    pub best_iteration: Option<usize>,
    pub r2: Option<f64>,
    pub ec: usize,
    pub diverged: bool,
}

/// A fitted classical baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: Method,
    pub rank: usize,
    pub factors: FactorPair,
}

pub fn write_training(out: &Path, outcome: &TrainOutcome) -> Result<FitSummary> {
    for c in &outcome.checkpoints {
        c.save(&out.join("checkpoints").join(format!("iter_{:06}.json", c.iteration)))?;
    }
    let best = outcome.best_checkpoint();
    if let Some(b) = best {
        b.save(&out.join(BEST_CHECKPOINT))?;
    }
    let trace: Vec<TraceRow> = outcome
        .trace
        .iter()
        .map(|t| TraceRow {
            iteration: t.iteration,
            temperature: t.temperature,
            recon: t.loss.recon,
            usage: t.loss.usage,
            dyn_energy: t.loss.dyn_energy,
            static_energy: t.loss.static_energy,
            ambiguity: t.loss.ambiguity,
            total: t.loss.total,
        })
        .collect();
    write_csv_rows(&out.join("trace.csv"), &trace)?;
    let curve: Vec<CurvePoint> = outcome
        .checkpoints
        .iter()
        .map(|c| CurvePoint {
            iteration: c.iteration,
            ec: c.ec,
            r2: c.r2,
        })
        .collect();
    write_csv_rows(&out.join("curve.csv"), &curve)?;
    let summary = FitSummary {
        method: Method::Sparse,
        best_iteration: best.map(|b| b.iteration),
        r2: best.and_then(|b| b.r2),
        ec: best.map_or(0, |b| b.ec),
        diverged: outcome.diverged,
    };
    write_json_atomic(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn baseline_rng(seed: u64, method: Method) -> Rng {
    let label = match method {
        Method::Sparse => 0,
        Method::Nmf => 1,
        Method::McrAls => 2,
    };
    Rng::new(seed, 0).substream(100 + label)
}

pub fn fit_baseline(method: Method, x: &Matrix, rank: usize, iters: usize, seed: u64) -> Result<FactorPair> {
    let mut rng = baseline_rng(seed, method);
    match method {
        Method::Nmf => nmf_fit(x, rank, iters, &mut rng),
        Method::McrAls => mcr_als_fit(x, rank, iters, &mut rng),
        Method::Sparse => Err(GmcrError::argument("not a classical baseline")),
    }
}

pub fn cmd_fit(args: &FitArgs, file: &FileConfig, seed: u64, out: PathBuf) -> Result<()> {
    let (x, bundle) = load_data(&args.data, args.header)?;
    let (model, hp) = resolve_train(file, &args.train, x.ncols(), seed);
    let mut run = RunConfig::new("fit", seed, out.clone());
    run.inputs.push(args.data.clone());
    run.method = Some(args.method);
    match args.method {
        Method::Sparse => {
            info!(
                "training K={} on {} x {} for {} iterations",
                model.budget,
                x.nrows(),
                x.ncols(),
                hp.max_iters
            );
            let outcome = train(&x, &model, &hp)?;
            let s = write_training(&out, &outcome)?;
            info!("best iteration {:?}: R2 {:?}, EC {}", s.best_iteration, s.r2, s.ec);
            run.model = Some(model);
            run.hyper = Some(hp);
        }
        m => {
            let rank = args
                .rank
                .or(bundle.as_ref().and_then(|b| b.config.map(|c| c.n_true)))
                .ok_or_else(|| GmcrError::argument("--rank is required without a bundle config"))?;
            let bench = file.bench.clone().unwrap_or_default();
            let iters = args.train.iters.unwrap_or(bench.baseline_iters);
            let factors = fit_baseline(m, &x, rank, iters, seed)?;
            write_matrix_csv(&out.join("S_hat.csv"), &factors.s_hat, None)?;
            write_matrix_csv(&out.join("C_hat.csv"), &factors.c_hat, None)?;
            let r2 = r_squared(&x, &factors.reconstruct()).ok();
            let trace: Vec<(usize, f64)> = factors.trace.iter().enumerate().map(|(i, l)| (i + 1, *l)).collect();
            write_csv_rows(&out.join("trace.csv"), &trace)?;
            write_json_atomic(
                &out.join(SUMMARY_FILE),
                &FitSummary {
                    method: m,
                    best_iteration: Some(iters),
                    r2,
                    ec: rank,
                    diverged: false,
                },
            )?;
            write_json_atomic(
                &out.join(FACTORS_FILE),
                &BaselineResult {
                    method: m,
                    rank,
                    factors,
                },
            )?;
            info!("{} rank {rank}: R2 {r2:?}", m.tag());
            run.bench = Some(BenchConfig {
                methods: vec![m],
                replicates: 1,
                baseline_iters: iters,
            });
        }
    }
    run.write()
}

enum Fitted {
    Solver(Box<SolverCheckpoint>),
    Baseline(BaselineResult),
}

fn load_fitted(path: &Path) -> Result<Fitted> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("format_version").is_some() {
        Ok(Fitted::Solver(Box::new(SolverCheckpoint::load(path)?)))
    } else {
        serde_json::from_value(value)
            .map(Fitted::Baseline)
            .map_err(|e| GmcrError::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: e.to_string(),
            })
    }
}

pub fn evaluate(fitted_path: &Path, x: &Matrix, bundle: Option<&Bundle>) -> Result<EvalReport> {
    let (r2, ec, comps) = match load_fitted(fitted_path)? {
        Fitted::Solver(ckpt) => {
            let (r2, ec) = evaluate_model(&ckpt.model, x, ckpt.hyper.tau_use)?;
            let pruned = ckpt.pruned_model(x)?;
            (r2, ec, pruned.dictionary.effective_components())
        }
        Fitted::Baseline(b) => {
            let c = nnls_concentrations(x, &b.factors.s_hat)?;
            let r2 = r_squared(x, &c.dot(&b.factors.s_hat)).ok();
            (r2, b.rank, b.factors.s_hat)
        }
    };
    let s_true = bundle.and_then(|b| b.s_true.as_ref());
    let zero_leakage = match s_true {
        Some(s) if comps.nrows() > 0 => Some(zero_leakage(&comps, s)?),
        _ => None,
    };
    let snr_realized_db = match bundle.and_then(|b| b.clean.as_ref()) {
        Some(clean) => Some(realized_snr_db(clean, &(x - clean))?),
        None => None,
    };
    Ok(EvalReport {
        r2,
        ec,
        ec_true: s_true.map(|s| s.nrows()),
        zero_leakage,
        snr_realized_db,
    })
}

pub fn cmd_eval(args: &EvalArgs, seed: u64, out: PathBuf) -> Result<()> {
    let (x, bundle) = load_data(&args.data, args.header)?;
    let report = evaluate(&args.checkpoint, &x, bundle.as_ref())?;
    write_json_atomic(&out.join(EVAL_FILE), &report)?;
    info!(
        "R2 {:?}, EC {}, zero leakage {:?}",
        report.r2, report.ec, report.zero_leakage
    );
    let mut run = RunConfig::new("eval", seed, out);
    run.inputs = vec![args.checkpoint.clone(), args.data.clone()];
    run.write()
}

/// One method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub replicate: usize,
    pub seed: u64,
    pub ec: usize,
    pub r2: Option<f64>,
    pub zero_leakage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummaryRow {
    pub method: Method,
    pub n: usize,
    pub ec_mean: f64,
    pub ec_sd: f64,
    pub r2_mean: f64,
    pub r2_sd: f64,
    pub leakage_mean: f64,
    pub leakage_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCurveRow {
    pub iteration: usize,
    pub n: usize,
    pub ec_mean: f64,
    pub ec_sd: f64,
    pub r2_mean: f64,
    pub r2_sd: f64,
}

fn bench_job(
    method: Method,
    replicate: usize,
    seed: u64,
    synth: &SynthConfig,
    model: &ModelConfig,
    hp: &HyperParams,
    baseline_iters: usize,
) -> Result<(BenchRow, Vec<CurvePoint>)> {
    let truth = generate(&SynthConfig { seed, ..*synth })?;
    let x = &truth.x_noisy;
    let (ec, r2, comps, curve) = match method {
        Method::Sparse => {
            let outcome = train(x, model, &HyperParams { seed, ..*hp })?;
            let best = outcome
                .best_checkpoint()
                .ok_or_else(|| GmcrError::numeric("training produced no checkpoint"))?;
            let curve = outcome
                .checkpoints
                .iter()
                .map(|c| CurvePoint {
                    iteration: c.iteration,
                    ec: c.ec,
                    r2: c.r2,
                })
                .collect();
            let pruned = best.pruned_model(x)?;
            (best.ec, best.r2, pruned.dictionary.effective_components(), curve)
        }
        m => {
            let f = fit_baseline(m, x, synth.n_true, baseline_iters, seed)?;
            let r2 = r_squared(x, &f.reconstruct()).ok();
            (synth.n_true, r2, f.s_hat, Vec::new())
        }
    };
    let leak = if comps.nrows() > 0 {
        Some(zero_leakage(&comps, &truth.s_true)?)
    } else {
        None
    };
    Ok((
        BenchRow {
            method,
            replicate,
            seed,
            ec,
            r2,
            zero_leakage: leak,
        },
        curve,
    ))
}

pub fn summarize_bench(rows: &[BenchRow], methods: &[Method]) -> Vec<BenchSummaryRow> {
    methods
        .iter()
        .map(|&m| {
            let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.method == m).collect();
            let ec = summarize(&mine.iter().map(|r| r.ec as f64).collect::<Vec<_>>());
            let r2 = summarize(&mine.iter().filter_map(|r| r.r2).collect::<Vec<_>>());
            let leak = summarize(&mine.iter().filter_map(|r| r.zero_leakage).collect::<Vec<_>>());
            BenchSummaryRow {
                method: m,
                n: mine.len(),
                ec_mean: ec.mean,
                ec_sd: ec.sd,
                r2_mean: r2.mean,
                r2_sd: r2.sd,
                leakage_mean: leak.mean,
                leakage_sd: leak.sd,
            }
        })
        .collect()
}

pub fn cmd_bench(args: &BenchArgs, file: &FileConfig, seed: u64, out: PathBuf) -> Result<()> {
    let mut synth = file.synth.unwrap_or_default();
    args.synth.apply(&mut synth);
    synth.validate()?;
    let mut bench = file.bench.clone().unwrap_or_default();
    if let Some(m) = &args.methods {
        bench.methods = m.clone();
    }
    if let Some(r) = args.replicates {
        bench.replicates = r;
    }
    if let Some(i) = args.baseline_iters {
        bench.baseline_iters = i;
    }
    if bench.replicates == 0 || bench.methods.is_empty() {
        return Err(GmcrError::argument("bench needs at least one method and replicate"));
    }
    let (model, hp) = resolve_train(file, &args.train, synth.d, seed);
    let jobs: Vec<(usize, Method)> = (0..bench.replicates)
        .flat_map(|r| bench.methods.iter().map(move |&m| (r, m)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(r, m)| {
            let s = seed.wrapping_add(r as u64);
            bench_job(m, r, s, &synth, &model, &hp, bench.baseline_iters)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<BenchRow> = results.iter().map(|(row, _)| row.clone()).collect();
    write_csv_rows(&out.join("bench_runs.csv"), &rows)?;
    let summary = summarize_bench(&rows, &bench.methods);
    write_csv_rows(&out.join("bench_summary.csv"), &summary)?;

    let curves: Vec<&Vec<CurvePoint>> = results.iter().map(|(_, c)| c).filter(|c| !c.is_empty()).collect();
    let mut iterations: Vec<usize> = curves.iter().flat_map(|c| c.iter().map(|p| p.iteration)).collect();
    iterations.sort_unstable();
    iterations.dedup();
    let curve_rows: Vec<BenchCurveRow> = iterations
        .into_iter()
        .map(|it| {
            let pts: Vec<CurvePoint> = curves
                .iter()
                .filter_map(|c| c.iter().find(|p| p.iteration == it).copied())
                .collect();
            let agg = aggregate_replicates(&pts);
            BenchCurveRow {
                iteration: it,
                n: pts.len(),
                ec_mean: agg.ec.mean,
                ec_sd: agg.ec.sd,
                r2_mean: agg.r2.mean,
                r2_sd: agg.r2.sd,
            }
        })
        .collect();
    if !curve_rows.is_empty() {
        write_csv_rows(&out.join("bench_curve.csv"), &curve_rows)?;
    }
    for s in &summary {
        info!(
            "{}: EC {:.2} ± {:.2}, R2 {:.5} ± {:.5}, leakage {:.3e}",
            s.method.tag(),
            s.ec_mean,
            s.ec_sd,
            s.r2_mean,
            s.r2_sd,
            s.leakage_mean
        );
    }
    let mut run = RunConfig::new("bench", seed, out);
    run.synth = Some(synth);
    run.model = Some(model);
    run.hyper = Some(hp);
    run.bench = Some(bench);
    run.write()
}

fn run_stem(path: &Path, index: usize) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("run_{index:03}"))
}

pub fn cmd_clean(args: &CleanArgs, file: &FileConfig, seed: u64, out: PathBuf) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let runs = manifest.read_runs(base)?;
    let clean_runs: Vec<_> = runs.iter().filter(|r| r.label == RunLabel::Clean).cloned().collect();
    if clean_runs.is_empty() {
        return Err(GmcrError::argument("manifest lists no clean runs"));
    }
    let mut cfg: CleanConfig = file.clean.clone().unwrap_or_default();
    if let Some(w) = args.window_seconds {
        cfg.window_seconds = w;
    }
    if let Some(c) = &args.channels {
        cfg.channels = c.clone();
    }
    let fixture_path = base.join(FIXTURE_FILE);
    if cfg.channels.is_empty() && fixture_path.exists() {
        let info: FixtureInfo = read_json(&fixture_path)?;
        cfg.channels = info.pollution_mz;
    }
    let plan = WindowPlan::for_runs(&runs, cfg.window_seconds)?;
    let (model, hp) = resolve_train(file, &args.train, clean_runs[0].mz.len(), seed);
    info!(
        "training {} window solvers on {} clean runs",
        plan.windows.len(),
        clean_runs.len()
    );
    let solvers = fit_clean_process(&clean_runs, &plan, &model, &hp)?;
    write_solvers(&out, &plan, &solvers)?;
    for (i, (entry, run)) in manifest.runs.iter().zip(&runs).enumerate() {
        if run.label == RunLabel::Clean {
            continue;
        }
        let stem = run_stem(&entry.path, i);
        let result = clean(run, &plan, &solvers)?;
        let dir = out.join(&stem);
        result.write(&dir)?;
        if !cfg.channels.is_empty() {
            let report = pollution_channels_report(&result, &cfg.channels)?;
            write_channel_report(&dir.join("channel_report.csv"), &report)?;
            for r in &report {
                info!("{stem}: m/z {} reduced by {:.1}%", r.mz, r.reduction_pct);
            }
        }
    }
    let mut run = RunConfig::new("clean", seed, out);
    run.inputs.push(args.manifest.clone());
    run.model = Some(model);
    run.hyper = Some(hp);
    run.clean = Some(cfg);
    run.write()
}

fn write_solvers(out: &Path, plan: &WindowPlan, solvers: &[WindowSolver]) -> Result<()> {
    write_json_atomic(&out.join("plan.json"), plan)?;
    for s in solvers {
        write_json_atomic(&out.join("solvers").join(format!("window_{:03}.json", s.window)), s)?;
    }
    Ok(())
}

fn read_csv_records(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| GmcrError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut rows = vec![rdr
        .headers()
        .map_err(|e| GmcrError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| GmcrError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

fn markdown_table(rows: &[Vec<String>]) -> String {
    let mut s = String::new();
    if let Some((head, body)) = rows.split_first() {
        s.push_str(&format!("| {} |\n", head.join(" | ")));
        s.push_str(&format!("|{}\n", "---|".repeat(head.len())));
        for r in body {
            s.push_str(&format!("| {} |\n", r.join(" | ")));
        }
    }
    s
}

/// Renders every known output in `args.run` as markdown and writes it to
/// `report.md` there.
pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    let dir = &args.run;
    if !dir.is_dir() {
        return Err(GmcrError::argument(format!("{} is not a run directory", dir.display())));
    }
    let mut md = format!("# Run report: {}\n\n", dir.display());
    let cfg_path = dir.join(crate::config::RUN_CONFIG_FILE);
    if cfg_path.exists() {
        let run: RunConfig = read_json(&cfg_path)?;
        md.push_str(&format!("Command `{}`, seed {}.\n\n", run.command, run.seed));
    }
    let summary = dir.join(SUMMARY_FILE);
    if summary.exists() {
        let s: FitSummary = read_json(&summary)?;
        md.push_str("## Fit\n\n");
        md.push_str(&format!(
            "- method: {}\n- best iteration: {}\n- R²: {}\n- EC: {}\n- diverged: {}\n\n",
            s.method.tag(),
            s.best_iteration.map_or("-".into(), |v| v.to_string()),
            s.r2.map_or("undefined".into(), |v| format!("{v:.6}")),
            s.ec,
            s.diverged
        ));
    }
    let eval = dir.join(EVAL_FILE);
    if eval.exists() {
        let e: EvalReport = read_json(&eval)?;
        md.push_str("## Evaluation\n\n");
        md.push_str(&format!(
            "- R²: {}\n- EC: {} (true {})\n- zero leakage: {}\n- realized SNR: {}\n\n",
            e.r2.map_or("undefined".into(), |v| format!("{v:.6}")),
            e.ec,
            e.ec_true.map_or("-".into(), |v| v.to_string()),
            e.zero_leakage.map_or("-".into(), |v| format!("{v:e}")),
            e.snr_realized_db.map_or("-".into(), |v| format!("{v:.2} dB"))
        ));
    }
    for (name, title) in [
        ("curve.csv", "Checkpoint curve"),
        ("bench_summary.csv", "Benchmark summary"),
        ("bench_runs.csv", "Benchmark runs"),
    ] {
        let p = dir.join(name);
        if p.exists() {
            md.push_str(&format!("## {title}\n\n{}\n", markdown_table(&read_csv_records(&p)?)));
        }
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| GmcrError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("channel_report.csv").exists())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let name = sub
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        md.push_str(&format!(
            "## Channel reductions: {name}\n\n{}\n",
            markdown_table(&read_csv_records(&sub.join("channel_report.csv"))?)
        ));
    }
    write_atomic(&dir.join("report.md"), md.as_bytes())?;
    Ok(md)
}
