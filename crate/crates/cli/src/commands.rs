use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::{info, warn};
use nptl::datasets::{read_csv, write_csv, DatasetManifest, TargetKind};
use nptl::diagnostics::{
    blocked_vs_nonblocked_test, decomposition_test, sandwich_check, vn_bound_check, write_csv_rows, write_json,
    BlockedTestConfig, DecompositionTestConfig, SandwichConfig,
};
use nptl::experiment::{
    evaluate_members, run_alpha_search, run_baselines, run_nptl, run_pretrain, run_probe, run_soup, stage_seed, Datasets,
    ExperimentConfig, Stage, METHOD_NPTL, METHOD_SOUP,
};
use nptl::inference::{append_results, read_results, summarize, write_soup_trajectory, write_summary, EvalReport};
use nptl::models::{read_param_file, write_param_file, ModelSpec, ParamVector};
use nptl::sampler::{DrawScheme, PosteriorEnsemble};
use nptl::transfer::{make_base_measure, write_alpha_table};
use nptl::NptlError;
use serde_json::json;

use crate::manifest::{spec_hash, StageManifest, MANIFEST_FORMAT_VERSION};
use crate::{Cli, Command, DiagnoseArgs, EvaluateArgs, SampleArgs};

pub const RESULTS_FILE: &str = "results.csv";
pub const REPORT_FILE: &str = "report.csv";
const DATA_DIR: &str = "data";
const SPLITS: [&str; 4] = ["upstream", "train", "val", "test"];

/// Resolved config plus the run-wide flags.
struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    workers: usize,
}

impl Ctx {
    fn dir(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest(&self, stage: &str, data_hash: &str, spec: Option<&ModelSpec>, files: Vec<String>) -> StageManifest {
        StageManifest {
            format: MANIFEST_FORMAT_VERSION,
            stage: stage.into(),
            config_hash: self.cfg.config_hash(),
            data_hash: data_hash.into(),
            spec_hash: spec.map(spec_hash),
            seed: self.cfg.seed,
            files,
            details: serde_json::Value::Null,
        }
    }
}

fn config_error(msg: String) -> anyhow::Error {
    NptlError::InvalidArgument(msg).into()
}

fn resolve(cli: &Cli) -> anyhow::Result<Ctx> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::shifted_mixture(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    match &cli.command {
        Command::Sample(a) => {
            if let Some(alpha) = a.alpha {
                cfg.sampler.alpha = Some(alpha);
            }
            if let Some(blocks) = a.blocks {
                cfg.sampler.scheme = DrawScheme::Blocked { blocks };
            }
            if let Some(samples) = a.samples {
                cfg.sampler.samples = samples;
            }
        }
        Command::Diagnose(a) => {
            if let Some(alpha) = a.alpha {
                cfg.diagnostics.alpha = alpha;
            }
            if let Some(blocks) = a.blocks {
                cfg.diagnostics.blocks = blocks;
            }
            if let Some(samples) = a.samples {
                cfg.diagnostics.draws = samples;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(Ctx { cfg, out, workers: cli.workers })
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let ctx = resolve(cli)?;
    info!("config {} hash {} seed {}", ctx.cfg.name, ctx.cfg.config_hash(), ctx.cfg.seed);
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Pretrain => pretrain(&ctx),
        Command::Probe => probe(&ctx),
        Command::SweepAlpha => sweep_alpha(&ctx),
        Command::Sample(args) => sample(&ctx, args),
        Command::Evaluate(args) => evaluate(&ctx, args),
        Command::Soup(args) => soup(&ctx, args),
        Command::Diagnose(args) => diagnose(&ctx, args),
        Command::Report => report(&ctx),
    }
}

fn gen_data(ctx: &Ctx) -> anyhow::Result<()> {
    let data = Datasets::build(&ctx.cfg.dataset, ctx.cfg.data_seed())?;
    let dir = ctx.dir(DATA_DIR);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let parts = [&data.upstream, &data.train, &data.val, &data.test];
    let mut described = Vec::new();
    for (name, part) in SPLITS.iter().zip(parts) {
        write_csv(dir.join(format!("{name}.csv")), part)?;
        let shift = (*name != "upstream").then(|| ctx.cfg.dataset.shift.clone());
        described.push(DatasetManifest::describe(part, Some(ctx.cfg.data_seed()), shift));
    }
    let mut m = ctx.manifest(
        "gen-data",
        &ctx.cfg.data_hash(),
        None,
        SPLITS.iter().map(|s| format!("{s}.csv")).collect(),
    );
    m.details = json!({ "downstream_classes": data.downstream_classes, "datasets": described });
    m.write(&dir)?;
    println!(
        "gen-data: upstream {} rows, downstream train/val/test {}/{}/{}",
        data.upstream.len(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    Ok(())
}

/// The data on disk and its hash.
fn load_data(ctx: &Ctx) -> anyhow::Result<(Datasets, String)> {
    let dir = ctx.dir(DATA_DIR);
    let m = StageManifest::read(&dir, "gen-data")?;
    let classes = m.details["downstream_classes"]
        .as_u64()
        .ok_or_else(|| config_error(format!("{}: missing downstream_classes", dir.display())))?;
    let load = |name: &str| read_csv(dir.join(format!("{name}.csv")), TargetKind::Class);
    let data = Datasets {
        upstream: load("upstream")?,
        train: load("train")?,
        val: load("val")?,
        test: load("test")?,
        downstream_classes: classes as usize,
    };
    Ok((data, m.data_hash))
}

fn pretrain(ctx: &Ctx) -> anyhow::Result<()> {
    let (data, data_hash) = load_data(ctx)?;
    let spec = ctx.cfg.upstream_spec(&data);
    let outcome = run_pretrain(&ctx.cfg, &data)?;
    let dir = ctx.dir("pretrain");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_param_file(dir.join("params.bin"), &spec, &outcome.params)?;
    let mut m = ctx.manifest("pretrain", &data_hash, Some(&spec), vec!["params.bin".into()]);
    m.details = json!({
        "seed": stage_seed(ctx.cfg.seed, Stage::Pretrain),
        "objective": outcome.objective,
        "initial_objective": outcome.initial_objective,
        "best_epoch": outcome.best_epoch,
    });
    m.write(&dir)?;
    println!("pretrain: objective {:.6} -> {:.6}", outcome.initial_objective, outcome.objective);
    Ok(())
}

fn load_params(ctx: &Ctx, stage: &str, data_hash: &str, spec: &ModelSpec) -> anyhow::Result<ParamVector> {
    let dir = ctx.dir(stage);
    StageManifest::read(&dir, stage)?.check(data_hash, Some(spec))?;
    Ok(read_param_file(dir.join("params.bin"), spec)?)
}

fn probe(ctx: &Ctx) -> anyhow::Result<()> {
    let (data, data_hash) = load_data(ctx)?;
    let theta_up = load_params(ctx, "pretrain", &data_hash, &ctx.cfg.upstream_spec(&data))?;
    let spec = ctx.cfg.downstream_spec(&data);
    let outcome = run_probe(&ctx.cfg, &data, &theta_up)?;
    let dir = ctx.dir("probe");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_param_file(dir.join("params.bin"), &spec, &outcome.params)?;
    let val = evaluate_members("probe", &spec, std::slice::from_ref(&outcome.params), &data.val, &ctx.cfg.name, ctx.cfg.seed, ctx.cfg.eval.ece_bins)?;
    let mut m = ctx.manifest("probe", &data_hash, Some(&spec), vec!["params.bin".into()]);
    m.details = json!({
        "seed": stage_seed(ctx.cfg.seed, Stage::Probe),
        "objective": outcome.objective,
        "val_acc": val.acc,
        "val_nll": val.nll,
        "majority_rate": data.train.majority_rate(),
    });
    m.write(&dir)?;
    println!("probe: val acc {:.4} nll {:.4}", val.acc, val.nll);
    Ok(())
}

fn sweep_alpha(ctx: &Ctx) -> anyhow::Result<()> {
    let (data, data_hash) = load_data(ctx)?;
    let spec = ctx.cfg.downstream_spec(&data);
    let probed = load_params(ctx, "probe", &data_hash, &spec)?;
    run_sweep(ctx, &data, &data_hash, &spec, &probed)?;
    Ok(())
}

fn run_sweep(ctx: &Ctx, data: &Datasets, data_hash: &str, spec: &ModelSpec, probed: &ParamVector) -> anyhow::Result<f64> {
    let pseudo = make_base_measure(spec, probed, &data.train.features)?;
    let selection = run_alpha_search(&ctx.cfg, data, probed, &pseudo, ctx.workers)?;
    let dir = ctx.dir("sweep");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_alpha_table(dir.join("alpha_table.csv"), &selection.table)?;
    let mut m = ctx.manifest("sweep-alpha", data_hash, Some(spec), vec!["alpha_table.csv".into()]);
    m.details = json!({ "alpha": selection.alpha, "table": selection.table });
    m.write(&dir)?;
    for row in &selection.table {
        println!("sweep-alpha: alpha {:<10} val nll {:.6}", row.alpha, row.val_nll);
    }
    println!("sweep-alpha: selected alpha {}", selection.alpha);
    Ok(selection.alpha)
}

/// The configured alpha, else the recorded sweep result, else a fresh sweep.
fn chosen_alpha(ctx: &Ctx, data: &Datasets, data_hash: &str, spec: &ModelSpec, probed: &ParamVector) -> anyhow::Result<f64> {
    if let Some(alpha) = ctx.cfg.sampler.alpha {
        return Ok(alpha);
    }
    let dir = ctx.dir("sweep");
    if !dir.join(crate::manifest::MANIFEST_FILE).is_file() {
        info!("no alpha configured and no sweep result; running the alpha sweep");
        return run_sweep(ctx, data, data_hash, spec, probed);
    }
    let m = StageManifest::read(&dir, "sweep-alpha")?;
    m.check(data_hash, Some(spec))?;
    m.details["alpha"].as_f64().ok_or_else(|| config_error(format!("{}: no alpha recorded", dir.display())))
}

fn ensemble_dir(ctx: &Ctx, method: &str) -> PathBuf {
    let slug: String = method.to_lowercase().chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '-' }).collect();
    ctx.dir("ensembles").join(slug)
}

fn save_ensemble(ctx: &Ctx, method: &str, ensemble: &PosteriorEnsemble, data_hash: &str, extra: serde_json::Value) -> anyhow::Result<()> {
    let dir = ensemble_dir(ctx, method);
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    let mut m = ctx.manifest("sample", data_hash, Some(&ensemble.spec), Vec::new());
    m.details = json!({ "method": method, "settings": extra });
    ensemble.save(&dir, serde_json::to_value(&m)?)?;
    println!("sample: {method}: {} members in {}", ensemble.len(), dir.display());
    Ok(())
}

fn sample(ctx: &Ctx, args: &SampleArgs) -> anyhow::Result<()> {
    let (data, data_hash) = load_data(ctx)?;
    let spec = ctx.cfg.downstream_spec(&data);
    let probed = load_params(ctx, "probe", &data_hash, &spec)?;
    let alpha = chosen_alpha(ctx, &data, &data_hash, &spec, &probed)?;
    let pseudo = make_base_measure(&spec, &probed, &data.train.features)?;
    let sampler = ctx.cfg.sampler_config(alpha);
    let nptl = run_nptl(&ctx.cfg, &data, &probed, &pseudo, alpha, ctx.workers)?;
    for f in &nptl.failures {
        warn!("member {} (seed {}) failed: {}", f.index, f.seed, f.message);
    }
    save_ensemble(ctx, METHOD_NPTL, &nptl, &data_hash, serde_json::to_value(&sampler)?)?;
    if !args.no_baselines {
        for (method, ensemble) in run_baselines(&ctx.cfg, &data, &probed, ctx.workers)? {
            let settings = json!({ "opt": ctx.cfg.pipeline.finetune, "l2sp_beta": ctx.cfg.pipeline.l2sp_beta });
            save_ensemble(ctx, method, &ensemble, &data_hash, settings)?;
        }
    }
    Ok(())
}

/// Loads an ensemble written by `sample`, checked against the current data and spec.
fn load_ensemble(dir: &Path, data_hash: &str, spec: &ModelSpec) -> anyhow::Result<(PosteriorEnsemble, String)> {
    let (ensemble, stored) = PosteriorEnsemble::load(dir)?;
    let m: StageManifest = serde_json::from_value(stored)
        .map_err(|e| NptlError::Format { path: dir.join(crate::manifest::MANIFEST_FILE), reason: e.to_string() })?;
    m.check(data_hash, Some(spec))?;
    let method = m.details["method"].as_str().unwrap_or("unknown").to_string();
    Ok((ensemble, method))
}

fn ensemble_dirs(ctx: &Ctx, args: &EvaluateArgs) -> anyhow::Result<Vec<PathBuf>> {
    if !args.ensemble.is_empty() {
        return Ok(args.ensemble.clone());
    }
    let root = ctx.dir("ensembles");
    let entries = fs::read_dir(&root)
        .map_err(|_| config_error(format!("no ensembles under {}; run `sample` first", root.display())))?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    Ok(dirs)
}

fn evaluate(ctx: &Ctx, args: &EvaluateArgs) -> anyhow::Result<()> {
    let (data, data_hash) = load_data(ctx)?;
    let spec = ctx.cfg.downstream_spec(&data);
    let mut rows = Vec::new();
    for dir in ensemble_dirs(ctx, args)? {
        let (ensemble, method) = load_ensemble(&dir, &data_hash, &spec)?;
        let report = evaluate_members(&method, &spec, &ensemble.members, &data.test, &ctx.cfg.name, ctx.cfg.seed, ctx.cfg.eval.ece_bins)?;
        print_report("evaluate", &report);
        rows.push(report);
    }
    append_results(ctx.out.join(RESULTS_FILE), &rows)?;
    Ok(())
}

fn print_report(stage: &str, r: &EvalReport) {
    println!("{stage}: {:<14} members {:>3} acc {:.4} nll {:.4} ece {:.4}", r.method, r.members, r.acc, r.nll, r.ece);
}

fn soup(ctx: &Ctx, args: &EvaluateArgs) -> anyhow::Result<()> {
    let (data, data_hash) = load_data(ctx)?;
    let spec = ctx.cfg.downstream_spec(&data);
    let source = args.ensemble.first().cloned().unwrap_or_else(|| ensemble_dir(ctx, METHOD_NPTL));
    let (ensemble, _) = load_ensemble(&source, &data_hash, &spec)?;
    let result = run_soup(&ctx.cfg, &spec, &ensemble.members, &data.val)?;
    let dir = ctx.dir("soup");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_param_file(dir.join("params.bin"), &spec, &result.params)?;
    write_soup_trajectory(dir.join("trajectory.csv"), &result)?;
    let mut m = ctx.manifest("soup", &data_hash, Some(&spec), vec!["params.bin".into(), "trajectory.csv".into()]);
    m.details = json!({ "source": source, "accepted": result.accepted, "metric": result.metric });
    m.write(&dir)?;
    let report = evaluate_members(METHOD_SOUP, &spec, std::slice::from_ref(&result.params), &data.test, &ctx.cfg.name, ctx.cfg.seed, ctx.cfg.eval.ece_bins)?;
    print_report("soup", &report);
    append_results(ctx.out.join(RESULTS_FILE), &[report])?;
    Ok(())
}

fn diagnose(ctx: &Ctx, _args: &DiagnoseArgs) -> anyhow::Result<()> {
    let d = &ctx.cfg.diagnostics;
    let seed = stage_seed(ctx.cfg.seed, Stage::Diagnose);
    let dir = ctx.dir("diagnostics");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut reports = Vec::new();
    for block_pseudo in [true, false] {
        let config = BlockedTestConfig {
            n: d.n,
            blocks: d.blocks,
            alpha: d.alpha,
            draws: d.draws,
            permutations: d.permutations,
            block_pseudo,
            seed,
        };
        reports.extend(blocked_vs_nonblocked_test(&config, &d.functionals)?);
    }
    reports.push(decomposition_test(&DecompositionTestConfig {
        n: d.n,
        pseudo_atoms: d.n,
        alpha: d.alpha,
        blocks: d.blocks,
        draws: d.draws,
        projections: 32,
        permutations: d.permutations,
        seed,
    })?);
    for r in &reports {
        println!(
            "diagnose: {:<24} {} = {:.5} p = {:.4} (pseudo blocked: {})",
            r.functional, r.statistic_name, r.statistic, r.p_value, r.block_pseudo
        );
    }
    write_csv_rows(dir.join("equivalence.csv"), &reports)?;

    let vn = vn_bound_check(d.n, d.blocks, d.alpha, d.vn_draws, seed)?;
    println!("diagnose: E[V_n] = {:.6} +- {:.6}, bound alpha/n = {:.6}, within: {}", vn.mean, vn.std_error, vn.bound, vn.within_bound);
    write_json(dir.join("vn.json"), &vn)?;

    let mut sandwich = Vec::new();
    for heteroscedastic in [true, false] {
        let report = sandwich_check(&SandwichConfig {
            n: d.sandwich_n,
            samples: d.sandwich_samples,
            heteroscedastic,
            prior_variance: 100.0,
            seed,
        })?;
        println!(
            "diagnose: sandwich (heteroscedastic {heteroscedastic}): slope var npl {:.3e} sandwich {:.3e} parametric {:.3e}",
            report.slope_var_npl, report.slope_var_sandwich, report.slope_var_parametric
        );
        sandwich.push(report);
    }
    write_json(dir.join("sandwich.json"), &sandwich)?;

    let mut m = ctx.manifest(
        "diagnose",
        &ctx.cfg.data_hash(),
        None,
        vec!["equivalence.csv".into(), "vn.json".into(), "sandwich.json".into()],
    );
    m.details = json!({ "settings": d, "seed": seed });
    m.write(&dir)?;
    Ok(())
}

fn report(ctx: &Ctx) -> anyhow::Result<()> {
    let path = ctx.out.join(RESULTS_FILE);
    if !path.is_file() {
        return Err(config_error(format!("results table {} does not exist", path.display())));
    }
    let rows = read_results(&path)?;
    let summary = summarize(&rows)?;
    write_summary(ctx.out.join(REPORT_FILE), &summary)?;
    for s in &summary {
        println!(
            "report: {:<14} {:<16} runs {:>2} acc {:.4} +- {:.4} nll {:.4} +- {:.4} ece {:.4} +- {:.4}",
            s.method, s.dataset, s.runs, s.acc_mean, s.acc_std, s.nll_mean, s.nll_std, s.ece_mean, s.ece_std
        );
    }
    Ok(())
}
