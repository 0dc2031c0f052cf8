use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use cellspan::config::RunConfig;
use cellspan::data_io::{eligible, generate_synthetic, load_cells, make_split, save_cells};
use cellspan::eval::{
    ablation_run, evaluate, low_resource_run, plot_data, reference_sweep, rmse, mape, training_mean_baseline,
    Experiment, LowResource, Paradigm, PairwiseTable, TestSet, Variant,
};
use cellspan::featurize::{build_feature_map, parse_channel_mask};
use cellspan::preprocess::FilterMode;
use cellspan::train::{resume, train_model, write_log_line, TrainSet, TrainState};
use cellspan::{CellRecord, Combine, Error, Result, SplitConfig};

#[derive(Parser)]
#[command(name = "cellspan", version, about = "Early-cycle battery lifetime prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate(Common),
    /// Featurize cells and write the feature maps as JSON lines.
    Preprocess(Common),
    /// Train on the configured split and evaluate on its test side.
    Train(Common),
    /// Predict lifetimes of cells, anchored on a reference pool.
    Predict(PredictArgs),
    /// Score a checkpoint on the test side of the configured split.
    Evaluate(Common),
    /// Train and compare branch variants.
    Ablate(AblateArgs),
    /// RMSE against the number of reference cells.
    Sweep(SweepArgs),
    /// Compare ways of learning from a few target-population cells.
    LowResource(LowResourceArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration (every field optional).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed (and the generator seed for `generate`).
    #[arg(long)]
    seed: Option<u64>,
    /// Seed range `A..B` (end exclusive) for multi-run commands.
    #[arg(long)]
    seeds: Option<String>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cell file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to read (or resume from, for `train`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Channel mask, `111111` or names like `Vc,Vd,dV`.
    #[arg(long)]
    channels: Option<String>,
    /// Reference cells per target.
    #[arg(long)]
    refs: Option<usize>,
    #[arg(long, value_parser = ["median", "mean"])]
    combine: Option<String>,
    #[arg(long = "filter-mode", value_parser = ["deviation", "literal"])]
    filter_mode: Option<String>,
    /// Overrides train.epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    /// Cells with known lifetimes used as references.
    #[arg(long)]
    pool: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated subset of intra-only, inter-only, ensemble-of-separate, joint.
    #[arg(long, default_value = "intra-only,inter-only,ensemble-of-separate,joint")]
    variants: String,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated reference counts (default: eval.sweep_sizes).
    #[arg(long)]
    sizes: Option<String>,
}

#[derive(Args)]
struct LowResourceArgs {
    #[command(flatten)]
    common: Common,
    /// Target-population cell file; `--data` is the source population.
    #[arg(long)]
    target_data: PathBuf,
    /// Comma-separated budgets (default: eval.budgets).
    #[arg(long)]
    budgets: Option<String>,
    #[arg(long, default_value = "direct,finetune,combined")]
    paradigms: String,
}

fn main() -> ExitCode {
    let help = format!(
        "Configuration fields and defaults (TOML, pass with --config):\n\n{}",
        RunConfig::default().to_toml()
    );
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: kind={} message={message}", e.kind());
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => cmd_generate(&c),
        Command::Preprocess(c) => cmd_preprocess(&c),
        Command::Train(c) => cmd_train(&c),
        Command::Predict(a) => cmd_predict(&a),
        Command::Evaluate(c) => cmd_evaluate(&c),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::LowResource(a) => cmd_low_resource(&a),
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(a) = c.alpha {
        cfg.train.weights.alpha = a;
    }
    if let Some(l) = c.lambda {
        cfg.train.weights.lambda = l;
    }
    if let Some(m) = &c.channels {
        cfg.featurize.channel_mask = parse_channel_mask(m)?;
    }
    if let Some(k) = c.refs {
        cfg.eval.references = k;
    }
    if let Some(m) = &c.combine {
        cfg.eval.combine = if m == "mean" { Combine::Mean } else { Combine::Median };
    }
    if let Some(m) = &c.filter_mode {
        cfg.featurize.filter.mode = if m == "literal" {
            FilterMode::Literal
        } else {
            FilterMode::DeviationBased
        };
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = &c.seeds {
        cfg.eval.seeds = parse_seeds(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("--seeds expects A..B or N, got {s:?}"));
    match s.split_once("..") {
        Some((a, b)) => {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            if b <= a {
                return Err(bad());
            }
            Ok((a..b).collect())
        }
        None => Ok(vec![s.trim().parse().map_err(|_| bad())?]),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} {x:?}")))
        })
        .collect()
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing required flag {flag}")))
}

fn seed_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("CELLSPAN_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("CELLSPAN_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(Error::file(path))?;
    Ok(())
}

fn stamp(cfg: &RunConfig, seed: u64) -> serde_json::Value {
    json!({ "config_hash": cfg.hash(), "seed": seed })
}

fn merge(mut a: serde_json::Value, b: &serde_json::Value) -> serde_json::Value {
    if let (Some(a), Some(b)) = (a.as_object_mut(), b.as_object()) {
        for (k, v) in b {
            a.insert(k.clone(), v.clone());
        }
    }
    a
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Cells on each side of the configured split.
struct SplitData {
    split: SplitConfig,
    train: TrainSet,
    test: TestSet,
}

fn split_data(cells: &[CellRecord], cfg: &RunConfig) -> Result<SplitData> {
    let split = make_split(
        cells,
        &cfg.data.split,
        cfg.featurize.early_cycles,
        cfg.data.eol_threshold,
        cfg.data.split_seed,
    )?;
    let pick = |ids: &[String]| -> Vec<&CellRecord> {
        ids.iter()
            .filter_map(|id| cells.iter().find(|c| &c.cell_id == id))
            .collect()
    };
    let train = TrainSet::from_cells(&pick(&split.train_ids), &cfg.featurize)?;
    let t = TrainSet::from_cells(&pick(&split.test_ids), &cfg.featurize)?;
    let test = TestSet {
        ids: split.test_ids.clone(),
        maps: t.maps,
        lifetimes: t.lifetimes,
    };
    Ok(SplitData { split, train, test })
}

fn cmd_generate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let mut params = cfg.data.synth.clone();
    if let Some(s) = c.seed {
        params.seed = s;
    }
    let out = required(&c.out, "--out")?;
    let cells = generate_synthetic(&params)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_cells(&cells, out)?;
    println!(
        "{}",
        merge(json!({"cells": cells.len(), "out": out}), &stamp(&cfg, params.seed))
    );
    Ok(())
}

fn cmd_preprocess(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let cells = load_cells(required(&c.data, "--data")?)?;
    let out = required(&c.out, "--out")?;
    let mut text = String::new();
    let mut written = 0;
    for cell in cells.iter().filter(|c| c.cycles.len() >= cfg.featurize.early_cycles) {
        let map = build_feature_map(cell, &cfg.featurize)?;
        let line = merge(
            json!({
                "cell_id": cell.cell_id,
                "lifetime": cell.lifetime,
                "shape": map.shape(),
                "data": map.data(),
            }),
            &stamp(&cfg, cfg.train.seed),
        );
        text.push_str(&line.to_string());
        text.push('\n');
        written += 1;
    }
    write_text(out, &text)?;
    println!("{}", merge(json!({"feature_maps": written, "out": out}), &stamp(&cfg, cfg.train.seed)));
    Ok(())
}

/// Trains one seed into `dir` and returns the test report summary.
fn train_one(cfg: &RunConfig, data: &SplitData, dir: &Path, seed: u64, from: Option<&Path>) -> Result<serde_json::Value> {
    fs::create_dir_all(dir)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let log_file = fs::File::create(dir.join("train_log.jsonl"))?;
    let mut log = BufWriter::new(log_file);
    let ckpt_path = dir.join("checkpoint.ckpt");
    let mut on_epoch = |state: &TrainState, entry: &cellspan::train::EpochLog| -> Result<()> {
        write_log_line(&mut log, entry)?;
        if tcfg.checkpoint_every > 0 && state.epochs_completed.is_multiple_of(tcfg.checkpoint_every) {
            state.save(&ckpt_path)?;
        }
        Ok(())
    };
    let state = match from {
        Some(p) => {
            let mut state = TrainState::load(p)?;
            resume(&mut state, &data.train, &cfg.model, &tcfg, &mut on_epoch)?;
            state
        }
        None => train_model(&data.train, cfg.model.clone(), &cfg.featurize, &tcfg, &mut on_epoch)?,
    };
    log.flush()?;
    state.save(&dir.join("model.ckpt"))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    write_text(&dir.join("split.json"), &serde_json::to_string_pretty(&data.split)?)?;
    let report = evaluate(&state.model, &data.test, &data.train, tcfg.weights.alpha, &cfg.eval, &cfg.hash(), seed)?;
    write_text(&dir.join("report.jsonl"), &report.to_json_lines()?)?;
    Ok(json!({"seed": seed, "rmse": report.rmse, "mape": report.mape, "epochs": state.epochs_completed}))
}

fn baseline_summary(data: &SplitData) -> Result<serde_json::Value> {
    let base = training_mean_baseline(&data.train.lifetimes, data.test.lifetimes.len())?;
    Ok(json!({
        "rmse": rmse(&base, &data.test.lifetimes)?,
        "mape": mape(&base, &data.test.lifetimes)?,
    }))
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let cells = load_cells(required(&c.data, "--data")?)?;
    let out = required(&c.out, "--out")?;
    let data = split_data(&cells, &cfg)?;
    let seeds = if c.seeds.is_some() { cfg.eval.seeds.clone() } else { vec![cfg.train.seed] };
    if seeds.len() > 1 && c.checkpoint.is_some() {
        return Err(Error::Config("--checkpoint resumes a single run; drop --seeds".into()));
    }
    let multi = seeds.len() > 1;
    let rows = seed_pool()?.install(|| {
        seeds
            .par_iter()
            .map(|&s| {
                let dir = if multi { out.join(format!("seed-{s}")) } else { out.to_path_buf() };
                train_one(&cfg, &data, &dir, s, c.checkpoint.as_deref())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rm: Vec<f64> = rows.iter().map(|r| r["rmse"].as_f64().unwrap_or(f64::NAN)).collect();
    let mp: Vec<f64> = rows.iter().map(|r| r["mape"].as_f64().unwrap_or(f64::NAN)).collect();
    let (rmse_mean, rmse_std) = mean_std(&rm);
    let (mape_mean, mape_std) = mean_std(&mp);
    let summary = json!({
        "config_hash": cfg.hash(),
        "seeds": seeds,
        "runs": rows,
        "rmse_mean": rmse_mean, "rmse_std": rmse_std,
        "mape_mean": mape_mean, "mape_std": mape_std,
        "training_mean_baseline": baseline_summary(&data)?,
    });
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!("{summary}");
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let c = &a.common;
    let cfg = load_config(c)?;
    let state = TrainState::load(required(&c.checkpoint, "--checkpoint")?)?;
    let cells = load_cells(required(&c.data, "--data")?)?;
    let out = required(&c.out, "--out")?;
    let alpha = cfg.train.weights.alpha;
    let pool = if alpha >= 1.0 {
        if a.pool.is_some() {
            eprintln!("warning: alpha=1 uses the intra-cell branch only; the reference pool is ignored");
        }
        None
    } else {
        let pool_cells = load_cells(required(&a.pool, "--pool")?)?;
        let labeled: Vec<&CellRecord> = pool_cells
            .iter()
            .filter(|c| eligible(c, cfg.featurize.early_cycles))
            .collect();
        Some(TrainSet::from_cells(&labeled, &cfg.featurize)?)
    };
    let maps = cells
        .iter()
        .map(|c| build_feature_map(c, &cfg.featurize))
        .collect::<Result<Vec<_>>>()?;
    let empty = TrainSet {
        maps: Vec::new(),
        lifetimes: Vec::new(),
    };
    let pool_ref = pool.as_ref().unwrap_or(&empty);
    let table = PairwiseTable::build(&state.model, &maps, pool_ref, pool.is_some())?;
    let mut text = String::new();
    for (t, cell) in cells.iter().enumerate() {
        let refs = cellspan::eval::sample_references(pool_ref.len(), cfg.eval.references, cfg.train.seed, t);
        let inter = pool.as_ref().map(|_| table.inter(t, &refs, cfg.eval.combine));
        let line = merge(
            json!({
                "cell_id": cell.cell_id,
                "predicted": table.predict(t, &refs, alpha, cfg.eval.combine),
                "intra": table.intra[t],
                "inter": inter,
                "references": if pool.is_some() { refs.len() } else { 0 },
                "true_lifetime": cell.lifetime,
            }),
            &stamp(&cfg, cfg.train.seed),
        );
        text.push_str(&line.to_string());
        text.push('\n');
    }
    write_text(out, &text)?;
    println!("{}", merge(json!({"predictions": cells.len(), "out": out}), &stamp(&cfg, cfg.train.seed)));
    Ok(())
}

fn cmd_evaluate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let state = TrainState::load(required(&c.checkpoint, "--checkpoint")?)?;
    let cells = load_cells(required(&c.data, "--data")?)?;
    let out = required(&c.out, "--out")?;
    let data = split_data(&cells, &cfg)?;
    let seed = cfg.train.seed;
    let report = evaluate(&state.model, &data.test, &data.train, cfg.train.weights.alpha, &cfg.eval, &cfg.hash(), seed)?;
    report.recompute_check(1e-12)?;
    fs::create_dir_all(out)?;
    write_text(&out.join("report.jsonl"), &report.to_json_lines()?)?;
    let base = training_mean_baseline(&data.train.lifetimes, data.test.lifetimes.len())?;
    let base_report = cellspan::eval::EvalReport::new(&data.test.ids, &data.test.lifetimes, &base, cfg.hash(), seed)?;
    let plot = plot_data(&[
        ("model", &report.cumulative_curve),
        ("training_mean", &base_report.cumulative_curve),
    ]);
    write_text(
        &out.join("cumulative_error.csv"),
        &format!("# config_hash={} seed={seed}\n{plot}", cfg.hash()),
    )?;
    let summary = merge(
        json!({
            "rmse": report.rmse,
            "mape": report.mape,
            "cells": report.per_cell.len(),
            "training_mean_baseline": {"rmse": base_report.rmse, "mape": base_report.mape},
        }),
        &stamp(&cfg, seed),
    );
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!("{summary}");
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let c = &a.common;
    let cfg = load_config(c)?;
    let cells = load_cells(required(&c.data, "--data")?)?;
    let out = required(&c.out, "--out")?;
    let variants = a
        .variants
        .split(',')
        .map(|v| Variant::parse(v.trim()).ok_or_else(|| Error::Config(format!("unknown variant {v:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let data = split_data(&cells, &cfg)?;
    let exp = Experiment {
        train: &data.train,
        test: &data.test,
        geometry: cfg.model.clone(),
        featurize: &cfg.featurize,
        train_cfg: &cfg.train,
        eval_cfg: &cfg.eval,
    };
    let seeds = cfg.eval.seeds.clone();
    let scores = seed_pool()?.install(|| {
        seeds
            .par_iter()
            .map(|&s| ablation_run(&exp, &variants, s))
            .collect::<Result<Vec<_>>>()
    })?;
    let hash = cfg.hash();
    let mut rows = String::new();
    for s in scores.iter().flatten() {
        let line = json!({
            "variant": s.variant.name(), "seed": s.seed, "rmse": s.rmse, "mape": s.mape, "config_hash": hash,
        });
        rows.push_str(&line.to_string());
        rows.push('\n');
    }
    fs::create_dir_all(out)?;
    write_text(&out.join("ablation.jsonl"), &rows)?;
    let table: Vec<serde_json::Value> = variants
        .iter()
        .map(|&v| {
            let r: Vec<f64> = scores.iter().flatten().filter(|s| s.variant == v).map(|s| s.rmse).collect();
            let m: Vec<f64> = scores.iter().flatten().filter(|s| s.variant == v).map(|s| s.mape).collect();
            let (rm, rs) = mean_std(&r);
            let (mm, ms) = mean_std(&m);
            json!({"variant": v.name(), "rmse_mean": rm, "rmse_std": rs, "mape_mean": mm, "mape_std": ms})
        })
        .collect();
    let mask: String = cfg.featurize.channel_mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
    let summary = json!({"config_hash": hash, "seeds": seeds, "channels": mask, "variants": table});
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!("{summary}");
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let c = &a.common;
    let cfg = load_config(c)?;
    let state = TrainState::load(required(&c.checkpoint, "--checkpoint")?)?;
    let cells = load_cells(required(&c.data, "--data")?)?;
    let out = required(&c.out, "--out")?;
    let sizes = match &a.sizes {
        Some(s) => parse_list(s, "size")?,
        None => cfg.eval.sweep_sizes.clone(),
    };
    let data = split_data(&cells, &cfg)?;
    let started = std::time::Instant::now();
    let table = PairwiseTable::build(&state.model, &data.test.maps, &data.train, true)?;
    let throughput = data.test.maps.len() as f64 / started.elapsed().as_secs_f64().max(1e-9);
    let rows = reference_sweep(
        &table,
        &data.test.lifetimes,
        &sizes,
        &cfg.eval.seeds,
        cfg.train.weights.alpha,
        cfg.eval.combine,
    )?;
    let summary = json!({
        "config_hash": cfg.hash(),
        "seeds": cfg.eval.seeds,
        "alpha": cfg.train.weights.alpha,
        "rows": rows,
        "cells_per_second": throughput,
    });
    fs::create_dir_all(out)?;
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.size as f64, r.mean_rmse)).collect();
    write_text(
        &out.join("sweep.csv"),
        &format!("# config_hash={}\n{}", cfg.hash(), plot_data(&[("mean_rmse", &points)])),
    )?;
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!("{summary}");
    Ok(())
}

fn cmd_low_resource(a: &LowResourceArgs) -> Result<()> {
    let c = &a.common;
    let cfg = load_config(c)?;
    let source_cells = load_cells(required(&c.data, "--data")?)?;
    let target_cells = load_cells(&a.target_data)?;
    let out = required(&c.out, "--out")?;
    let budgets = match &a.budgets {
        Some(s) => parse_list(s, "budget")?,
        None => cfg.eval.budgets.clone(),
    };
    let paradigms = a
        .paradigms
        .split(',')
        .map(|p| Paradigm::parse(p.trim()).ok_or_else(|| Error::Config(format!("unknown paradigm {p:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let source: Vec<&CellRecord> = source_cells
        .iter()
        .filter(|c| eligible(c, cfg.featurize.early_cycles))
        .collect();
    let source = TrainSet::from_cells(&source, &cfg.featurize)?;
    let target = split_data(&target_cells, &cfg)?;
    let lr = LowResource {
        source: &source,
        target_pool: &target.train,
        target_test: &target.test,
        geometry: cfg.model.clone(),
        featurize: &cfg.featurize,
        train_cfg: &cfg.train,
        eval_cfg: &cfg.eval,
    };
    let seeds = cfg.eval.seeds.clone();
    let rows = seed_pool()?.install(|| {
        seeds
            .par_iter()
            .map(|&s| low_resource_run(&lr, &budgets, &paradigms, &[s]))
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<_> = rows.into_iter().flatten().collect();
    let hash = cfg.hash();
    let mut lines = String::new();
    for r in &rows {
        lines.push_str(&merge(serde_json::to_value(r)?, &json!({"config_hash": hash})).to_string());
        lines.push('\n');
    }
    fs::create_dir_all(out)?;
    write_text(&out.join("low_resource.jsonl"), &lines)?;
    let mut table = Vec::new();
    for &b in &budgets {
        for &p in &paradigms {
            let m: Vec<f64> = rows.iter().filter(|r| r.budget == b && r.paradigm == p).map(|r| r.mape).collect();
            let (mm, ms) = mean_std(&m);
            table.push(json!({"budget": b, "paradigm": p, "mape_mean": mm, "mape_std": ms}));
        }
    }
    let summary = json!({"config_hash": hash, "seeds": seeds, "table": table});
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!("{summary}");
    Ok(())
}
