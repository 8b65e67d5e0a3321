use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hdnet_autodiff::{GradCheckConfig, OpKind};
use hdnet_core::experiment::plot::{bar_chart, line_chart};
use hdnet_core::experiment::{
    self, evaluate, grad_audit, ground_truth_predictions, predict_dataset, read_predictions, select_columns,
    summarize_ablation, write_predictions, AblationRow, AblationSummary, ExperimentConfig, StepLog, TrainState,
};
use hdnet_core::model::{read_checkpoint, Variant};
use hdnet_core::synth::Dataset;
use hdnet_core::CoreError;

use crate::{Common, GradCheckFailed};

const TRAIN_LOG: &str = "train_log.csv";
const TRAIN_LOG_HEADER: &str = "step,lr,loss,hm,pose,bins,idx,val_depth_error";

/// Loads the config (or defaults) and applies the common overrides.
fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            CoreError::Io { path, source } => CoreError::Config(format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    CoreError::Config(msg.into()).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    names
        .iter()
        .map(|n| {
            Variant::from_name(n.trim()).ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                config_err(format!("unknown variant `{n}` (expected one of {})", known.join(", ")))
            })
        })
        .collect()
}

pub fn gen_data(common: &Common, split: &str, count: Option<usize>, force: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let (default_count, default_seed) = match split {
        "train" => (Some(cfg.data.train_count), cfg.data.train_seed),
        "val" => (Some(cfg.data.val_count), cfg.data.val_seed),
        _ => (None, cfg.seed),
    };
    let count = count
        .or(default_count)
        .ok_or_else(|| config_err(format!("split `{split}` needs --count")))?;
    let seed = common.seed.unwrap_or(default_seed);
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("data").join(split));
    let ds = Dataset::generate(&cfg.gen, &cfg.model.bins, &cfg.skeleton()?, split, count, seed)?;
    ds.write(&out, force)?;
    println!(
        "wrote {} scenes ({} persons) to {}",
        ds.len(),
        ds.scenes.iter().map(|s| s.persons.len()).sum::<usize>(),
        out.display()
    );
    println!("seed {seed} config_hash {} manifest_hash {}", ds.manifest.config_hash, ds.manifest_hash());
    Ok(())
}

fn log_line(l: &StepLog) -> String {
    let val = l.val_depth_error.map(|v| v.to_string()).unwrap_or_default();
    format!("{},{},{},{},{},{},{},{val}", l.step, l.lr, l.loss, l.hm, l.pose, l.bins, l.idx)
}

/// Data rows of a training log, split into cells.
fn read_log(path: &Path) -> Result<Vec<Vec<String>>> {
    let f = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines().skip(1) {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(line.split(',').map(str::to_string).collect());
        }
    }
    Ok(rows)
}

fn plot_log(dir: &Path, rows: &[Vec<String>]) -> Result<()> {
    let names: Vec<&str> = TRAIN_LOG_HEADER.split(',').collect();
    let series = |col: usize| -> Vec<(f64, f64)> {
        rows.iter()
            .filter_map(|r| Some((r[0].parse().ok()?, r.get(col)?.parse().ok()?)))
            .collect()
    };
    let losses: Vec<(String, Vec<(f64, f64)>)> = (2..7).map(|c| (names[c].to_string(), series(c))).collect();
    write_file(&dir.join("loss.svg"), &line_chart("training loss", "step", "loss", &losses, true))?;
    let val = vec![("median relative depth error".to_string(), series(7))];
    write_file(&dir.join("val.svg"), &line_chart("validation", "step", "error", &val, false))?;
    Ok(())
}

pub fn train(
    common: &Common,
    train_data: Option<PathBuf>,
    val_data: Option<PathBuf>,
    resume: Option<&Path>,
    stop_at: Option<u64>,
    force: bool,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if train_data.is_some() {
        cfg.data.train_dir = train_data;
    }
    if val_data.is_some() {
        cfg.data.val_dir = val_data;
    }
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    let log_path = dir.join(TRAIN_LOG);
    if resume.is_none() && !force && log_path.exists() {
        return Err(CoreError::Data(format!(
            "{} already holds a training run; pass --force to overwrite",
            dir.display()
        ))
        .into());
    }
    create_dir(&dir)?;

    let mut state = match resume {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            if ckpt.meta.get("config_hash").and_then(|h| h.as_str()) != Some(cfg.hash().as_str()) {
                eprintln!("warning: resuming under a config that differs from the checkpoint's");
            }
            TrainState::from_checkpoint(&ckpt)?
        }
        None => TrainState::new(&cfg)?,
    };
    write_file(&dir.join("config.toml"), &cfg.to_toml_string())?;
    let (train_ds, val_ds) = cfg.datasets()?;
    eprintln!(
        "training {} on {} train / {} val scenes, {} parameters, from step {}",
        cfg.model.variant,
        train_ds.len(),
        val_ds.len(),
        state.model.params().num_values(),
        state.step
    );

    // Keep the rows up to the resume point so the log reads as one unbroken run.
    let kept: Vec<String> = match resume {
        Some(_) if log_path.exists() => read_log(&log_path)?
            .into_iter()
            .filter(|r| r[0].parse::<u64>().is_ok_and(|s| s <= state.step))
            .map(|r| r.join(","))
            .collect(),
        _ => Vec::new(),
    };
    let file = File::create(&log_path).map_err(|e| CoreError::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{TRAIN_LOG_HEADER}")?;
    for line in kept {
        writeln!(log, "{line}")?;
    }
    let mut io_err = None;
    let total = cfg.optim.steps;
    let outcome = experiment::train(&cfg, &mut state, &train_ds, &val_ds, Some(&dir), stop_at, &mut |l| {
        if let Err(e) = writeln!(log, "{}", log_line(l)) {
            io_err.get_or_insert(e);
        }
        if let Some(v) = l.val_depth_error {
            eprintln!("step {:>6}/{total} loss {:.4} val depth error {:.4}", l.step, l.loss, v);
        } else if l.step % 100 == 0 {
            eprintln!("step {:>6}/{total} loss {:.4}", l.step, l.loss);
        }
    });
    log.flush()?;
    drop(log);
    if let Some(e) = io_err {
        return Err(e).context("writing the training log");
    }
    let outcome = outcome?;
    plot_log(&dir, &read_log(&log_path)?)?;
    if let Some(b) = outcome.best {
        println!("best validation depth error {:.4} at step {}", b.val_depth_error, b.step);
    }
    println!("stopped at step {} of {total}; outputs in {}", state.step, dir.display());
    Ok(())
}

/// Where evaluated predictions come from.
pub enum EvalSource {
    Checkpoint(PathBuf),
    File(PathBuf),
    Oracle,
    Missing,
}

impl EvalSource {
    pub fn new(checkpoint: Option<PathBuf>, predictions: Option<PathBuf>, oracle: bool) -> Self {
        match (checkpoint, predictions, oracle) {
            (_, _, true) => Self::Oracle,
            (Some(c), _, _) => Self::Checkpoint(c),
            (_, Some(p), _) => Self::File(p),
            _ => Self::Missing,
        }
    }
}

pub fn eval(
    common: &Common,
    source: EvalSource,
    data: Option<&Path>,
    save_predictions: Option<&Path>,
    metrics: &[String],
    variant: Option<String>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.data.val_seed = seed;
    }
    let columns = select_columns(metrics)?;
    let ds = match data {
        Some(dir) => Dataset::read(dir)?,
        None => Dataset::generate(
            &cfg.gen,
            &cfg.model.bins,
            &cfg.skeleton()?,
            "val",
            cfg.data.val_count,
            cfg.data.val_seed,
        )?,
    };
    let (preds, label) = match source {
        EvalSource::Oracle => (ground_truth_predictions(&ds), "ground-truth".to_string()),
        EvalSource::File(path) => (read_predictions(&path)?, "predictions".to_string()),
        EvalSource::Checkpoint(path) => {
            let state = TrainState::load(&path)?;
            let preds = predict_dataset(&state.model, &ds, &cfg.eval, None)?;
            (preds, state.model.config().variant.name().to_string())
        }
        EvalSource::Missing => bail!(config_err("eval needs --checkpoint, --predictions or --oracle")),
    };
    if let Some(path) = save_predictions {
        write_predictions(path, &preds)?;
    }
    let report = evaluate(&ds, &preds, &cfg.eval)?;
    let csv = report.to_csv(&variant.unwrap_or(label), &columns);
    match &common.out {
        Some(path) => write_file(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn grad_check(common: &Common, seeds: u64, tolerance: f64, fault: Option<&str>) -> Result<()> {
    let cfg = load_config(common)?;
    if seeds == 0 {
        bail!(config_err("--seeds must be positive"));
    }
    if !(tolerance > 0.0) {
        bail!(config_err(format!("--tolerance {tolerance} must be positive")));
    }
    let fault = fault
        .map(|name| OpKind::from_name(name).ok_or_else(|| config_err(format!("unknown operation `{name}`"))))
        .transpose()?;
    let gc = GradCheckConfig {
        tolerance,
        ..GradCheckConfig::default()
    };
    let mut audits = Vec::new();
    for seed in cfg.seed..cfg.seed + seeds {
        audits.push(grad_audit(&cfg, seed, &gc, fault)?);
    }
    // Worst case of every check across seeds, in suite order.
    let first = &audits[0];
    println!("{:<28} {:>12} {:>8} {:>6}  status", "check", "max_rel_err", "coords", "kinks");
    let mut failed = 0;
    let mut worst = 0.0f64;
    for (i, row) in first.rows.iter().enumerate() {
        let rows: Vec<_> = audits.iter().map(|a| &a.rows[i]).collect();
        let err = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        let ok = rows.iter().all(|r| r.passed);
        worst = worst.max(err);
        failed += rows.iter().filter(|r| !r.passed).count();
        println!(
            "{:<28} {:>12.3e} {:>8} {:>6}  {}",
            row.name,
            err,
            rows.iter().map(|r| r.checked).sum::<usize>(),
            rows.iter().map(|r| r.skipped_kinks).sum::<usize>(),
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!("seeds {}..{} tolerance {tolerance:e}", cfg.seed, cfg.seed + seeds - 1);
    if let Some(path) = &common.out {
        write_file(path, &serde_json::to_string_pretty(&audits)?)?;
    }
    if failed > 0 {
        return Err(GradCheckFailed { failed, worst }.into());
    }
    Ok(())
}

pub fn ablate(
    common: &Common,
    variants: &[String],
    train_data: Option<PathBuf>,
    val_data: Option<PathBuf>,
    steps: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.ablate.seeds = (seed..seed + cfg.ablate.seeds.len() as u64).collect();
    }
    if steps.is_some() {
        cfg.ablate.steps = steps;
    }
    if train_data.is_some() {
        cfg.data.train_dir = train_data;
    }
    if val_data.is_some() {
        cfg.data.val_dir = val_data;
    }
    cfg.validate()?;
    let variants = parse_variants(variants)?;
    let dir = common.out.clone().unwrap_or_else(|| cfg.out_dir.join("ablation"));
    create_dir(&dir)?;
    write_file(&dir.join("config.toml"), &cfg.to_toml_string())?;
    let (train_ds, val_ds) = cfg.datasets()?;

    let rows_path = dir.join("ablation.csv");
    let file = File::create(&rows_path).map_err(|e| CoreError::Io {
        path: rows_path.clone(),
        source: e,
    })?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", AblationRow::CSV_HEADER)?;
    let mut io_err = None;
    let rows = experiment::ablate(&cfg, &variants, &train_ds, &val_ds, &mut |r| {
        eprintln!(
            "{:<18} seed {:>3}  depth error {:.4}  mrpe_z {:.1}{}",
            r.variant,
            r.seed,
            r.depth_rel_median,
            r.mrpe_z,
            if r.diverged { "  (diverged)" } else { "" }
        );
        if let Err(e) = writeln!(out, "{}", r.to_csv_line()).and_then(|_| out.flush()) {
            io_err.get_or_insert(e);
        }
    });
    drop(out);
    if let Some(e) = io_err {
        return Err(e).context("writing the ablation table");
    }
    let summary = summarize_ablation(&rows?);
    let mut text = format!("{}\n", AblationSummary::CSV_HEADER);
    for s in &summary {
        text.push_str(&s.to_csv_line());
        text.push('\n');
    }
    write_file(&dir.join("ablation_summary.csv"), &text)?;
    let bars: Vec<(String, f64, f64)> = summary
        .iter()
        .map(|s| (s.variant.clone(), s.depth_rel_median_mean, s.depth_rel_median_std))
        .collect();
    write_file(
        &dir.join("ablation.svg"),
        &bar_chart("held-out depth error by variant", "median relative depth error", &bars),
    )?;
    print!("{text}");
    Ok(())
}
