use serde::Serialize;

use super::{evaluate, predict_dataset, train, ExperimentConfig, TrainState};
use crate::error::{CoreError, Result};
use crate::model::Variant;
use crate::synth::Dataset;

/// One trained variant on one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub steps: u64,
    /// Training hit a non-finite loss; metrics are NaN.
    pub diverged: bool,
    pub depth_rel_median: f64,
    pub mrpe: f64,
    pub mrpe_z: f64,
    pub ap_250: f64,
    pub ap_150: f64,
    pub final_loss: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str =
        "variant,seed,config_hash,steps,diverged,depth_rel_median,mrpe,mrpe_z,ap_250,ap_150,final_loss";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.seed,
            self.config_hash,
            self.steps,
            self.diverged,
            self.depth_rel_median,
            self.mrpe,
            self.mrpe_z,
            self.ap_250,
            self.ap_150,
            self.final_loss
        )
    }
}

/// Config of one ablation run.
pub(crate) fn run_config(base: &ExperimentConfig, variant: Variant, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.model.variant = variant;
    cfg.seed = seed;
    if let Some(steps) = base.ablate.steps {
        cfg.optim.steps = steps;
    }
    cfg.eval.val_every = 0;
    cfg
}

fn run_one(cfg: &ExperimentConfig, train_ds: &Dataset, val_ds: &Dataset) -> Result<AblationRow> {
    let mut state = TrainState::new(cfg)?;
    let outcome = train(cfg, &mut state, train_ds, val_ds, None, None, &mut |_| {});
    let row = |diverged: bool, final_loss: f64| AblationRow {
        variant: cfg.model.variant.name().to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        steps: cfg.optim.steps,
        diverged,
        depth_rel_median: f64::NAN,
        mrpe: f64::NAN,
        mrpe_z: f64::NAN,
        ap_250: f64::NAN,
        ap_150: f64::NAN,
        final_loss,
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(CoreError::NonFiniteLoss { .. }) => return Ok(row(true, f64::NAN)),
        Err(e) => return Err(e),
    };
    let final_loss = outcome.logs.last().map_or(f64::NAN, |l| l.loss);
    let preds = predict_dataset(&state.model, val_ds, &cfg.eval, None)?;
    if preds.iter().any(|p| p.root3d.iter().any(|v| !v.is_finite())) {
        return Ok(row(true, final_loss));
    }
    let report = evaluate(val_ds, &preds, &cfg.eval)?;
    let m = report.overall();
    let get = |k: &str| m.get(k).copied().unwrap_or(f64::NAN);
    Ok(AblationRow {
        depth_rel_median: get("depth_rel_median"),
        mrpe: get("mrpe"),
        mrpe_z: get("mrpe_z"),
        ap_250: get("ap_250"),
        ap_150: get("ap_150"),
        ..row(false, final_loss)
    })
}

/// Trains and evaluates `variants` (all five by default) under every seed of
/// `cfg.ablate.seeds`. A diverging run yields a flagged row instead of an error.
pub fn ablate(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    train_ds: &Dataset,
    val_ds: &Dataset,
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let variants = if variants.is_empty() { &Variant::ALL[..] } else { variants };
    let mut rows = Vec::new();
    for &v in variants {
        for &seed in &cfg.ablate.seeds {
            let row = run_one(&run_config(cfg, v, seed), train_ds, val_ds)?;
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub variant: String,
    pub runs: usize,
    pub diverged: usize,
    pub depth_rel_median_mean: f64,
    pub depth_rel_median_std: f64,
    pub mrpe_z_mean: f64,
    pub mrpe_z_std: f64,
    pub ap_250_mean: f64,
    pub ap_250_std: f64,
}

impl AblationSummary {
    pub const CSV_HEADER: &'static str = "variant,runs,diverged,depth_rel_median_mean,depth_rel_median_std,mrpe_z_mean,mrpe_z_std,ap_250_mean,ap_250_std";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.runs,
            self.diverged,
            self.depth_rel_median_mean,
            self.depth_rel_median_std,
            self.mrpe_z_mean,
            self.mrpe_z_std,
            self.ap_250_mean,
            self.ap_250_std
        )
    }
}

/// Mean and sample standard deviation over non-diverged runs.
fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Per-variant summary in first-appearance order.
pub fn summarize_ablation(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let runs: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == name).collect();
            let ok: Vec<&&AblationRow> = runs.iter().filter(|r| !r.diverged).collect();
            let col = |f: fn(&AblationRow) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (dm, ds) = col(|r| r.depth_rel_median);
            let (zm, zs) = col(|r| r.mrpe_z);
            let (am, as_) = col(|r| r.ap_250);
            AblationSummary {
                variant: name.to_string(),
                runs: runs.len(),
                diverged: runs.len() - ok.len(),
                depth_rel_median_mean: dm,
                depth_rel_median_std: ds,
                mrpe_z_mean: zm,
                mrpe_z_std: zs,
                ap_250_mean: am,
                ap_250_std: as_,
            }
        })
        .collect()
}
