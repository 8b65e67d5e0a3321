//! Reproducible experiments: configuration, training, evaluation and ablations.

mod ablate;
mod eval;
mod gradcheck;
pub mod plot;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::losses::LossWeights;
use crate::metrics::MatchMode;
use crate::model::ModelConfig;
use crate::skeleton::Skeleton;
use crate::synth::{sha256_hex, Dataset, GenConfig};

pub use ablate::{ablate, summarize_ablation, AblationRow, AblationSummary};
pub use eval::{
    evaluate, ground_truth_predictions, metric_columns, predict_dataset, read_predictions, select_columns, write_predictions, EvalReport,
    PredictionRecord, RelativePose,
};
pub use gradcheck::{audit_model_config, grad_audit, objective_check, AuditRow, GradAudit, AUDIT_BATCH};
pub use train::{batch_refs, learning_rate, train, Adam, BestRecord, StepLog, TrainOutcome, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Multiplies the learning rate every `decay_interval` steps.
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 5000,
            decay_factor: 0.8,
            decay_interval: 500,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Existing split directories; generated in memory when absent.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub train_count: usize,
    pub val_count: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    /// Target Gaussian width in heatmap cells.
    pub heatmap_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            val_dir: None,
            train_count: 2000,
            val_count: 300,
            train_seed: 1,
            val_seed: 2,
            heatmap_sigma: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub matching: MatchMode,
    /// Steps between validation passes during training; 0 validates only at the end.
    pub val_every: u64,
    /// Persons used by in-training validation (the first ones of the split).
    pub val_persons: usize,
    /// Scenes per reporting sequence in evaluation tables.
    pub sequence_length: usize,
    pub relative_pose: RelativePose,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            matching: MatchMode::Greedy,
            val_every: 500,
            val_persons: 256,
            sequence_length: 100,
            relative_pose: RelativePose::GroundTruth,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Overrides `optim.steps` for every ablation run when set.
    pub steps: Option<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub gen: GenConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig {
                input_size: 64,
                heatmap_size: 16,
                ..ModelConfig::default()
            },
            gen: GenConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(CoreError::Config(d));
        self.model.validate().map_err(|e| CoreError::Config(format!("model: {e}")))?;
        self.gen
            .validate(&self.model.bins)
            .map_err(|e| CoreError::Config(format!("gen: {e}")))?;
        self.loss.validate().map_err(|e| CoreError::Config(format!("loss: {e}")))?;
        let o = &self.optim;
        if o.steps == 0 || o.batch_size == 0 {
            return bad(format!("optim: steps ({}) and batch_size ({}) must be positive", o.steps, o.batch_size));
        }
        if !(o.decay_factor > 0.0 && o.decay_factor <= 1.0) {
            return bad(format!("optim.decay_factor {} must lie in (0, 1]", o.decay_factor));
        }
        if o.decay_interval == 0 {
            return bad("optim.decay_interval must be positive".into());
        }
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad(format!("optim.learning_rate {} must be positive", o.learning_rate));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0) {
            return bad("optim: betas must lie in [0, 1) and epsilon be positive".into());
        }
        if !(self.data.heatmap_sigma > 0.0) {
            return bad("data.heatmap_sigma must be positive".into());
        }
        if self.eval.sequence_length == 0 || self.eval.batch_size == 0 {
            return bad("eval.sequence_length and eval.batch_size must be positive".into());
        }
        if self.ablate.seeds.is_empty() {
            return bad("ablate.seeds must not be empty".into());
        }
        Ok(())
    }

    /// Parses TOML; unknown keys and type errors report their field path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| CoreError::Config(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CoreError::Config(format!("at `{path}`: {}", e.into_inner().message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CoreError::Config(m) => CoreError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical JSON form of the whole config.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn skeleton(&self) -> Result<Skeleton> {
        self.gen.load_skeleton()
    }

    /// Loads the configured splits, or generates them in memory.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let skel = self.skeleton()?;
        let load = |dir: &Option<PathBuf>, split: &str, count: usize, seed: u64| match dir {
            Some(d) => Dataset::read(d),
            None => Dataset::generate(&self.gen, &self.model.bins, &skel, split, count, seed),
        };
        let train = load(&self.data.train_dir, "train", self.data.train_count, self.data.train_seed)?;
        let val = load(&self.data.val_dir, "val", self.data.val_count, self.data.val_seed)?;
        for ds in [&train, &val] {
            if ds.skeleton != skel {
                return Err(CoreError::Data(format!(
                    "dataset `{}` uses a different skeleton than the config",
                    ds.manifest.split
                )));
            }
        }
        Ok((train, val))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = ExperimentConfig::from_toml_str("[optim]\nlearning_rat = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("optim"), "{msg}");
        assert!(msg.contains("learning_rat"), "{msg}");
        let err = ExperimentConfig::from_toml_str("[model]\ninput_size = \"big\"\n").unwrap_err();
        assert!(err.to_string().contains("model.input_size"), "{err}");
    }

    #[test]
    fn invariants_are_checked() {
        let bad = "[optim]\ndecay_factor = 1.5\n";
        assert!(ExperimentConfig::from_toml_str(bad).is_err());
        let bad = "[optim]\nsteps = 0\n";
        assert!(ExperimentConfig::from_toml_str(bad).is_err());
    }
}
