use std::path::Path;

use hdnet_autodiff::{AutodiffError, Tape};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::eval::validation_error;
use super::{ExperimentConfig, OptimConfig};
use crate::error::{CoreError, Result};
use crate::losses::model_losses;
use crate::model::{read_checkpoint, write_checkpoint, Checkpoint, HdNet, Moments, ParamStore};
use crate::synth::{build_batch, person_samples, scene_seed, Dataset, PersonRef, CODE_VERSION};

/// Separates the batch stream from the initialization stream of the same seed.
const BATCH_SALT: u64 = 0x6261_7463_6865_7321;

pub fn learning_rate(o: &OptimConfig, step: u64) -> f64 {
    o.learning_rate * o.decay_factor.powi((step / o.decay_interval) as i32)
}

/// The persons of training step `step`; a pure function of its arguments.
pub fn batch_refs(all: &[PersonRef], seed: u64, step: u64, batch: usize) -> Vec<PersonRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed ^ BATCH_SALT, step));
    if batch <= all.len() {
        sample(&mut rng, all.len(), batch).into_iter().map(|i| all[i]).collect()
    } else {
        (0..batch).map(|_| all[rng.gen_range(0..all.len())]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub moments: Moments,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            moments: Moments {
                first: zeros.clone(),
                second: zeros,
            },
        }
    }

    /// One bias-corrected update; `t` counts updates from 1. Missing
    /// gradients count as zero.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64, t: u64, o: &OptimConfig) {
        let c1 = 1.0 - o.beta1.powi(t as i32);
        let c2 = 1.0 - o.beta2.powi(t as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.moments.first[i];
            let v = &mut self.moments.second[i];
            let w = params.tensor_mut(i).values_mut();
            for k in 0..w.len() {
                let gk = g.as_ref().map_or(0.0, |g| g[k]);
                m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * gk;
                v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * gk * gk;
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + o.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub step: u64,
    /// Median relative root-depth error on the validation persons.
    pub val_depth_error: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed updates.
    pub step: u64,
    pub model: HdNet,
    pub adam: Adam,
    pub best: Option<BestRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    /// 1-based index of the update just applied.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub hm: f64,
    pub pose: f64,
    pub bins: f64,
    pub idx: f64,
    pub val_depth_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    pub best: Option<BestRecord>,
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let model = HdNet::new(cfg.model.clone(), cfg.skeleton()?, cfg.seed)?;
        let adam = Adam::new(model.params());
        Ok(Self {
            step: 0,
            model,
            adam,
            best: None,
        })
    }

    pub fn to_checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            Some(self.adam.moments.clone()),
            json!({
                "step": self.step,
                "best": self.best,
                "seed": cfg.seed,
                "config_hash": cfg.hash(),
                "code_version": CODE_VERSION,
            }),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.to_model()?;
        let adam = match &ckpt.moments {
            Some(m) => Adam { moments: m.clone() },
            None => Adam::new(model.params()),
        };
        let step = ckpt.meta.get("step").and_then(|s| s.as_u64()).unwrap_or(0);
        let best = ckpt
            .meta
            .get("best")
            .and_then(|b| serde_json::from_value(b.clone()).ok());
        Ok(Self { step, model, adam, best })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

fn dump_batch(dir: &Path, step: u64, seed: u64, refs: &[PersonRef], ds: &Dataset, losses: &[f64]) -> String {
    let path = dir.join(format!("nonfinite_step{step}.json"));
    let body = json!({
        "step": step,
        "batch_seed": seed,
        "losses": losses.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
        "persons": refs.iter().map(|r| json!({
            "scene": ds.scenes[r.scene].id,
            "scene_seed": ds.scenes[r.scene].seed,
            "person": r.person,
        })).collect::<Vec<_>>(),
    });
    match std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, body.to_string())) {
        Ok(()) => path.display().to_string(),
        Err(e) => format!("<unwritten: {e}>"),
    }
}

fn is_numerical(e: &CoreError) -> bool {
    matches!(e, CoreError::Autodiff(AutodiffError::NonFinite { .. }))
}

/// Runs updates until `cfg.optim.steps` (or `stop_at`, if smaller).
///
/// With `out`, writes `best.ckpt` whenever validation improves and
/// `final.ckpt` at the end; a non-finite loss dumps the batch there.
pub fn train(
    cfg: &ExperimentConfig,
    state: &mut TrainState,
    train_ds: &Dataset,
    val_ds: &Dataset,
    out: Option<&Path>,
    stop_at: Option<u64>,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if state.model.config() != &cfg.model {
        return Err(CoreError::Config("checkpoint model config differs from the experiment config".into()));
    }
    let all = person_samples(train_ds);
    if all.is_empty() {
        return Err(CoreError::Data("training split has no persons".into()));
    }
    let end = stop_at.map_or(cfg.optim.steps, |s| s.min(cfg.optim.steps));
    let mut logs = Vec::new();
    while state.step < end {
        let s = state.step;
        let refs = batch_refs(&all, cfg.seed, s, cfg.optim.batch_size);
        let batch = build_batch(train_ds, &refs, &cfg.model, cfg.data.heatmap_sigma)?;
        let mut tape = Tape::new();
        let mut g = state.model.graph(&mut tape, true, true);
        let recorded = state
            .model
            .forward(&mut g, &batch.input)
            .and_then(|fwd| model_losses(g.tape, &fwd, &batch.targets, &cfg.loss));
        let (vars, stats) = g.into_parts();
        let (loss, values) = match recorded {
            Ok((loss, parts)) => {
                let mut values = vec![tape.value(loss).item()?];
                for p in parts.as_array() {
                    values.push(tape.value(p).item()?);
                }
                (Some(loss), values)
            }
            Err(e) if is_numerical(&e) => (None, vec![f64::NAN; 5]),
            Err(e) => return Err(e),
        };
        let Some(loss) = loss.filter(|_| values.iter().all(|v| v.is_finite())) else {
            let batch_seed = scene_seed(cfg.seed ^ BATCH_SALT, s);
            let dir = out.map_or_else(std::env::temp_dir, Path::to_path_buf);
            return Err(CoreError::NonFiniteLoss {
                step: s,
                batch_seed,
                dump: dump_batch(&dir, s, batch_seed, &refs, train_ds, &values),
            });
        };
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();
        drop(tape);
        let lr = learning_rate(&cfg.optim, s);
        state
            .adam
            .update(state.model.params_mut(), &grads, lr, s + 1, &cfg.optim);
        state.model.params_mut().apply_bn_stats(&stats);
        state.step = s + 1;

        let validate = state.step == cfg.optim.steps || (cfg.eval.val_every > 0 && state.step % cfg.eval.val_every == 0);
        let val_depth_error = if validate {
            let err = match validation_error(&state.model, val_ds, &cfg.eval) {
                Err(e) if is_numerical(&e) => f64::NAN,
                r => r?,
            };
            if state.best.map_or(true, |b| err < b.val_depth_error) {
                state.best = Some(BestRecord {
                    step: state.step,
                    val_depth_error: err,
                });
                if let Some(dir) = out {
                    write_checkpoint(&dir.join("best.ckpt"), &state.to_checkpoint(cfg))?;
                }
            }
            Some(err)
        } else {
            None
        };
        let log = StepLog {
            step: state.step,
            lr,
            loss: values[0],
            hm: values[1],
            pose: values[2],
            bins: values[3],
            idx: values[4],
            val_depth_error,
        };
        on_step(&log);
        logs.push(log);
    }
    if let Some(dir) = out {
        write_checkpoint(&dir.join("final.ckpt"), &state.to_checkpoint(cfg))?;
    }
    Ok(TrainOutcome { logs, best: state.best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_schedule() {
        let o = OptimConfig {
            learning_rate: 1.0,
            decay_factor: 0.5,
            decay_interval: 10,
            ..OptimConfig::default()
        };
        assert_eq!(learning_rate(&o, 0), 1.0);
        assert_eq!(learning_rate(&o, 9), 1.0);
        assert_eq!(learning_rate(&o, 10), 0.5);
        assert_eq!(learning_rate(&o, 25), 0.25);
    }

    #[test]
    fn batches_are_stateless() {
        let all: Vec<PersonRef> = (0..50).map(|scene| PersonRef { scene, person: 0 }).collect();
        assert_eq!(batch_refs(&all, 3, 17, 8), batch_refs(&all, 3, 17, 8));
        assert_ne!(batch_refs(&all, 3, 17, 8), batch_refs(&all, 3, 18, 8));
        let b = batch_refs(&all, 3, 17, 8);
        let mut uniq = b.iter().map(|r| r.scene).collect::<Vec<_>>();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 8);
        assert_eq!(batch_refs(&all[..2], 3, 1, 5).len(), 5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ParamStore::from_parts(
            vec!["w".into()],
            vec![hdnet_autodiff::Tensor::new(&[2], vec![1.0, 1.0]).unwrap()],
            vec![],
        );
        let mut adam = Adam::new(&params);
        let o = OptimConfig::default();
        adam.update(&mut params, &[Some(vec![0.5, -2.0])], 0.1, 1, &o);
        let w = params.tensor(0).values();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
        adam.update(&mut params, &[None], 0.1, 2, &o);
    }
}
