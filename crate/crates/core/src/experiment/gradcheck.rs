//! Finite-difference audit of every primitive and of the full training objective.

use hdnet_autodiff::{gradient_check_on, primitive_suite_on, GradCheckConfig, GradCheckReport, OpKind, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ExperimentConfig;
use crate::error::Result;
use crate::geometry::{encode_bins, BoundingBox};
use crate::losses::{model_losses, LossWeights, Targets};
use crate::model::{HdNet, ModelConfig, ModelInput};
use crate::skeleton::Skeleton;

/// Batch used by the full-graph check.
pub const AUDIT_BATCH: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    /// `op/case` for primitives, `objective/<variant>` for the full graph.
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub passed: bool,
}

impl AuditRow {
    fn new(name: String, r: &GradCheckReport) -> Self {
        Self {
            name,
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            skipped_kinks: r.skipped_kinks,
            passed: r.passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradAudit {
    pub seed: u64,
    pub rows: Vec<AuditRow>,
}

impl GradAudit {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

/// Shrinks `base` to a size where every parameter can be perturbed, keeping
/// its variant, bins and GNN depth. Attention gradients are enabled: with
/// detached pooling weights the recorded gradient is deliberately not the
/// derivative of the loss.
pub fn audit_model_config(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        input_size: 32,
        heatmap_size: 8,
        feature_channels: 4,
        merge_channels: 2,
        stage_convs: 1,
        attention_gradient: true,
        ..base.clone()
    }
}

fn random_batch(cfg: &ModelConfig, joints: usize, rng: &mut ChaCha8Rng) -> Result<(ModelInput, Targets)> {
    let (b, s, h) = (AUDIT_BATCH, cfg.input_size, cfg.heatmap_size);
    let hw = h * h;
    let images = Tensor::new(&[b, 3, s, s], (0..b * 3 * s * s).map(|_| rng.gen::<f64>()).collect())?;
    let hmax = (h - 1) as f64;
    let mut boxes = Vec::with_capacity(b);
    for _ in 0..b {
        let x0 = rng.gen_range(0.0..hmax / 2.0);
        let y0 = rng.gen_range(0.0..hmax / 2.0);
        boxes.push(BoundingBox::new(x0, y0, rng.gen_range(x0 + 2.0..=hmax), rng.gen_range(y0 + 2.0..=hmax))?);
    }
    let mut heatmaps = Vec::with_capacity(b * joints * hw);
    for _ in 0..b * joints {
        let plane: Vec<f64> = (0..hw).map(|_| rng.gen::<f64>()).collect();
        let sum: f64 = plane.iter().sum();
        heatmaps.extend(plane.into_iter().map(|v| v / sum));
    }
    let coords: Vec<f64> = (0..b * joints * 2).map(|_| rng.gen_range(0.0..hmax)).collect();
    let visible: Vec<f64> = (0..b * joints)
        .flat_map(|_| {
            let v = if rng.gen_bool(0.8) { 1.0 } else { 0.0 };
            [v, v]
        })
        .collect();
    let n = cfg.bins.num_bins;
    let bs: Vec<f64> = (0..b).map(|_| rng.gen_range(0.5..(n as f64 - 1.5))).collect();
    let mut bins = Vec::with_capacity(b * n);
    for &bi in &bs {
        bins.extend_from_slice(encode_bins(bi, n)?.weights());
    }
    let d_hat: Vec<f64> = bs.iter().map(|&bi| cfg.bins.normalized_depth_at(bi)).collect();
    let input = ModelInput {
        images,
        boxes: Some(boxes),
    };
    let targets = Targets {
        heatmaps: Tensor::new(&[b, joints, hw], heatmaps)?,
        coords: Tensor::new(&[b, joints, 2], coords)?,
        visible: Tensor::new(&[b, joints, 2], visible)?,
        bins: Tensor::new(&[b, n], bins)?,
        b: Tensor::new(&[b, 1], bs)?,
        d_hat: Tensor::new(&[b, 1], d_hat)?,
    };
    Ok((input, targets))
}

/// Checks the gradient of the weighted training loss with respect to every
/// parameter of a freshly initialized model on a random batch.
pub fn objective_check(
    model_cfg: &ModelConfig,
    weights: &LossWeights,
    skeleton: &Skeleton,
    seed: u64,
    gc: &GradCheckConfig,
    prepare: impl Fn(&mut Tape),
) -> Result<GradCheckReport> {
    let model = HdNet::new(model_cfg.clone(), skeleton.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (input, targets) = random_batch(model_cfg, skeleton.num_joints(), &mut rng)?;
    let points: Vec<Tensor> = model
        .params()
        .tensors()
        .iter()
        .map(|t| t.clone().with_requires_grad(true))
        .collect();
    let build = |tape: &mut Tape, vars: &[hdnet_autodiff::Var]| -> hdnet_autodiff::Result<hdnet_autodiff::Var> {
        let run = |tape: &mut Tape| -> Result<hdnet_autodiff::Var> {
            let mut g = model.graph_with(tape, vars.to_vec(), true)?;
            let out = model.forward(&mut g, &input)?;
            let (loss, _) = model_losses(g.tape, &out, &targets, weights)?;
            Ok(loss)
        };
        run(tape).map_err(|e| match e {
            crate::CoreError::Autodiff(a) => a,
            other => hdnet_autodiff::AutodiffError::InvalidArgument {
                op: "objective",
                detail: other.to_string(),
            },
        })
    };
    Ok(gradient_check_on(build, &points, gc, prepare)?)
}

/// Primitive suite plus the full objective for one seed. `fault` corrupts the
/// backward rule of one operation (negative control).
pub fn grad_audit(cfg: &ExperimentConfig, seed: u64, gc: &GradCheckConfig, fault: Option<OpKind>) -> Result<GradAudit> {
    let prepare = |t: &mut Tape| {
        if let Some(k) = fault {
            t.inject_backward_fault(k);
        }
    };
    let gc = GradCheckConfig { seed, ..*gc };
    let mut rows: Vec<AuditRow> = primitive_suite_on(seed, &gc, prepare)?
        .iter()
        .map(|c| AuditRow::new(format!("{}/{}", c.kind.name(), c.case), &c.report))
        .collect();
    let model_cfg = audit_model_config(&cfg.model);
    let report = objective_check(&model_cfg, &cfg.loss, &cfg.skeleton()?, seed, &gc, prepare)?;
    rows.push(AuditRow::new(format!("objective/{}", model_cfg.variant.name()), &report));
    Ok(GradAudit { seed, rows })
}
