//! The depth network at desk scale.
//!
//! ```text
//! image ─ backbone ─ pyramid P5..P2 ─┬─ pose merge ── 1×1 conv ─ softmax ─ mask ─┬─ soft-argmax ─ (u, v)
//!                                    └─ depth merge ─────────── attention pool ◄─┘
//!                                                                   └─ graph layers ─ node mean ─ fc ─ bins
//! ```

mod checkpoint;
pub mod heads;
mod params;

use hdnet_autodiff::{Conv2dSpec, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{bin_index, encode_bins, BinConfig, BinDistribution, BoundingBox, CameraIntrinsics, CropTransform};
use crate::skeleton::{build_adjacency, normalize_adjacency, AdjacencyMatrix, Skeleton};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, Moments, CHECKPOINT_VERSION,
};
pub use heads::HeatmapStack;
pub use params::{BnState, Graph, ParamStore, BN_MOMENTUM};
use params::{Builder, ConvBn, ConvRef, LinearRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    DirectRegression,
    SharedBranch,
    NoGnn,
    NoHmPooling,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::DirectRegression,
        Variant::SharedBranch,
        Variant::NoGnn,
        Variant::NoHmPooling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DirectRegression => "direct-regression",
            Variant::SharedBranch => "shared-branch",
            Variant::NoGnn => "no-gnn",
            Variant::NoHmPooling => "no-hm-pooling",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub heatmap_size: usize,
    /// Backbone and pyramid width.
    pub feature_channels: usize,
    /// Output channels of each per-level merge block; the merged block has four times this.
    pub merge_channels: usize,
    /// Convolutions per backbone stage (the first one strides).
    pub stage_convs: usize,
    pub num_gnn_layers: usize,
    pub bins: BinConfig,
    pub variant: Variant,
    /// Restore unit heatmap mass after bounding-box masking.
    pub renormalize_mask: bool,
    /// Let depth losses reach the heatmaps through attention pooling.
    pub attention_gradient: bool,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            heatmap_size: 64,
            feature_channels: 16,
            merge_channels: 8,
            stage_convs: 1,
            num_gnn_layers: 2,
            bins: BinConfig::default(),
            variant: Variant::Full,
            renormalize_mask: true,
            attention_gradient: false,
            bn_eps: 1e-5,
        }
    }
}

/// Strides of P5, P4, P3, P2 relative to the input.
pub const LEVEL_STRIDES: [usize; 4] = [16, 8, 4, 2];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(CoreError::invalid("model config", d));
        if self.heatmap_size == 0 || self.input_size % self.heatmap_size != 0 {
            return bad(format!(
                "heatmap_size {} must divide input_size {}",
                self.heatmap_size, self.input_size
            ));
        }
        if self.input_size % LEVEL_STRIDES[0] != 0 {
            return bad(format!("input_size {} must be a multiple of 16", self.input_size));
        }
        if !self.heatmap_stride().is_power_of_two() {
            return bad(format!("input/heatmap ratio {} must be a power of two", self.heatmap_stride()));
        }
        if self.num_gnn_layers == 0 {
            return bad("num_gnn_layers must be at least 1".into());
        }
        if self.feature_channels == 0 || self.merge_channels == 0 || self.stage_convs == 0 {
            return bad("channel widths and stage_convs must be positive".into());
        }
        if !(self.bn_eps > 0.0) {
            return bad("bn_eps must be positive".into());
        }
        self.bins.validate()
    }

    pub fn heatmap_stride(&self) -> usize {
        self.input_size / self.heatmap_size
    }

    /// Resampling factor from each pyramid level to heatmap resolution.
    pub fn merge_factors(&self) -> [f64; 4] {
        LEVEL_STRIDES.map(|s| s as f64 / self.heatmap_stride() as f64)
    }

    /// Width of the merged multi-scale block.
    pub fn merged_channels(&self) -> usize {
        4 * self.merge_channels
    }
}

#[derive(Debug, Clone)]
struct Merge {
    levels: Vec<(ConvBn, ConvBn)>,
}

#[derive(Debug, Clone)]
enum DepthHead {
    /// Graph (or per-node dense) layers on pooled joint features.
    Nodes {
        layers: Vec<NodeLayer>,
        out: LinearRef,
    },
    /// Dense layers on the globally pooled feature map.
    Global {
        layers: Vec<(LinearRef, params::BnRef)>,
        out: LinearRef,
    },
}

#[derive(Debug, Clone)]
enum NodeLayer {
    Graph {
        w_self: LinearRef,
        w_inter: LinearRef,
        bn: params::BnRef,
    },
    Dense {
        w: LinearRef,
        bn: params::BnRef,
    },
}

#[derive(Debug, Clone)]
struct Arch {
    stages: Vec<Vec<ConvBn>>,
    laterals: Vec<ConvRef>,
    pose_merge: Merge,
    depth_merge: Option<Merge>,
    pose_out: ConvRef,
    depth: DepthHead,
}

/// Multi-scale features, coarse to fine (P5, P4, P3, P2).
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

#[derive(Debug, Clone, Copy)]
pub enum DepthOutput {
    /// Bin probabilities `[B, N_B]` and their expected index `[B, 1]`.
    Bins { probs: Var, b_hat: Var },
    /// Positive normalized depth `[B, 1]`.
    Direct { d_hat: Var },
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub pose_features: Var,
    pub depth_features: Var,
    /// Masked heatmaps `[B, J, H·W]`.
    pub heatmaps: Var,
    /// Soft-argmax `(u, v)` in heatmap cells, `[B, J, 2]`.
    pub coords: Var,
    pub depth: DepthOutput,
}

/// A batch of crops. `boxes` are in heatmap cells; `None` skips masking.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub images: Tensor,
    pub boxes: Option<Vec<BoundingBox>>,
}

/// Per-sample inference result.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Joint locations in input-patch pixels.
    pub pose2d_input: Vec<[f64; 2]>,
    /// Joint locations in original image pixels.
    pub pose2d_image: Vec<[f64; 2]>,
    pub bins: BinDistribution,
    pub normalized_depth: f64,
    pub depth: f64,
    pub root3d: [f64; 3],
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct HdNet {
    cfg: ModelConfig,
    skeleton: Skeleton,
    adjacency: AdjacencyMatrix,
    arch: Arch,
    params: ParamStore,
}

impl HdNet {
    pub fn new(cfg: ModelConfig, skeleton: Skeleton, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let adjacency = normalize_adjacency(&build_adjacency(&skeleton))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut rng);
        let arch = build_arch(&cfg, skeleton.num_joints(), &mut b);
        Ok(Self {
            cfg,
            skeleton,
            adjacency,
            arch,
            params: b.finish(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn adjacency(&self) -> &AdjacencyMatrix {
        &self.adjacency
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_joints(&self) -> usize {
        self.skeleton.num_joints()
    }

    /// Binds the parameters onto `tape` for one forward pass.
    pub fn graph<'a>(&'a self, tape: &'a mut Tape, training: bool, grads: bool) -> Graph<'a> {
        Graph::bind(tape, &self.params, training, grads, self.cfg.bn_eps)
    }

    /// Binds caller-owned parameter leaves, e.g. for finite-difference checks.
    pub fn graph_with<'a>(&'a self, tape: &'a mut Tape, vars: Vec<Var>, training: bool) -> Result<Graph<'a>> {
        Graph::with_vars(tape, &self.params, vars, training, self.cfg.bn_eps)
    }

    /// Indices of the parameters owned by the pose branch.
    pub fn pose_branch_params(&self) -> Vec<usize> {
        let mut ids = merge_params(&self.arch.pose_merge);
        ids.push(self.arch.pose_out.w);
        ids.extend(self.arch.pose_out.b);
        ids
    }

    /// Indices of the parameters owned by the depth branch.
    pub fn depth_branch_params(&self) -> Vec<usize> {
        let mut ids = self.arch.depth_merge.as_ref().map(merge_params).unwrap_or_default();
        let lin = |l: &LinearRef| std::iter::once(l.w).chain(l.b);
        match &self.arch.depth {
            DepthHead::Nodes { layers, out } => {
                for layer in layers {
                    match layer {
                        NodeLayer::Graph { w_self, w_inter, bn } => {
                            ids.extend(lin(w_self).chain(lin(w_inter)));
                            ids.extend([bn.gamma, bn.beta]);
                        }
                        NodeLayer::Dense { w, bn } => {
                            ids.extend(lin(w));
                            ids.extend([bn.gamma, bn.beta]);
                        }
                    }
                }
                ids.extend(lin(out));
            }
            DepthHead::Global { layers, out } => {
                for (w, bn) in layers {
                    ids.extend(lin(w));
                    ids.extend([bn.gamma, bn.beta]);
                }
                ids.extend(lin(out));
            }
        }
        ids
    }

    pub fn backbone_forward(&self, g: &mut Graph, image: Var) -> Result<FeaturePyramid> {
        let shape = g.tape.shape(image).to_vec();
        let s = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(CoreError::invalid(
                "image batch",
                format!("expected [B, 3, {s}, {s}], got {shape:?}"),
            ));
        }
        let mut x = image;
        let mut c = Vec::with_capacity(4);
        for stage in &self.arch.stages {
            for &layer in stage {
                x = g.conv_bn_relu(layer, x)?;
            }
            c.push(x);
        }
        // Top-down: P5 from C5, then Pk = lateral(Ck) + up2(P(k+1)).
        let mut p = g.conv(self.arch.laterals[3], c[3])?;
        let mut levels = vec![p];
        for k in (0..3).rev() {
            let lat = g.conv(self.arch.laterals[k], c[k])?;
            let up = g.tape.upsample_nearest(p, 2)?;
            p = g.tape.add(lat, up)?;
            levels.push(p);
        }
        Ok(FeaturePyramid {
            levels: [levels[0], levels[1], levels[2], levels[3]],
        })
    }

    fn merge(&self, g: &mut Graph, m: &Merge, pyr: &FeaturePyramid) -> Result<Var> {
        let hm = self.cfg.heatmap_size;
        let stride = self.cfg.heatmap_stride();
        let mut parts = Vec::with_capacity(4);
        for ((first, second), (&level, &ls)) in m.levels.iter().zip(pyr.levels.iter().zip(&LEVEL_STRIDES)) {
            let mut y = g.conv_bn_relu(*first, level)?;
            y = match ls.cmp(&stride) {
                std::cmp::Ordering::Greater => g.tape.upsample_bilinear(y, ls / stride)?,
                std::cmp::Ordering::Less => g.tape.avg_pool(y, stride / ls)?,
                std::cmp::Ordering::Equal => y,
            };
            let got = &g.tape.shape(y)[2..];
            if got != [hm, hm] {
                return Err(CoreError::invalid(
                    "multi-scale merge",
                    format!("level resampled to {got:?}, expected [{hm}, {hm}]"),
                ));
            }
            parts.push(g.conv_bn_relu(*second, y)?);
        }
        Ok(g.tape.concat(&parts, 1)?)
    }

    /// `(F_pose, F_depth)`; the shared-branch variant returns the same node twice.
    pub fn multiscale_merge(&self, g: &mut Graph, pyr: &FeaturePyramid) -> Result<(Var, Var)> {
        let pose = self.merge(g, &self.arch.pose_merge, pyr)?;
        let depth = match &self.arch.depth_merge {
            Some(m) => self.merge(g, m, pyr)?,
            None => pose,
        };
        Ok((pose, depth))
    }

    /// Spatially normalized heatmaps `[B, J, H·W]`.
    pub fn pose_branch(&self, g: &mut Graph, f_pose: Var) -> Result<Var> {
        let logits = g.conv(self.arch.pose_out, f_pose)?;
        heads::spatial_softmax(g.tape, logits)
    }

    pub fn depth_head(&self, g: &mut Graph, heatmaps: Var, f_depth: Var) -> Result<DepthOutput> {
        let pooled = match &self.arch.depth {
            DepthHead::Nodes { layers, .. } => {
                let hm = if self.cfg.attention_gradient {
                    heatmaps
                } else {
                    g.tape.detach(heatmaps)
                };
                let mut x = heads::attention_pool(g.tape, hm, f_depth)?;
                for layer in layers {
                    x = match *layer {
                        NodeLayer::Graph { w_self, w_inter, bn } => {
                            let (ws, wi) = (g.param(w_self.w), g.param(w_inter.w));
                            let y = heads::gnn_mix(g.tape, x, &self.adjacency, ws, wi)?;
                            g.bn_relu_last(bn, y)?
                        }
                        NodeLayer::Dense { w, bn } => {
                            let y = g.linear(w, x)?;
                            g.bn_relu_last(bn, y)?
                        }
                    };
                }
                g.tape.mean_axis(x, 1)?
            }
            DepthHead::Global { layers, .. } => {
                let mut x = g.tape.global_avg_pool(f_depth)?;
                for &(w, bn) in layers {
                    let y = g.linear(w, x)?;
                    x = g.bn_relu_last(bn, y)?;
                }
                x
            }
        };
        let out = match &self.arch.depth {
            DepthHead::Nodes { out, .. } | DepthHead::Global { out, .. } => *out,
        };
        let logits = g.linear(out, pooled)?;
        if self.cfg.variant == Variant::DirectRegression {
            return Ok(DepthOutput::Direct {
                d_hat: g.tape.softplus(logits)?,
            });
        }
        let probs = g.tape.softmax(logits, 1)?;
        let b_hat = heads::bin_expectation(g.tape, probs)?;
        Ok(DepthOutput::Bins { probs, b_hat })
    }

    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<ForwardOutput> {
        let image = g.tape.constant(input.images.clone());
        let pyramid = self.backbone_forward(g, image)?;
        let (pose_features, depth_features) = self.multiscale_merge(g, &pyramid)?;
        let mut heatmaps = self.pose_branch(g, pose_features)?;
        let batch = input.images.shape()[0];
        let h = self.cfg.heatmap_size;
        if let Some(boxes) = &input.boxes {
            if boxes.len() != batch {
                return Err(CoreError::invalid("model input", format!("{} boxes for batch {batch}", boxes.len())));
            }
            let mask = heads::heatmap_mask(boxes, self.num_joints(), h, h)?;
            heatmaps = heads::mask_heatmaps(g.tape, heatmaps, &mask, self.cfg.renormalize_mask)?;
        }
        let coords = heads::soft_argmax_2d(g.tape, heatmaps, h, h)?;
        let depth = self.depth_head(g, heatmaps, depth_features)?;
        Ok(ForwardOutput {
            pyramid,
            pose_features,
            depth_features,
            heatmaps,
            coords,
            depth,
        })
    }

    /// Inference in eval mode. `crops` map input pixels to image pixels.
    pub fn predict(
        &self,
        input: &ModelInput,
        crops: &[CropTransform],
        cameras: &[CameraIntrinsics],
    ) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let mut g = self.graph(&mut tape, false, false);
        let out = self.forward(&mut g, input)?;
        self.decode(&tape, &out, crops, cameras)
    }

    /// Turns a forward pass into per-sample predictions.
    pub fn decode(
        &self,
        tape: &Tape,
        out: &ForwardOutput,
        crops: &[CropTransform],
        cameras: &[CameraIntrinsics],
    ) -> Result<Vec<Prediction>> {
        let j = self.num_joints();
        let coords = tape.value(out.coords).values();
        let batch = coords.len() / (2 * j);
        if crops.len() != batch || cameras.len() != batch {
            return Err(CoreError::invalid(
                "decode",
                format!("{} crops and {} cameras for batch {batch}", crops.len(), cameras.len()),
            ));
        }
        let stride = self.cfg.heatmap_stride() as f64;
        let bins_cfg = &self.cfg.bins;
        (0..batch)
            .map(|i| {
                let pose2d_input: Vec<[f64; 2]> = coords[i * 2 * j..][..2 * j]
                    .chunks(2)
                    .map(|c| [c[0] * stride, c[1] * stride])
                    .collect();
                let pose2d_image: Vec<[f64; 2]> = pose2d_input.iter().map(|&p| crops[i].to_image(p)).collect();
                let (bins, normalized_depth, score) = match out.depth {
                    DepthOutput::Bins { probs, .. } => {
                        let n = bins_cfg.num_bins;
                        let dist = BinDistribution::new(tape.value(probs).values()[i * n..][..n].to_vec())?;
                        let d_hat = bins_cfg.normalized_depth_at(dist.expected_index());
                        let score = dist.confidence();
                        (dist, d_hat, score)
                    }
                    DepthOutput::Direct { d_hat } => {
                        let d = tape.value(d_hat).values()[i].clamp(bins_cfg.alpha, bins_cfg.beta);
                        let dist = encode_bins(bin_index(d, bins_cfg)?.b, bins_cfg.num_bins)?;
                        (dist, d, 1.0)
                    }
                };
                let cam = &cameras[i];
                let depth = normalized_depth * cam.focal();
                let root = pose2d_image[self.skeleton.root_index()];
                let root3d = cam.back_project(root[0], root[1], depth)?;
                Ok(Prediction {
                    pose2d_input,
                    pose2d_image,
                    bins,
                    normalized_depth,
                    depth,
                    root3d,
                    score,
                })
            })
            .collect()
    }
}

fn merge_params(m: &Merge) -> Vec<usize> {
    let mut ids = Vec::new();
    for (a, b) in &m.levels {
        for l in [a, b] {
            ids.push(l.conv.w);
            ids.extend(l.conv.b);
            ids.extend([l.bn.gamma, l.bn.beta]);
        }
    }
    ids
}

fn build_merge(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Merge {
    let (cin, cout) = (cfg.feature_channels, cfg.merge_channels);
    let levels = (0..4)
        .map(|l| {
            let lvl = 5 - l;
            (
                b.conv_bn(&format!("{name}.p{lvl}.reduce"), cin, cout, 1, Conv2dSpec::new(1, 0)),
                b.conv_bn(&format!("{name}.p{lvl}.refine"), cout, cout, 3, Conv2dSpec::same(3)),
            )
        })
        .collect();
    Merge { levels }
}

fn build_arch(cfg: &ModelConfig, joints: usize, b: &mut Builder) -> Arch {
    let w = cfg.feature_channels;
    let stages = (0..4)
        .map(|s| {
            (0..cfg.stage_convs)
                .map(|k| {
                    let cin = if s == 0 && k == 0 { 3 } else { w };
                    let spec = if k == 0 { Conv2dSpec::new(2, 1) } else { Conv2dSpec::same(3) };
                    b.conv_bn(&format!("backbone.c{}.{k}", s + 2), cin, w, 3, spec)
                })
                .collect()
        })
        .collect();
    let laterals = (0..4)
        .map(|s| b.conv(&format!("fpn.lateral{}", s + 2), w, w, 1, Conv2dSpec::new(1, 0), true, 1.0))
        .collect();
    let pose_merge = build_merge(b, "pose_merge", cfg);
    let depth_merge = (cfg.variant != Variant::SharedBranch).then(|| build_merge(b, "depth_merge", cfg));
    let merged = cfg.merged_channels();
    let pose_out = b.conv("pose_head", merged, joints, 1, Conv2dSpec::new(1, 0), true, 1.0);
    let out_dim = if cfg.variant == Variant::DirectRegression { 1 } else { cfg.bins.num_bins };
    let depth = match cfg.variant {
        Variant::NoHmPooling => DepthHead::Global {
            layers: (0..cfg.num_gnn_layers)
                .map(|l| {
                    (
                        b.relu_linear(&format!("depth.fc{l}"), merged, merged),
                        b.bn(&format!("depth.fc{l}.bn"), merged),
                    )
                })
                .collect(),
            out: b.linear("depth.out", merged, out_dim, true, 1.0),
        },
        Variant::NoGnn => DepthHead::Nodes {
            layers: (0..cfg.num_gnn_layers)
                .map(|l| NodeLayer::Dense {
                    w: b.relu_linear(&format!("depth.node_fc{l}"), merged, merged),
                    bn: b.bn(&format!("depth.node_fc{l}.bn"), merged),
                })
                .collect(),
            out: b.linear("depth.out", merged, out_dim, true, 1.0),
        },
        Variant::Full | Variant::DirectRegression | Variant::SharedBranch => DepthHead::Nodes {
            layers: (0..cfg.num_gnn_layers)
                .map(|l| NodeLayer::Graph {
                    w_self: b.relu_linear(&format!("depth.gnn{l}.self"), merged, merged),
                    w_inter: b.relu_linear(&format!("depth.gnn{l}.inter"), merged, merged),
                    bn: b.bn(&format!("depth.gnn{l}.bn"), merged),
                })
                .collect(),
            out: b.linear("depth.out", merged, out_dim, true, 1.0),
        },
    };
    Arch {
        stages,
        laterals,
        pose_merge,
        depth_merge,
        pose_out,
        depth,
    }
}
