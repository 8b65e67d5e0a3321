//! Seeded multi-person stick-figure scenes with exact pinhole ground truth.
//!
//! Cameras describe a full-resolution sensor; images are rendered at
//! `1 / pixel_scale` of it. All pixel coordinates in samples and on disk are
//! full-resolution ("native") pixels, with pixel centres on integers.

mod crop;
mod dataset;
mod heatmap;
pub mod ingest;
mod render;

use std::collections::BTreeMap;

use hdnet_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{bin_index, encode_bins, normalize_depth, BinConfig, BinDistribution, BoundingBox, CameraIntrinsics};
use crate::skeleton::Skeleton;

pub use crop::{crop_and_resize, Crop};
pub use dataset::{
    build_batch, config_hash, person_samples, scene_seed, sha256_hex, Dataset, Manifest, PersonRef, SampleBatch, SceneRecord,
    CODE_VERSION,
};
pub use heatmap::render_gt_heatmaps;
pub use render::joint_radius_px;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Stored image side, in stored pixels.
    pub image_size: usize,
    /// Native pixels per stored pixel; a power of two.
    pub pixel_scale: f64,
    /// Inclusive range of persons per scene.
    pub persons: [usize; 2],
    /// Root depth range in mm, sampled uniformly.
    pub depth_range: [f64; 2],
    /// Focal length range in native pixels; `fx` and `fy` are drawn independently.
    pub focal_range: [f64; 2],
    /// Maximum principal-point offset from the sensor centre, native pixels.
    pub principal_jitter: f64,
    /// Bone length `[mean, std]` in mm, keyed by child joint name.
    pub bone_lengths: BTreeMap<String, [f64; 2]>,
    pub joint_radius_mm: f64,
    pub head_radius_mm: f64,
    pub limb_radius_mm: f64,
    /// Probability that a person may overlap those already placed.
    pub overlap_probability: f64,
    /// Largest allowed box IoU between non-overlapping persons.
    pub max_iou: f64,
    /// Placement attempts per person before giving up.
    pub max_attempts: usize,
    /// Optional skeleton file; the built-in 16-joint skeleton otherwise.
    pub skeleton: Option<std::path::PathBuf>,
}

struct BoneTemplate {
    joint: &'static str,
    /// Rest direction from the parent, body frame (x left, y down, z forward).
    dir: [f64; 3],
    length: [f64; 2],
    /// Std of the isotropic direction perturbation.
    spread: f64,
}

const TEMPLATE: [BoneTemplate; 15] = [
    BoneTemplate { joint: "spine", dir: [0.0, -1.0, 0.0], length: [250.0, 15.0], spread: 0.12 },
    BoneTemplate { joint: "neck", dir: [0.0, -1.0, 0.0], length: [250.0, 15.0], spread: 0.12 },
    BoneTemplate { joint: "head", dir: [0.0, -1.0, 0.0], length: [180.0, 10.0], spread: 0.15 },
    BoneTemplate { joint: "left_shoulder", dir: [1.0, 0.0, 0.0], length: [170.0, 10.0], spread: 0.05 },
    BoneTemplate { joint: "left_elbow", dir: [0.0, 1.0, 0.0], length: [280.0, 15.0], spread: 0.8 },
    BoneTemplate { joint: "left_wrist", dir: [0.0, 1.0, 0.0], length: [250.0, 15.0], spread: 0.8 },
    BoneTemplate { joint: "right_shoulder", dir: [-1.0, 0.0, 0.0], length: [170.0, 10.0], spread: 0.05 },
    BoneTemplate { joint: "right_elbow", dir: [0.0, 1.0, 0.0], length: [280.0, 15.0], spread: 0.8 },
    BoneTemplate { joint: "right_wrist", dir: [0.0, 1.0, 0.0], length: [250.0, 15.0], spread: 0.8 },
    BoneTemplate { joint: "left_hip", dir: [1.0, 0.0, 0.0], length: [110.0, 8.0], spread: 0.05 },
    BoneTemplate { joint: "left_knee", dir: [0.0, 1.0, 0.0], length: [420.0, 20.0], spread: 0.3 },
    BoneTemplate { joint: "left_ankle", dir: [0.0, 1.0, 0.0], length: [400.0, 20.0], spread: 0.3 },
    BoneTemplate { joint: "right_hip", dir: [-1.0, 0.0, 0.0], length: [110.0, 8.0], spread: 0.05 },
    BoneTemplate { joint: "right_knee", dir: [0.0, 1.0, 0.0], length: [420.0, 20.0], spread: 0.3 },
    BoneTemplate { joint: "right_ankle", dir: [0.0, 1.0, 0.0], length: [400.0, 20.0], spread: 0.3 },
];

const UNKNOWN_BONE: [f64; 2] = [200.0, 20.0];

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            pixel_scale: 16.0,
            persons: [1, 3],
            depth_range: [2200.0, 7000.0],
            focal_range: [900.0, 1100.0],
            principal_jitter: 32.0,
            bone_lengths: TEMPLATE.iter().map(|b| (b.joint.to_string(), b.length)).collect(),
            joint_radius_mm: 60.0,
            head_radius_mm: 110.0,
            limb_radius_mm: 30.0,
            overlap_probability: 0.3,
            max_iou: 0.2,
            max_attempts: 100,
            skeleton: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, bins: &BinConfig) -> Result<()> {
        let bad = |d: String| Err(CoreError::invalid("generator config", d));
        if self.image_size < 8 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        let k = self.pixel_scale;
        if !(k >= 1.0 && k.log2().fract() == 0.0) {
            return bad(format!("pixel_scale {k} must be a power of two ≥ 1"));
        }
        if self.persons[0] == 0 || self.persons[0] > self.persons[1] {
            return bad(format!("persons range {:?}", self.persons));
        }
        let [d0, d1] = self.depth_range;
        let [f0, f1] = self.focal_range;
        if !(0.0 < d0 && d0 < d1 && 0.0 < f0 && f0 <= f1) {
            return bad(format!("depth range {:?} / focal range {:?}", self.depth_range, self.focal_range));
        }
        // Every sampled (d, f) must land inside the bin range.
        if d0 < bins.alpha * f1 || d1 > bins.beta * f0 {
            return bad(format!(
                "depth range {:?} mm leaves [α·f, β·f] = [{}, {}] for some focal in {:?}",
                self.depth_range,
                bins.alpha * f1,
                bins.beta * f0,
                self.focal_range
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_probability) || !(0.0..=1.0).contains(&self.max_iou) {
            return bad("overlap_probability and max_iou must lie in [0, 1]".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        for (name, [m, s]) in &self.bone_lengths {
            if !(*m > 0.0 && *s >= 0.0) {
                return bad(format!("bone `{name}` has mean {m} std {s}"));
            }
        }
        if !(self.joint_radius_mm > 0.0 && self.head_radius_mm > 0.0 && self.limb_radius_mm > 0.0) {
            return bad("radii must be positive".into());
        }
        Ok(())
    }

    /// Native sensor side in pixels.
    pub fn native_size(&self) -> f64 {
        self.image_size as f64 * self.pixel_scale
    }

    pub fn load_skeleton(&self) -> Result<Skeleton> {
        match &self.skeleton {
            Some(p) => Skeleton::load(p),
            None => Ok(Skeleton::default_human()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Person {
    /// Camera-space joints, mm.
    pub pose3d: Vec<[f64; 3]>,
    /// Native-pixel projections of `pose3d`.
    pub pose2d: Vec<[f64; 2]>,
    /// Joints outside the image.
    pub truncated: Vec<bool>,
    /// Native-pixel box around the rendered figure.
    pub bbox: BoundingBox,
    pub root_depth: f64,
    /// Continuous bin coordinate of the normalized root depth.
    pub bin_coord: f64,
    pub bin_target: BinDistribution,
    /// The root depth fell outside `[α·f, β·f]` and was clamped for encoding.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `[3, S, S]`, values in `[0, 1]` on a 1/255 grid.
    pub image: Tensor,
    pub persons: Vec<Person>,
    pub camera: CameraIntrinsics,
    pub seed: u64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        [0.0, 1.0, 0.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

/// Root-relative joint offsets (mm) in camera orientation.
fn sample_body(skel: &Skeleton, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let parents = skel.parents();
    let n = skel.num_joints();
    let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let roll = 0.1 * normal(rng);
    let (sy, cy) = yaw.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rotate = |p: [f64; 3]| {
        let x = p[0] * cy + p[2] * sy;
        let z = -p[0] * sy + p[2] * cy;
        let y = p[1];
        [x * cr - y * sr, x * sr + y * cr, z]
    };

    // Place joints in breadth-first order so parents come first.
    let mut order = vec![skel.root_index()];
    let mut k = 0;
    while k < order.len() {
        let j = order[k];
        order.extend((0..n).filter(|&c| parents[c] == Some(j)));
        k += 1;
    }
    let mut pos = vec![[0.0; 3]; n];
    for &j in order.iter().skip(1) {
        let name = skel.joint_names()[j].as_str();
        let template = TEMPLATE.iter().find(|b| b.joint == name);
        let (rest, spread) = match template {
            Some(t) => (t.dir, t.spread),
            None => (normalized([normal(rng), normal(rng), normal(rng)]), 0.0),
        };
        let dir = normalized([
            rest[0] + spread * normal(rng),
            rest[1] + spread * normal(rng),
            rest[2] + spread * normal(rng),
        ]);
        let [mean, std] = cfg
            .bone_lengths
            .get(name)
            .copied()
            .or(template.map(|t| t.length))
            .unwrap_or(UNKNOWN_BONE);
        let len = (mean + std * normal(rng)).max(0.25 * mean);
        let d = rotate(dir);
        let p = pos[parents[j].expect("non-root has a parent")];
        pos[j] = [p[0] + len * d[0], p[1] + len * d[1], p[2] + len * d[2]];
    }
    pos
}

fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = a.width() * a.height() + b.width() * b.height() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Box around the figure including joint disks.
fn figure_box(cfg: &GenConfig, camera: &CameraIntrinsics, pose3d: &[[f64; 3]], pose2d: &[[f64; 2]]) -> Result<BoundingBox> {
    let mut b = BoundingBox::around(pose2d)?;
    for (p3, p2) in pose3d.iter().zip(pose2d) {
        let r = joint_radius_px(cfg.head_radius_mm.max(cfg.joint_radius_mm), camera.focal(), p3[2]);
        b.x_min = b.x_min.min(p2[0] - r);
        b.y_min = b.y_min.min(p2[1] - r);
        b.x_max = b.x_max.max(p2[0] + r);
        b.y_max = b.y_max.max(p2[1] + r);
    }
    Ok(b)
}

/// Deterministic scene for `seed`.
pub fn generate_scene(cfg: &GenConfig, skel: &Skeleton, bins: &BinConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate(bins)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let native = cfg.native_size();
    let centre = (native - cfg.pixel_scale) / 2.0;
    let camera = CameraIntrinsics::new(
        rng.gen_range(cfg.focal_range[0]..=cfg.focal_range[1]),
        rng.gen_range(cfg.focal_range[0]..=cfg.focal_range[1]),
        centre + rng.gen_range(-cfg.principal_jitter..=cfg.principal_jitter),
        centre + rng.gen_range(-cfg.principal_jitter..=cfg.principal_jitter),
    )?;
    let count = rng.gen_range(cfg.persons[0]..=cfg.persons[1]);
    let root = skel.root_index();
    let margin = cfg.pixel_scale;
    let max_coord = native - cfg.pixel_scale;
    let mut persons: Vec<Person> = Vec::with_capacity(count);
    for _ in 0..count {
        // Depth is drawn once per person so placement retries cannot skew its law.
        let depth = rng.gen_range(cfg.depth_range[0]..=cfg.depth_range[1]);
        let may_overlap = rng.gen_bool(cfg.overlap_probability);
        let mut placed = None;
        for _ in 0..cfg.max_attempts {
            let body = sample_body(skel, cfg, &mut rng);
            // Root-centred projection fixes the figure's extent at this depth.
            let rel: Vec<[f64; 2]> = body
                .iter()
                .map(|b| {
                    let z = depth + b[2];
                    [b[0] * camera.fx / z, b[1] * camera.fy / z]
                })
                .collect();
            if body.iter().any(|b| depth + b[2] <= 0.0) {
                continue;
            }
            let ext = BoundingBox::around(&rel)?;
            let pad = joint_radius_px(cfg.head_radius_mm, camera.focal(), depth * 0.8) + margin;
            let (lo_u, hi_u) = (-ext.x_min + pad, max_coord - ext.x_max - pad);
            let (lo_v, hi_v) = (-ext.y_min + pad, max_coord - ext.y_max - pad);
            if !(lo_u < hi_u && lo_v < hi_v) {
                continue;
            }
            let u = rng.gen_range(lo_u..hi_u);
            let v = rng.gen_range(lo_v..hi_v);
            let root3d = camera.back_project(u, v, depth)?;
            let pose3d: Vec<[f64; 3]> = body
                .iter()
                .map(|b| [root3d[0] + b[0], root3d[1] + b[1], root3d[2] + b[2]])
                .collect();
            let pose2d = pose3d.iter().map(|&p| camera.project(p)).collect::<Result<Vec<_>>>()?;
            let bbox = figure_box(cfg, &camera, &pose3d, &pose2d)?;
            if !may_overlap && persons.iter().any(|q| iou(&q.bbox, &bbox) > cfg.max_iou) {
                continue;
            }
            placed = Some((pose3d, pose2d, bbox));
            break;
        }
        let Some((pose3d, pose2d, bbox)) = placed else {
            return Err(CoreError::Placement {
                persons: count,
                attempts: cfg.max_attempts,
            });
        };
        let root_depth = pose3d[root][2];
        let bi = bin_index(normalize_depth(root_depth, &camera)?, bins)?;
        let truncated = pose2d
            .iter()
            .map(|p| !(0.0..=max_coord).contains(&p[0]) || !(0.0..=max_coord).contains(&p[1]))
            .collect();
        persons.push(Person {
            bin_target: encode_bins(bi.b, bins.num_bins)?,
            bin_coord: bi.b,
            clamped: bi.clamped,
            pose3d,
            pose2d,
            truncated,
            bbox,
            root_depth,
        });
    }
    let image = render::render_scene(cfg, skel, &camera, &persons, &mut rng);
    Ok(SceneSample {
        image,
        persons,
        camera,
        seed,
    })
}
