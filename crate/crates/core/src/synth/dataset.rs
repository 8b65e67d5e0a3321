//! On-disk dataset split and batch assembly.
//!
//! A split directory holds:
//!
//! * `manifest.json`: [`Manifest`], including the generator config, its
//!   hash, the base seed, the code version and a hash of the contents.
//! * `index.jsonl`: one [`SceneRecord`] per line, in scene order.
//! * `images/<id>.u8`: the image as a flat `3 × S × S` array of bytes,
//!   channel-major, value `v / 255`.

use std::fs;
use std::io::Write;
use std::path::Path;

use hdnet_autodiff::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{crop_and_resize, generate_scene, render_gt_heatmaps, GenConfig, Person, SceneSample};
use crate::error::{CoreError, Result};
use crate::geometry::{BinConfig, BoundingBox, CameraIntrinsics, CropTransform};
use crate::losses::Targets;
use crate::model::{ModelConfig, ModelInput};
use crate::skeleton::Skeleton;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
const FORMAT_VERSION: u32 = 1;

/// Seed of scene `index` in a split generated from `base`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a golden-ratio stride.
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct HashedConfig<'a> {
    gen: &'a GenConfig,
    bins: &'a BinConfig,
    skeleton: String,
}

/// Hash of everything that determines the generated content apart from the seed.
pub fn config_hash(gen: &GenConfig, bins: &BinConfig, skeleton: &Skeleton) -> String {
    let cfg = HashedConfig {
        gen,
        bins,
        skeleton: skeleton.to_toml_string(),
    };
    sha256_hex(&serde_json::to_vec(&cfg).expect("config serializes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub split: String,
    pub count: usize,
    pub seed: u64,
    pub code_version: String,
    pub config_hash: String,
    /// SHA-256 over `index.jsonl` followed by every image file in order.
    pub content_hash: String,
    pub image_size: usize,
    pub pixel_scale: f64,
    pub gen: GenConfig,
    pub bins: BinConfig,
    pub skeleton: String,
}

/// One line of `index.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: String,
    pub seed: u64,
    pub image: String,
    pub camera: CameraIntrinsics,
    pub persons: Vec<Person>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub skeleton: Skeleton,
    pub scenes: Vec<SceneRecord>,
    images: Vec<Vec<u8>>,
}

/// Identifies one person in one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PersonRef {
    pub scene: usize,
    pub person: usize,
}

pub fn person_samples(ds: &Dataset) -> Vec<PersonRef> {
    ds.scenes
        .iter()
        .enumerate()
        .flat_map(|(scene, s)| (0..s.persons.len()).map(move |person| PersonRef { scene, person }))
        .collect()
}

fn quantize(image: &Tensor) -> Vec<u8> {
    image.values().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

impl Dataset {
    /// Generates `count` scenes; scene `i` uses `scene_seed(seed, i)`.
    /// Runs on the current rayon pool; order does not depend on it.
    pub fn generate(gen: &GenConfig, bins: &BinConfig, skeleton: &Skeleton, split: &str, count: usize, seed: u64) -> Result<Self> {
        gen.validate(bins)?;
        bins.validate()?;
        let samples: Vec<SceneSample> = (0..count)
            .into_par_iter()
            .map(|i| generate_scene(gen, skeleton, bins, scene_seed(seed, i as u64)))
            .collect::<Result<_>>()?;
        let mut scenes = Vec::with_capacity(count);
        let mut images = Vec::with_capacity(count);
        for (i, s) in samples.into_iter().enumerate() {
            let id = format!("{i:06}");
            scenes.push(SceneRecord {
                image: format!("images/{id}.u8"),
                id,
                seed: s.seed,
                camera: s.camera,
                persons: s.persons,
            });
            images.push(quantize(&s.image));
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            split: split.to_string(),
            count,
            seed,
            code_version: CODE_VERSION.to_string(),
            config_hash: config_hash(gen, bins, skeleton),
            content_hash: String::new(),
            image_size: gen.image_size,
            pixel_scale: gen.pixel_scale,
            gen: gen.clone(),
            bins: *bins,
            skeleton: skeleton.to_toml_string(),
        };
        let mut ds = Self {
            manifest,
            skeleton: skeleton.clone(),
            scenes,
            images,
        };
        ds.manifest.content_hash = ds.content_hash();
        Ok(ds)
    }

    fn index_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.scenes {
            serde_json::to_writer(&mut out, s).expect("record serializes");
            out.push(b'\n');
        }
        out
    }

    fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.index_bytes());
        for img in &self.images {
            h.update(img);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn bins(&self) -> &BinConfig {
        &self.manifest.bins
    }

    /// Hash of the serialized manifest; equal for equal config, seed and code.
    pub fn manifest_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.manifest).expect("manifest serializes"))
    }

    /// Scene `i`'s image, `[3, S, S]`.
    pub fn image(&self, i: usize) -> Tensor {
        let s = self.manifest.image_size;
        let values = self.images[i].iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(&[3, s, s], values).expect("validated on load")
    }

    pub fn scene(&self, i: usize) -> SceneSample {
        let r = &self.scenes[i];
        SceneSample {
            image: self.image(i),
            persons: r.persons.clone(),
            camera: r.camera,
            seed: r.seed,
        }
    }

    /// Writes the split into `dir`, which must be absent or empty unless `force`.
    pub fn write(&self, dir: &Path, force: bool) -> Result<()> {
        if dir.exists() {
            let occupied = fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?.next().is_some();
            if occupied && !force {
                return Err(CoreError::Data(format!(
                    "output directory {} is not empty (pass --force to overwrite)",
                    dir.display()
                )));
            }
            if occupied {
                for stale in ["manifest.json", "index.jsonl"] {
                    let p = dir.join(stale);
                    if p.exists() {
                        fs::remove_file(&p).map_err(|e| CoreError::io(&p, e))?;
                    }
                }
                let imgs = dir.join("images");
                if imgs.exists() {
                    fs::remove_dir_all(&imgs).map_err(|e| CoreError::io(&imgs, e))?;
                }
            }
        }
        let imgs = dir.join("images");
        fs::create_dir_all(&imgs).map_err(|e| CoreError::io(&imgs, e))?;
        for (r, bytes) in self.scenes.iter().zip(&self.images) {
            let p = dir.join(&r.image);
            fs::write(&p, bytes).map_err(|e| CoreError::io(&p, e))?;
        }
        let p = dir.join("index.jsonl");
        fs::write(&p, self.index_bytes()).map_err(|e| CoreError::io(&p, e))?;
        // The manifest goes last so a complete manifest implies a complete split.
        let p = dir.join("manifest.json");
        let mut f = fs::File::create(&p).map_err(|e| CoreError::io(&p, e))?;
        serde_json::to_writer_pretty(&mut f, &self.manifest).expect("manifest serializes");
        f.write_all(b"\n").map_err(|e| CoreError::io(&p, e))?;
        Ok(())
    }

    /// Loads a split and verifies its content hash.
    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join("manifest.json");
        let text = fs::read_to_string(&p).map_err(|e| CoreError::io(&p, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| CoreError::Data(format!("{}: {e}", p.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CoreError::Data(format!("unsupported dataset format {}", manifest.format_version)));
        }
        let skeleton = Skeleton::from_toml_str(&manifest.skeleton)?;
        let p = dir.join("index.jsonl");
        let text = fs::read_to_string(&p).map_err(|e| CoreError::io(&p, e))?;
        let scenes = text
            .lines()
            .enumerate()
            .map(|(n, line)| {
                super::ingest::parse_index_line(line, skeleton.num_joints())
                    .map_err(|e| CoreError::Data(format!("{}:{}: {e}", p.display(), n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if scenes.len() != manifest.count {
            return Err(CoreError::Data(format!(
                "index has {} scenes, manifest says {}",
                scenes.len(),
                manifest.count
            )));
        }
        let want = 3 * manifest.image_size * manifest.image_size;
        let images = scenes
            .iter()
            .map(|r| {
                let p = dir.join(&r.image);
                let bytes = fs::read(&p).map_err(|e| CoreError::io(&p, e))?;
                if bytes.len() != want {
                    return Err(CoreError::Data(format!("{}: {} bytes, expected {want}", p.display(), bytes.len())));
                }
                Ok(bytes)
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self {
            manifest,
            skeleton,
            scenes,
            images,
        };
        let hash = ds.content_hash();
        if hash != ds.manifest.content_hash {
            return Err(CoreError::Data(format!(
                "content hash mismatch in {} (manifest {}, files {hash})",
                dir.display(),
                ds.manifest.content_hash
            )));
        }
        Ok(ds)
    }
}

/// Model input and supervision for a list of persons.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub input: ModelInput,
    pub targets: Targets,
    /// Input pixel → native image pixel, per sample.
    pub crops: Vec<CropTransform>,
    pub cameras: Vec<CameraIntrinsics>,
    pub refs: Vec<PersonRef>,
}

/// Cuts one patch per person, centred on its box, and renders the targets.
/// `sigma` is the target Gaussian width in heatmap cells.
pub fn build_batch(ds: &Dataset, refs: &[PersonRef], model: &ModelConfig, sigma: f64) -> Result<SampleBatch> {
    let p = model.input_size;
    let h = model.heatmap_size;
    let stride = model.heatmap_stride() as f64;
    let j = ds.skeleton.num_joints();
    let n = model.bins.num_bins;
    if ds.bins().num_bins != n {
        return Err(CoreError::Data(format!("dataset has {} bins, model {}", ds.bins().num_bins, n)));
    }
    let k = ds.manifest.pixel_scale;
    let mut images = Vec::with_capacity(refs.len() * 3 * p * p);
    let mut boxes = Vec::with_capacity(refs.len());
    let mut heatmaps = Vec::with_capacity(refs.len() * j * h * h);
    let mut coords = Vec::with_capacity(refs.len() * j * 2);
    let mut visible = Vec::with_capacity(refs.len() * j * 2);
    let mut bins = Vec::with_capacity(refs.len() * n);
    let mut b = Vec::with_capacity(refs.len());
    let mut d_hat = Vec::with_capacity(refs.len());
    let mut crops = Vec::with_capacity(refs.len());
    let mut cameras = Vec::with_capacity(refs.len());
    for r in refs {
        let scene = &ds.scenes[r.scene];
        let person = &scene.persons[r.person];
        let crop = crop_and_resize(&ds.image(r.scene), person.bbox.center(), p, k)?;
        images.extend_from_slice(crop.patch.values());
        // Heatmap cell → native pixel.
        let to_cells = CropTransform {
            scale: crop.transform.scale * stride,
            offset: crop.transform.offset,
        };
        let cells: Vec<[f64; 2]> = person.pose2d.iter().map(|&q| to_cells.to_local(q)).collect();
        let bbox = person.bbox.to_local(&to_cells).expanded(1.0);
        boxes.push(BoundingBox::new(
            bbox.x_min.max(0.0),
            bbox.y_min.max(0.0),
            bbox.x_max.min((h - 1) as f64),
            bbox.y_max.min((h - 1) as f64),
        )?);
        let (hm, trunc) = render_gt_heatmaps(&cells, h, h, sigma)?;
        heatmaps.extend_from_slice(&hm.values);
        for (c, t) in cells.iter().zip(&trunc) {
            coords.extend_from_slice(c);
            let v = if *t { 0.0 } else { 1.0 };
            visible.extend_from_slice(&[v, v]);
        }
        bins.extend_from_slice(person.bin_target.weights());
        b.push(person.bin_coord);
        d_hat.push(person.root_depth / scene.camera.focal());
        crops.push(crop.transform);
        cameras.push(scene.camera);
    }
    let bsz = refs.len();
    Ok(SampleBatch {
        input: ModelInput {
            images: Tensor::new(&[bsz, 3, p, p], images)?,
            boxes: Some(boxes),
        },
        targets: Targets {
            heatmaps: Tensor::new(&[bsz, j, h * h], heatmaps)?,
            coords: Tensor::new(&[bsz, j, 2], coords.clone())?,
            visible: Tensor::new(&[bsz, j, 2], visible)?,
            bins: Tensor::new(&[bsz, n], bins)?,
            b: Tensor::new(&[bsz, 1], b)?,
            d_hat: Tensor::new(&[bsz, 1], d_hat)?,
        },
        crops,
        cameras,
        refs: refs.to_vec(),
    })
}
