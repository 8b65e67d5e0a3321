use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalConfig;
use crate::error::{CoreError, Result};
use crate::metrics::{
    image_pck, matched_roots, mrpe, root_ap_ar, ImageEval, MatchMode, PckMode, RootPrediction, AP_THRESHOLDS,
    PCK_THRESHOLD,
};
use crate::model::HdNet;
use crate::synth::{build_batch, person_samples, Dataset, PersonRef};

/// Where predicted root-relative poses come from. The network estimates the
/// root only; 3DPCK needs a full pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelativePose {
    /// No pose; 3DPCK columns are left empty.
    None,
    /// Ground-truth offsets from the root, placed at the predicted root.
    GroundTruth,
}

/// One line of a predictions JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image_id: String,
    pub score: f64,
    pub root3d: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose3d: Option<Vec<[f64; 3]>>,
}

/// Top-down inference with ground-truth boxes, in dataset person order.
/// Batches run on the current rayon pool; the output order is fixed.
pub fn predict_dataset(
    model: &HdNet,
    ds: &Dataset,
    cfg: &EvalConfig,
    limit: Option<usize>,
) -> Result<Vec<PredictionRecord>> {
    if model.skeleton() != &ds.skeleton {
        return Err(CoreError::Data("checkpoint skeleton does not match the dataset skeleton".into()));
    }
    let mut refs = person_samples(ds);
    if let Some(n) = limit {
        refs.truncate(n);
    }
    let root = ds.skeleton.root_index();
    let chunks: Vec<Vec<PredictionRecord>> = refs
        .par_chunks(cfg.batch_size)
        .map(|chunk| {
            // Targets are built too; the sigma does not affect inference.
            let batch = build_batch(ds, chunk, model.config(), 1.0)?;
            let preds = model.predict(&batch.input, &batch.crops, &batch.cameras)?;
            Ok(chunk
                .iter()
                .zip(preds)
                .map(|(r, p)| record(ds, r, p.root3d, p.score, root, cfg.relative_pose))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Every ground-truth person as a unit-score prediction (an oracle baseline).
pub fn ground_truth_predictions(ds: &Dataset) -> Vec<PredictionRecord> {
    let root = ds.skeleton.root_index();
    person_samples(ds)
        .iter()
        .map(|r| {
            let gt = &ds.scenes[r.scene].persons[r.person].pose3d;
            record(ds, r, gt[root], 1.0, root, RelativePose::GroundTruth)
        })
        .collect()
}

fn record(ds: &Dataset, r: &PersonRef, root3d: [f64; 3], score: f64, root: usize, rel: RelativePose) -> PredictionRecord {
    let scene = &ds.scenes[r.scene];
    let pose3d = match rel {
        RelativePose::None => None,
        RelativePose::GroundTruth => {
            let gt = &scene.persons[r.person].pose3d;
            Some(
                gt.iter()
                    .map(|p| std::array::from_fn(|k| root3d[k] + (p[k] - gt[root][k])))
                    .collect(),
            )
        }
    };
    PredictionRecord {
        image_id: scene.id.clone(),
        score,
        root3d,
        pose3d,
    }
}

/// Median relative root-depth error of the first `val_persons` persons,
/// paired with their own ground truth.
pub(super) fn validation_error(model: &HdNet, ds: &Dataset, cfg: &EvalConfig) -> Result<f64> {
    let cfg = EvalConfig {
        relative_pose: RelativePose::None,
        ..cfg.clone()
    };
    let limit = (cfg.val_persons > 0).then_some(cfg.val_persons);
    let preds = predict_dataset(model, ds, &cfg, limit)?;
    let refs = person_samples(ds);
    let mut errs: Vec<f64> = preds
        .iter()
        .zip(&refs)
        .map(|(p, r)| {
            let d = ds.scenes[r.scene].persons[r.person].root_depth;
            (p.root3d[2] - d).abs() / d
        })
        .collect();
    Ok(median(&mut errs))
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?);
    for p in preds {
        serde_json::to_writer(&mut f, p).expect("record serializes");
        f.write_all(b"\n").map_err(|e| CoreError::io(path, e))?;
    }
    f.flush().map_err(|e| CoreError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| CoreError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        RootPrediction {
            root3d: rec.root3d,
            score: rec.score,
            pose3d: rec.pose3d.clone(),
        }
        .validate()
        .map_err(|e| CoreError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn thr_name(t: f64) -> String {
    format!("{}", t.round() as i64)
}

/// Every evaluation column, in table order.
pub fn metric_columns() -> Vec<String> {
    let mut cols: Vec<String> = ["mrpe", "mrpe_x", "mrpe_y", "mrpe_z"].map(String::from).to_vec();
    cols.extend(AP_THRESHOLDS.iter().map(|&t| format!("ap_{}", thr_name(t))));
    cols.extend(AP_THRESHOLDS.iter().map(|&t| format!("ar_{}", thr_name(t))));
    cols.extend(["pck_abs", "pck_rel", "depth_rel_median", "matched", "persons"].map(String::from));
    cols
}

/// Resolves requested names (exact columns or the families `mrpe`, `ap`,
/// `ar`, `pck`, `depth`) to columns in table order.
pub fn select_columns(requested: &[String]) -> Result<Vec<String>> {
    let all = metric_columns();
    if requested.is_empty() {
        return Ok(all);
    }
    let mut keep = vec![false; all.len()];
    for r in requested {
        let r = r.trim();
        let mut hit = false;
        for (i, c) in all.iter().enumerate() {
            let family = c.split('_').next().unwrap_or(c);
            if c == r || family == r {
                keep[i] = true;
                hit = true;
            }
        }
        if !hit {
            return Err(CoreError::Config(format!(
                "unknown metric `{r}` (known: {}, or a family mrpe/ap/ar/pck/depth)",
                all.join(", ")
            )));
        }
    }
    Ok(all.into_iter().zip(keep).filter(|(_, k)| *k).map(|(c, _)| c).collect())
}

/// Metric values per sequence, with `all` first.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<(String, BTreeMap<String, f64>)>,
}

impl EvalReport {
    pub fn overall(&self) -> &BTreeMap<String, f64> {
        &self.rows[0].1
    }

    /// CSV with header `variant,sequence,<columns>`; missing values are empty.
    pub fn to_csv(&self, variant: &str, columns: &[String]) -> String {
        let mut s = format!("variant,sequence,{}\n", columns.join(","));
        for (seq, vals) in &self.rows {
            let cells: Vec<String> = columns
                .iter()
                .map(|c| vals.get(c).filter(|v| v.is_finite()).map_or(String::new(), |v| format!("{v}")))
                .collect();
            s.push_str(&format!("{variant},{seq},{}\n", cells.join(",")));
        }
        s
    }
}

fn image_evals(ds: &Dataset, preds: &[PredictionRecord]) -> Result<Vec<ImageEval>> {
    let index: BTreeMap<&str, usize> = ds.scenes.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let root = ds.skeleton.root_index();
    let mut images: Vec<ImageEval> = ds
        .scenes
        .iter()
        .map(|s| ImageEval {
            preds: Vec::new(),
            gts: s.persons.iter().map(|p| p.pose3d[root]).collect(),
            gt_poses: s.persons.iter().map(|p| p.pose3d.clone()).collect(),
        })
        .collect();
    for p in preds {
        let &i = index
            .get(p.image_id.as_str())
            .ok_or_else(|| CoreError::Data(format!("prediction for unknown image `{}`", p.image_id)))?;
        if let Some(pose) = &p.pose3d {
            if pose.len() != ds.skeleton.num_joints() {
                return Err(CoreError::Data(format!(
                    "prediction for `{}` has {} joints, skeleton has {}",
                    p.image_id,
                    pose.len(),
                    ds.skeleton.num_joints()
                )));
            }
        }
        images[i].preds.push(RootPrediction {
            root3d: p.root3d,
            score: p.score,
            pose3d: p.pose3d.clone(),
        });
    }
    Ok(images)
}

fn sequence_metrics(images: &[ImageEval], root: usize, mode: MatchMode) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    let pairs = matched_roots(images, mode);
    let persons: usize = images.iter().map(|im| im.gts.len()).sum();
    m.insert("persons".into(), persons as f64);
    m.insert("matched".into(), pairs.len() as f64);
    if let Ok(e) = mrpe(&pairs) {
        m.insert("mrpe".into(), e.mrpe);
        m.insert("mrpe_x".into(), e.x);
        m.insert("mrpe_y".into(), e.y);
        m.insert("mrpe_z".into(), e.z);
        let mut rel: Vec<f64> = pairs.iter().map(|(p, g)| (p[2] - g[2]).abs() / g[2]).collect();
        m.insert("depth_rel_median".into(), median(&mut rel));
    }
    for r in root_ap_ar(images, &AP_THRESHOLDS, mode) {
        m.insert(format!("ap_{}", thr_name(r.threshold)), r.ap);
        m.insert(format!("ar_{}", thr_name(r.threshold)), r.ar);
    }
    for (name, pm) in [("pck_abs", PckMode::Absolute), ("pck_rel", PckMode::RootAligned)] {
        if let Ok(v) = image_pck(images, root, pm, PCK_THRESHOLD, mode) {
            m.insert(name.into(), v);
        }
    }
    m
}

/// Scores predictions against a split: one row for all scenes, then one per
/// run of `sequence_length` consecutive scenes.
pub fn evaluate(ds: &Dataset, preds: &[PredictionRecord], cfg: &EvalConfig) -> Result<EvalReport> {
    let images = image_evals(ds, preds)?;
    let root = ds.skeleton.root_index();
    let mut rows = vec![("all".to_string(), sequence_metrics(&images, root, cfg.matching))];
    let seqs: Vec<(String, BTreeMap<String, f64>)> = images
        .par_chunks(cfg.sequence_length)
        .enumerate()
        .map(|(i, chunk)| (format!("seq{:02}", i + 1), sequence_metrics(chunk, root, cfg.matching)))
        .collect();
    rows.extend(seqs);
    Ok(EvalReport { rows })
}
