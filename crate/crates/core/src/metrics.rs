//! Root localization and pose accuracy metrics.
//!
//! All distances are in mm. A prediction within a threshold counts when its
//! distance is strictly smaller than the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Default AP/AR thresholds, mm.
pub const AP_THRESHOLDS: [f64; 4] = [250.0, 200.0, 150.0, 100.0];
/// 3DPCK joint threshold, mm.
pub const PCK_THRESHOLD: f64 = 150.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootPrediction {
    pub root3d: [f64; 3],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose3d: Option<Vec<[f64; 3]>>,
}

impl RootPrediction {
    pub fn validate(&self) -> Result<()> {
        let pose = self.pose3d.iter().flatten().flatten();
        if self.root3d.iter().chain(pose).any(|v| !v.is_finite()) || !self.score.is_finite() {
            return Err(CoreError::invalid("prediction", "non-finite coordinate or score"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: usize,
    pub gt: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// In selection order for greedy matching, by prediction index otherwise.
    pub pairs: Vec<MatchPair>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    /// Globally nearest pair first, ties by prediction then ground-truth index.
    #[default]
    Greedy,
    /// Minimum total distance over maximum-cardinality matchings.
    Optimal,
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn finish(pairs: Vec<MatchPair>, np: usize, ng: usize) -> MatchResult {
    let mut used_p = vec![false; np];
    let mut used_g = vec![false; ng];
    for p in &pairs {
        used_p[p.pred] = true;
        used_g[p.gt] = true;
    }
    MatchResult {
        pairs,
        unmatched_preds: (0..np).filter(|&i| !used_p[i]).collect(),
        unmatched_gts: (0..ng).filter(|&i| !used_g[i]).collect(),
    }
}

pub fn match_roots(preds: &[[f64; 3]], gts: &[[f64; 3]], mode: MatchMode) -> MatchResult {
    match mode {
        MatchMode::Greedy => greedy(preds, gts),
        MatchMode::Optimal => optimal(preds, gts),
    }
}

fn greedy(preds: &[[f64; 3]], gts: &[[f64; 3]]) -> MatchResult {
    let mut cand: Vec<MatchPair> = preds
        .iter()
        .enumerate()
        .flat_map(|(p, &a)| {
            gts.iter().enumerate().map(move |(g, &b)| MatchPair {
                pred: p,
                gt: g,
                distance: distance(a, b),
            })
        })
        .collect();
    cand.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.pred.cmp(&b.pred)).then(a.gt.cmp(&b.gt)));
    let mut used_p = vec![false; preds.len()];
    let mut used_g = vec![false; gts.len()];
    let mut pairs = Vec::with_capacity(preds.len().min(gts.len()));
    for c in cand {
        if !used_p[c.pred] && !used_g[c.gt] {
            used_p[c.pred] = true;
            used_g[c.gt] = true;
            pairs.push(c);
        }
    }
    finish(pairs, preds.len(), gts.len())
}

/// Shortest-augmenting-path assignment over the smaller side.
fn optimal(preds: &[[f64; 3]], gts: &[[f64; 3]]) -> MatchResult {
    let transpose = preds.len() > gts.len();
    let (rows, cols) = if transpose { (gts, preds) } else { (preds, gts) };
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return finish(Vec::new(), preds.len(), gts.len());
    }
    let cost = |i: usize, j: usize| distance(rows[i], cols[j]);
    // 1-based potentials; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<MatchPair> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (r, c) = (owner[j] - 1, j - 1);
            let (pred, gt) = if transpose { (c, r) } else { (r, c) };
            MatchPair {
                pred,
                gt,
                distance: distance(preds[pred], gts[gt]),
            }
        })
        .collect();
    pairs.sort_by_key(|p| p.pred);
    finish(pairs, preds.len(), gts.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mrpe {
    pub mrpe: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Mean Euclidean and per-axis absolute root errors over `(pred, gt)` pairs.
pub fn mrpe(pairs: &[([f64; 3], [f64; 3])]) -> Result<Mrpe> {
    if pairs.is_empty() {
        return Err(CoreError::NoMatches);
    }
    let n = pairs.len() as f64;
    let mut acc = [0.0; 4];
    for (p, g) in pairs {
        acc[0] += distance(*p, *g);
        for k in 0..3 {
            acc[k + 1] += (p[k] - g[k]).abs();
        }
    }
    Ok(Mrpe {
        mrpe: acc[0] / n,
        x: acc[1] / n,
        y: acc[2] / n,
        z: acc[3] / n,
    })
}

/// Predictions and ground-truth roots of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageEval {
    pub preds: Vec<RootPrediction>,
    pub gts: Vec<[f64; 3]>,
    /// Ground-truth poses aligned with `gts`, for 3DPCK.
    pub gt_poses: Vec<Vec<[f64; 3]>>,
}

impl ImageEval {
    pub fn matches(&self, mode: MatchMode) -> MatchResult {
        let roots: Vec<[f64; 3]> = self.preds.iter().map(|p| p.root3d).collect();
        match_roots(&roots, &self.gts, mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApAr {
    pub threshold: f64,
    pub ap: f64,
    pub ar: f64,
}

/// Recall levels of the 101-point interpolation.
pub fn recall_levels() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| i as f64 / 100.0)
}

/// Root AP/AR per threshold.
///
/// Predictions are matched to ground truths per image by distance; a matched
/// prediction closer than the threshold is a true positive, every other
/// prediction a false positive, and every ground truth without a true
/// positive a miss. Precision/recall points are taken after each distinct
/// score (descending), and AP is the mean over the 101 recall levels of the
/// best precision at or above that recall. AR is the recall with all
/// predictions kept. Without ground truths both are 0.
pub fn root_ap_ar(images: &[ImageEval], thresholds: &[f64], mode: MatchMode) -> Vec<ApAr> {
    let matches: Vec<MatchResult> = images.iter().map(|im| im.matches(mode)).collect();
    let num_gt: usize = images.iter().map(|im| im.gts.len()).sum();
    thresholds
        .iter()
        .map(|&thr| {
            // (score, is true positive)
            let mut scored: Vec<(f64, bool)> = Vec::new();
            for (im, m) in images.iter().zip(&matches) {
                let mut tp = vec![false; im.preds.len()];
                for p in &m.pairs {
                    tp[p.pred] = p.distance < thr;
                }
                scored.extend(im.preds.iter().zip(tp).map(|(p, t)| (p.score, t)));
            }
            if num_gt == 0 {
                return ApAr { threshold: thr, ap: 0.0, ar: 0.0 };
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut curve: Vec<(f64, f64)> = Vec::new();
            let (mut tp, mut fp) = (0usize, 0usize);
            for (k, &(s, t)) in scored.iter().enumerate() {
                if t {
                    tp += 1;
                } else {
                    fp += 1;
                }
                let group_end = scored.get(k + 1).map_or(true, |n| n.0 != s);
                if group_end {
                    curve.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
                }
            }
            let ap = recall_levels()
                .map(|r| curve.iter().filter(|c| c.0 >= r).map(|c| c.1).fold(0.0, f64::max))
                .sum::<f64>()
                / 101.0;
            ApAr {
                threshold: thr,
                ap,
                ar: tp as f64 / num_gt as f64,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PckMode {
    Absolute,
    RootAligned,
}

/// Percentage of joints within `threshold` over matched `(pred, gt)` poses.
pub fn pck(pairs: &[(&[[f64; 3]], &[[f64; 3]])], root: usize, mode: PckMode, threshold: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CoreError::NoMatches);
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (pred, gt) in pairs {
        if pred.len() != gt.len() || root >= gt.len() {
            return Err(CoreError::invalid("pck", format!("{} vs {} joints, root {root}", pred.len(), gt.len())));
        }
        let shift = match mode {
            PckMode::Absolute => [0.0; 3],
            PckMode::RootAligned => std::array::from_fn(|k| gt[root][k] - pred[root][k]),
        };
        for (p, g) in pred.iter().zip(gt.iter()) {
            let q = [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]];
            hit += usize::from(distance(q, *g) < threshold);
            total += 1;
        }
    }
    Ok(100.0 * hit as f64 / total as f64)
}

/// 3DPCK over matched persons of every image; predictions without a pose are skipped.
pub fn image_pck(images: &[ImageEval], root: usize, mode: PckMode, threshold: f64, matching: MatchMode) -> Result<f64> {
    let mut pairs: Vec<(&[[f64; 3]], &[[f64; 3]])> = Vec::new();
    for im in images {
        for m in im.matches(matching).pairs {
            if let (Some(p), Some(g)) = (&im.preds[m.pred].pose3d, im.gt_poses.get(m.gt)) {
                pairs.push((p, g));
            }
        }
    }
    pck(&pairs, root, mode, threshold)
}

/// Matched `(pred, gt)` roots over all images.
pub fn matched_roots(images: &[ImageEval], mode: MatchMode) -> Vec<([f64; 3], [f64; 3])> {
    images
        .iter()
        .flat_map(|im| {
            im.matches(mode)
                .pairs
                .into_iter()
                .map(move |m| (im.preds[m.pred].root3d, im.gts[m.gt]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(root3d: [f64; 3], score: f64) -> RootPrediction {
        RootPrediction {
            root3d,
            score,
            pose3d: None,
        }
    }

    #[test]
    fn matching_examples() {
        let m = match_roots(&[[1.0, 2.0, 3.0]], &[[1.0, 2.0, 3.0]], MatchMode::Greedy);
        assert_eq!(m.pairs, vec![MatchPair { pred: 0, gt: 0, distance: 0.0 }]);
        let m = match_roots(&[[0.0, 0.0, 10.0], [0.0, 0.0, 1.0]], &[[0.0; 3]], MatchMode::Greedy);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].pred, 1);
        assert_eq!(m.unmatched_preds, vec![0]);
        // Equal distances go to the lower prediction index.
        let m = match_roots(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]], &[[0.0; 3]], MatchMode::Greedy);
        assert_eq!(m.pairs[0].pred, 0);
    }

    #[test]
    fn optimal_beats_greedy_when_greedy_is_myopic() {
        // Greedy takes the 1.0 pair and is left with 3.6; optimal pays 1.5 + 1.1.
        let preds = [[0.0, 0.0, 0.0], [2.1, 0.0, 0.0]];
        let gts = [[1.0, 0.0, 0.0], [-1.5, 0.0, 0.0]];
        let g = match_roots(&preds, &gts, MatchMode::Greedy);
        let o = match_roots(&preds, &gts, MatchMode::Optimal);
        let total = |m: &MatchResult| m.pairs.iter().map(|p| p.distance).sum::<f64>();
        assert!((total(&g) - 4.6).abs() < 1e-12);
        assert!((total(&o) - 2.6).abs() < 1e-12);
        assert_eq!(o.pairs.iter().map(|p| (p.pred, p.gt)).collect::<Vec<_>>(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn mrpe_examples() {
        let z = mrpe(&[([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])]).unwrap();
        assert_eq!((z.mrpe, z.x, z.y, z.z), (0.0, 0.0, 0.0, 0.0));
        let m = mrpe(&[([3.0, 4.0, 0.0], [0.0; 3])]).unwrap();
        assert_eq!((m.mrpe, m.x, m.y, m.z), (5.0, 3.0, 4.0, 0.0));
        let m = mrpe(&[([2.0, 0.0, 0.0], [0.0; 3]), ([0.0, 0.0, 4.0], [0.0; 3])]).unwrap();
        assert_eq!(m.mrpe, 3.0);
        assert!(matches!(mrpe(&[]), Err(CoreError::NoMatches)));
    }

    #[test]
    fn ap_examples() {
        let hit = ImageEval {
            preds: vec![pred([0.0; 3], 0.9)],
            gts: vec![[0.0; 3]],
            gt_poses: vec![],
        };
        assert_eq!(root_ap_ar(&[hit], &[250.0], MatchMode::Greedy)[0], ApAr { threshold: 250.0, ap: 1.0, ar: 1.0 });
        let miss = ImageEval {
            preds: vec![pred([300.0, 0.0, 0.0], 0.9)],
            gts: vec![[0.0; 3]],
            gt_poses: vec![],
        };
        assert_eq!(root_ap_ar(&[miss], &[250.0], MatchMode::Greedy)[0], ApAr { threshold: 250.0, ap: 0.0, ar: 0.0 });
        let none = ImageEval::default();
        assert_eq!(root_ap_ar(&[none], &[250.0], MatchMode::Greedy)[0].ap, 0.0);
    }

    #[test]
    fn pck_examples() {
        let gt: Vec<[f64; 3]> = (0..16).map(|j| [j as f64 * 50.0, 0.0, 4000.0]).collect();
        let shifted: Vec<[f64; 3]> = gt.iter().map(|p| [p[0] + 200.0, p[1], p[2]]).collect();
        let mut one_off = gt.clone();
        one_off[5][1] += 149.0;
        for mode in [PckMode::Absolute, PckMode::RootAligned] {
            assert_eq!(pck(&[(&gt, &gt)], 0, mode, PCK_THRESHOLD).unwrap(), 100.0);
            assert_eq!(pck(&[(&one_off, &gt)], 0, mode, PCK_THRESHOLD).unwrap(), 100.0);
        }
        assert_eq!(pck(&[(&shifted, &gt)], 0, PckMode::Absolute, PCK_THRESHOLD).unwrap(), 0.0);
        assert_eq!(pck(&[(&shifted, &gt)], 0, PckMode::RootAligned, PCK_THRESHOLD).unwrap(), 100.0);
        let mut at = gt.clone();
        at[3][0] += 150.0;
        assert_eq!(pck(&[(&at, &gt)], 0, PckMode::Absolute, PCK_THRESHOLD).unwrap(), 1500.0 / 16.0);
        assert!(pck(&[], 0, PckMode::Absolute, PCK_THRESHOLD).is_err());
    }
}
