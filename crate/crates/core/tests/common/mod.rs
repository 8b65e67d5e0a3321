//! Brute-force reference implementations shared by integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;

use hdnet_core::metrics::{ImageEval, RootPrediction};
use rand::Rng;

pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Every injective assignment of the smaller side into the larger one, as
/// `(pred, gt)` lists.
pub fn all_max_matchings(np: usize, ng: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(i: usize, np: usize, ng: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if i == np {
            if cur.len() == np.min(ng) {
                out.push(cur.clone());
            }
            return;
        }
        // Prediction i may stay unmatched only when predictions outnumber ground truths.
        if np > ng {
            rec(i + 1, np, ng, used, cur, out);
        }
        for g in 0..ng {
            if !used[g] {
                used[g] = true;
                cur.push((i, g));
                rec(i + 1, np, ng, used, cur, out);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, np, ng, &mut vec![false; ng], &mut Vec::new(), &mut out);
    out
}

fn sorted_triples(m: &[(usize, usize)], preds: &[[f64; 3]], gts: &[[f64; 3]]) -> Vec<(f64, usize, usize)> {
    let mut t: Vec<(f64, usize, usize)> = m.iter().map(|&(p, g)| (dist(preds[p], gts[g]), p, g)).collect();
    t.sort_by(cmp_triple);
    t
}

fn cmp_triple(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// The matching whose ascending `(distance, pred, gt)` list is
/// lexicographically smallest: globally nearest first, by enumeration.
pub fn brute_greedy(preds: &[[f64; 3]], gts: &[[f64; 3]]) -> Vec<(f64, usize, usize)> {
    all_max_matchings(preds.len(), gts.len())
        .iter()
        .map(|m| sorted_triples(m, preds, gts))
        .min_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| cmp_triple(x, y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .unwrap_or_default()
}

/// Smallest total distance over maximum-cardinality matchings.
pub fn brute_optimal_total(preds: &[[f64; 3]], gts: &[[f64; 3]]) -> f64 {
    all_max_matchings(preds.len(), gts.len())
        .iter()
        .map(|m| m.iter().map(|&(p, g)| dist(preds[p], gts[g])).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// AP/AR by sweeping every distinct score as a keep-threshold and reading
/// the interpolated precision at each of the 101 recall levels.
pub fn brute_ap_ar(images: &[ImageEval], threshold: f64) -> (f64, f64) {
    let num_gt: usize = images.iter().map(|im| im.gts.len()).sum();
    if num_gt == 0 {
        return (0.0, 0.0);
    }
    let mut all: Vec<(f64, bool)> = Vec::new();
    for im in images {
        let roots: Vec<[f64; 3]> = im.preds.iter().map(|p| p.root3d).collect();
        let mut tp = vec![false; roots.len()];
        for (d, p, _) in brute_greedy(&roots, &im.gts) {
            tp[p] = d < threshold;
        }
        all.extend(im.preds.iter().zip(tp).map(|(p, t)| (p.score, t)));
    }
    let mut scores: Vec<f64> = all.iter().map(|a| a.0).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let points: Vec<(f64, f64)> = scores
        .iter()
        .map(|&tau| {
            let kept: Vec<bool> = all.iter().filter(|a| a.0 >= tau).map(|a| a.1).collect();
            let tp = kept.iter().filter(|&&t| t).count();
            (tp as f64 / num_gt as f64, tp as f64 / kept.len() as f64)
        })
        .collect();
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let mut best = 0.0f64;
        for &(rec, prec) in &points {
            if rec >= r && prec > best {
                best = prec;
            }
        }
        ap += best;
    }
    let ar = all.iter().filter(|a| a.1).count() as f64 / num_gt as f64;
    (ap / 101.0, ar)
}

/// Small instance on a coarse lattice so that distance and score ties occur.
pub fn random_image(rng: &mut impl Rng, max: usize) -> ImageEval {
    let np = rng.gen_range(0..=max);
    let ng = rng.gen_range(0..=max);
    let point = |rng: &mut dyn rand::RngCore| {
        [
            rng.gen_range(-3..=3) as f64 * 50.0,
            rng.gen_range(-3..=3) as f64 * 50.0,
            4000.0 + rng.gen_range(-3..=3) as f64 * 50.0,
        ]
    };
    let gts: Vec<[f64; 3]> = (0..ng).map(|_| point(rng)).collect();
    let preds = (0..np)
        .map(|_| RootPrediction {
            root3d: point(rng),
            score: rng.gen_range(0..5) as f64 / 4.0,
            pose3d: None,
        })
        .collect();
    ImageEval {
        preds,
        gts,
        gt_poses: Vec::new(),
    }
}
