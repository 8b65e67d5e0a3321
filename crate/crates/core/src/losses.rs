//! Heatmap, pose, bin and index losses and their weighted sum.
//!
//! Every term is batch-averaged, so the per-sample definitions below hold for
//! `B = 1`:
//!
//! * `L_hm   = mean over J·H·W of (Ĥ − H)²`
//! * `L_pose = (1/J) Σ_j |u_j − û_j| + |v_j − v̂_j|`, in heatmap cells
//! * `L_bins = −Σ_i B_i log(B̂_i + 1e-12)`
//! * `L_idx  = |b − b̂|`

use hdnet_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{DepthOutput, ForwardOutput};

/// Guard inside the cross-entropy logarithm.
pub const CE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_hm: f64,
    pub lambda_pose: f64,
    pub lambda_bins: f64,
    pub lambda_idx: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_hm: 1000.0,
            lambda_pose: 0.1,
            lambda_bins: 1.0,
            lambda_idx: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(CoreError::invalid("loss weights", format!("{w:?} must be nonnegative")));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(CoreError::invalid("loss weights", "at least one weight must be positive"));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda_hm, self.lambda_pose, self.lambda_bins, self.lambda_idx]
    }
}

/// The four loss terms, in weight order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub hm: T,
    pub pose: T,
    pub bins: T,
    pub idx: T,
}

impl<T: Copy> LossParts<T> {
    pub fn as_array(&self) -> [T; 4] {
        [self.hm, self.pose, self.bins, self.idx]
    }
}

pub fn heatmap_mse(t: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = t.sub(pred, target)?;
    let sq = t.mul(d, d)?;
    Ok(t.mean(sq)?)
}

/// `pred`, `target`: `[B, J, 2]`. `visible` (same shape, 0/1) drops joints
/// from the sum without changing the `1/(B·J)` normalization.
pub fn pose_l1(t: &mut Tape, pred: Var, target: Var, visible: Option<&Tensor>) -> Result<Var> {
    let shape = t.shape(pred).to_vec();
    if shape.len() != 3 || shape[2] != 2 {
        return Err(CoreError::invalid("pose loss", format!("expected [B, J, 2], got {shape:?}")));
    }
    let d = t.sub(pred, target)?;
    let mut a = t.abs(d)?;
    if let Some(v) = visible {
        let v = t.constant(v.clone());
        a = t.mul(a, v)?;
    }
    let s = t.sum(a)?;
    Ok(t.scale(s, 1.0 / (shape[0] * shape[1]) as f64)?)
}

/// `pred`, `target`: `[B, N]`.
pub fn bins_ce(t: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let batch = t.shape(pred)[0];
    let lp = t.log(pred, CE_EPS)?;
    let w = t.mul(lp, target)?;
    let s = t.sum(w)?;
    Ok(t.scale(s, -1.0 / batch as f64)?)
}

/// `pred`, `target`: `[B, 1]`.
pub fn idx_l1(t: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = t.sub(pred, target)?;
    let a = t.abs(d)?;
    Ok(t.mean(a)?)
}

pub fn total_loss(t: &mut Tape, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (part, lambda) in parts.as_array().into_iter().zip(w.as_array()) {
        let term = t.scale(part, lambda)?;
        acc = Some(match acc {
            Some(a) => t.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("four parts"))
}

/// Per-batch supervision, laid out like the model outputs.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `[B, J, H·W]`, each joint summing to 1 (or 0 when truncated).
    pub heatmaps: Tensor,
    /// `[B, J, 2]` in heatmap cells.
    pub coords: Tensor,
    /// `[B, J, 2]`, 1 for joints inside the heatmap grid.
    pub visible: Tensor,
    /// `[B, N_B]` two-bin encodings.
    pub bins: Tensor,
    /// `[B, 1]` bin coordinates.
    pub b: Tensor,
    /// `[B, 1]` normalized depths.
    pub d_hat: Tensor,
}

/// Builds all four terms for a forward pass and their weighted total.
///
/// The direct-regression head has no bins: its depth term `|d̂ − d̂_gt|`
/// takes the bin weight and the index term is identically zero.
pub fn model_losses(
    t: &mut Tape,
    out: &ForwardOutput,
    targets: &Targets,
    w: &LossWeights,
) -> Result<(Var, LossParts<Var>)> {
    let hm_t = t.constant(targets.heatmaps.clone());
    let hm = heatmap_mse(t, out.heatmaps, hm_t)?;
    let uv_t = t.constant(targets.coords.clone());
    let pose = pose_l1(t, out.coords, uv_t, Some(&targets.visible))?;
    let (bins, idx) = match out.depth {
        DepthOutput::Bins { probs, b_hat } => {
            let bt = t.constant(targets.bins.clone());
            let b = t.constant(targets.b.clone());
            (bins_ce(t, probs, bt)?, idx_l1(t, b_hat, b)?)
        }
        DepthOutput::Direct { d_hat } => {
            let dt = t.constant(targets.d_hat.clone());
            let zero = t.constant(Tensor::scalar(0.0));
            (idx_l1(t, d_hat, dt)?, zero)
        }
    };
    let parts = LossParts { hm, pose, bins, idx };
    Ok((total_loss(t, &parts, w)?, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(t: &mut Tape, shape: &[usize], v: Vec<f64>) -> Var {
        t.constant(Tensor::new(shape, v).unwrap())
    }

    fn val(t: &Tape, v: Var) -> f64 {
        t.value(v).item().unwrap()
    }

    #[test]
    fn heatmap_mse_examples() {
        let mut t = Tape::new();
        let a = c(&mut t, &[1, 2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25]);
        let mut shifted = t.value(a).values().to_vec();
        shifted[5] += 0.5;
        let b = c(&mut t, &[1, 2, 4], shifted);
        let same = heatmap_mse(&mut t, a, a).unwrap();
        assert_eq!(val(&t, same), 0.0);
        let ab = heatmap_mse(&mut t, a, b).unwrap();
        let ba = heatmap_mse(&mut t, b, a).unwrap();
        assert!((val(&t, ab) - 0.25 / 8.0).abs() < 1e-15);
        assert_eq!(val(&t, ab), val(&t, ba));
        let wrong = c(&mut t, &[1, 2, 3], vec![0.0; 6]);
        assert!(heatmap_mse(&mut t, a, wrong).is_err());
    }

    #[test]
    fn pose_l1_examples() {
        let mut t = Tape::new();
        let p = c(&mut t, &[1, 1, 2], vec![3.0, 4.0]);
        let z = c(&mut t, &[1, 1, 2], vec![0.0, 0.0]);
        let l = pose_l1(&mut t, p, z, None).unwrap();
        assert_eq!(val(&t, l), 7.0);
        let l = pose_l1(&mut t, p, p, None).unwrap();
        assert_eq!(val(&t, l), 0.0);
        let p2 = c(&mut t, &[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let z2 = c(&mut t, &[1, 2, 2], vec![0.0; 4]);
        let l = pose_l1(&mut t, p2, z2, None).unwrap();
        assert_eq!(val(&t, l), 1.0);
    }

    #[test]
    fn bins_ce_examples() {
        let mut t = Tape::new();
        let p = c(&mut t, &[1, 2], vec![0.6, 0.4]);
        let l = bins_ce(&mut t, p, p).unwrap();
        let entropy = -(0.6f64 * 0.6f64.ln() + 0.4 * 0.4f64.ln());
        assert!((val(&t, l) - entropy).abs() < 1e-11);
        assert!((val(&t, l) - 0.6730).abs() < 1e-4);

        let target = c(&mut t, &[1, 5], vec![0.0, 0.0, 0.6, 0.4, 0.0]);
        let uniform = c(&mut t, &[1, 5], vec![0.2; 5]);
        let l = bins_ce(&mut t, uniform, target).unwrap();
        assert!((val(&t, l) - 5f64.ln()).abs() < 1e-11);

        let hot = c(&mut t, &[1, 3], vec![0.0, 1.0, 0.0]);
        let l = bins_ce(&mut t, hot, hot).unwrap();
        assert!(val(&t, l).abs() < 1e-11);
    }

    #[test]
    fn idx_and_total_examples() {
        let mut t = Tape::new();
        let a = c(&mut t, &[1, 1], vec![2.4]);
        let b = c(&mut t, &[1, 1], vec![3.0]);
        let ab = idx_l1(&mut t, a, b).unwrap();
        let ba = idx_l1(&mut t, b, a).unwrap();
        assert!((val(&t, ab) - 0.6).abs() < 1e-15);
        assert_eq!(val(&t, ab), val(&t, ba));

        let parts: Vec<Var> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| t.constant(Tensor::scalar(v))).collect();
        let parts = LossParts {
            hm: parts[0],
            pose: parts[1],
            bins: parts[2],
            idx: parts[3],
        };
        let unit = LossWeights {
            lambda_hm: 1.0,
            lambda_pose: 1.0,
            lambda_bins: 1.0,
            lambda_idx: 1.0,
        };
        let l = total_loss(&mut t, &parts, &unit).unwrap();
        assert_eq!(val(&t, l), 10.0);
        let w = LossWeights::default();
        let w2 = LossWeights {
            lambda_hm: 2.0 * w.lambda_hm,
            lambda_pose: 2.0 * w.lambda_pose,
            lambda_bins: 2.0 * w.lambda_bins,
            lambda_idx: 2.0 * w.lambda_idx,
        };
        let l1 = total_loss(&mut t, &parts, &w).unwrap();
        let l2 = total_loss(&mut t, &parts, &w2).unwrap();
        assert_eq!(val(&t, l2), 2.0 * val(&t, l1));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let zero = LossWeights {
            lambda_hm: 0.0,
            lambda_pose: 0.0,
            lambda_bins: 0.0,
            lambda_idx: 0.0,
        };
        assert!(zero.validate().is_err());
        assert!(LossWeights { lambda_hm: -1.0, ..LossWeights::default() }.validate().is_err());
    }
}
