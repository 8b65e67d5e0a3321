//! Differentiable head pieces, usable on their own for testing.
//!
//! Heatmaps travel as `[B, J, H·W]` with row-major cells (`p = v·W + u`).

use hdnet_autodiff::{Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::geometry::BoundingBox;
use crate::skeleton::AdjacencyMatrix;

/// Per-joint softmax over all spatial cells: `[B, J, H, W] → [B, J, H·W]`.
pub fn spatial_softmax(t: &mut Tape, logits: Var) -> Result<Var> {
    let &[b, j, h, w] = t.shape(logits) else {
        return Err(CoreError::invalid("heatmap logits", format!("shape {:?}", t.shape(logits))));
    };
    let flat = t.reshape(logits, &[b, j, h * w])?;
    Ok(t.softmax(flat, 2)?)
}

/// 0/1 mask `[B, J, H·W]`; cell `(u, v)` is kept when it lies in the box.
pub fn heatmap_mask(boxes: &[BoundingBox], joints: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut values = Vec::with_capacity(boxes.len() * joints * h * w);
    for bx in boxes {
        let plane: Vec<f64> = (0..h * w)
            .map(|p| f64::from(u8::from(bx.contains([(p % w) as f64, (p / w) as f64]))))
            .collect();
        if plane.iter().all(|&m| m == 0.0) {
            return Err(CoreError::EmptyMask);
        }
        for _ in 0..joints {
            values.extend_from_slice(&plane);
        }
    }
    Ok(Tensor::new(&[boxes.len(), joints, h * w], values)?)
}

/// Zeroes heatmap mass outside the mask, optionally restoring unit mass.
pub fn mask_heatmaps(t: &mut Tape, hm: Var, mask: &Tensor, renormalize: bool) -> Result<Var> {
    let m = t.constant(mask.clone());
    let kept = t.mul(hm, m)?;
    if renormalize {
        Ok(t.renormalize(kept, 2)?)
    } else {
        Ok(kept)
    }
}

/// Grid coordinates `[H·W, 2]` as `(u, v)` pairs.
pub fn grid_coordinates(h: usize, w: usize) -> Tensor {
    let values = (0..h * w)
        .flat_map(|p| [(p % w) as f64, (p / w) as f64])
        .collect();
    Tensor::new(&[h * w, 2], values).expect("non-empty grid")
}

/// Expected cell coordinates under each heatmap: `[B, J, H·W] → [B, J, 2]`.
pub fn soft_argmax_2d(t: &mut Tape, hm: Var, h: usize, w: usize) -> Result<Var> {
    let grid = t.constant(grid_coordinates(h, w));
    Ok(t.matmul(hm, grid)?)
}

/// `d⁽ʲ⁾ = Σ_p Ĥ⁽ʲ⁾_p · F[:, p]`: `[B, J, H·W] × [B, C, H, W] → [B, J, C]`.
pub fn attention_pool(t: &mut Tape, hm: Var, features: Var) -> Result<Var> {
    let &[b, c, h, w] = t.shape(features) else {
        return Err(CoreError::invalid("depth features", format!("shape {:?}", t.shape(features))));
    };
    let hm_shape = t.shape(hm).to_vec();
    if hm_shape.len() != 3 || hm_shape[0] != b || hm_shape[2] != h * w {
        return Err(CoreError::invalid(
            "attention pooling",
            format!("heatmaps {hm_shape:?} do not match features {:?}", [b, c, h, w]),
        ));
    }
    let flat = t.reshape(features, &[b, c, h * w])?;
    let cols = t.permute(flat, &[0, 2, 1])?;
    Ok(t.matmul(hm, cols)?)
}

/// Pre-activation graph layer on `[B, J, C]` node features:
/// `ã_ii·f_self(x_i) + Σ_{j≠i} ã_ij·f_inter(x_j)`.
pub fn gnn_mix(t: &mut Tape, x: Var, adj: &AdjacencyMatrix, w_self: Var, w_inter: Var) -> Result<Var> {
    let &[b, j, _] = t.shape(x) else {
        return Err(CoreError::invalid("graph input", format!("shape {:?}", t.shape(x))));
    };
    if adj.size() != j {
        return Err(CoreError::invalid(
            "graph input",
            format!("{j} nodes but adjacency is {n}×{n}", n = adj.size()),
        ));
    }
    let own = t.matmul(x, w_self)?;
    let diag = adj.diagonal();
    let out_c = t.shape(own)[2];
    let scale: Vec<f64> = (0..b * j * out_c).map(|k| diag[(k / out_c) % j]).collect();
    let scale = t.constant(Tensor::new(&[b, j, out_c], scale)?);
    let own = t.mul(own, scale)?;

    let msg = t.matmul(x, w_inter)?;
    let off = adj.off_diagonal();
    let stacked: Vec<f64> = (0..b).flat_map(|_| off.values().iter().copied()).collect();
    let off = t.constant(Tensor::new(&[b, j, j], stacked)?);
    let mixed = t.matmul(off, msg)?;
    Ok(t.add(own, mixed)?)
}

/// `b̂ = Σ_i i·p_i`: `[B, N] → [B, 1]`.
pub fn bin_expectation(t: &mut Tape, probs: Var) -> Result<Var> {
    let n = *t.shape(probs).last().expect("rank ≥ 1");
    let idx = t.constant(Tensor::new(&[n, 1], (0..n).map(|i| i as f64).collect())?);
    Ok(t.matmul(probs, idx)?)
}

/// Plain (non-tape) per-joint heatmaps `[J, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub joints: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl HeatmapStack {
    pub fn new(joints: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != joints * height * width || joints * height * width == 0 {
            return Err(CoreError::invalid(
                "heatmap stack",
                format!("{} values for {joints}×{height}×{width}", values.len()),
            ));
        }
        Ok(Self {
            joints,
            height,
            width,
            values,
        })
    }

    pub fn plane(&self, j: usize) -> &[f64] {
        &self.values[j * self.height * self.width..][..self.height * self.width]
    }

    pub fn masses(&self) -> Vec<f64> {
        (0..self.joints).map(|j| self.plane(j).iter().sum()).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.joints, self.height * self.width], self.values.clone()).expect("validated")
    }

    fn from_tape(t: &Tape, v: Var, height: usize, width: usize) -> Self {
        let s = t.shape(v);
        Self {
            joints: s[1],
            height,
            width,
            values: t.value(v).values().to_vec(),
        }
    }

    /// Per-joint `(u, v)` expectation.
    pub fn soft_argmax(&self) -> Vec<[f64; 2]> {
        let mut t = Tape::new();
        let hm = t.constant(self.to_tensor());
        let uv = soft_argmax_2d(&mut t, hm, self.height, self.width).expect("shapes agree");
        t.value(uv).values().chunks(2).map(|c| [c[0], c[1]]).collect()
    }

    pub fn masked(&self, bbox: &BoundingBox, renormalize: bool) -> Result<Self> {
        let mut t = Tape::new();
        let hm = t.constant(self.to_tensor());
        let mask = heatmap_mask(std::slice::from_ref(bbox), self.joints, self.height, self.width)?;
        let out = mask_heatmaps(&mut t, hm, &mask, renormalize)?;
        Ok(Self::from_tape(&t, out, self.height, self.width))
    }
}
