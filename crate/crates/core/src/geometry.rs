//! Pinhole camera math and the log-depth bin codec.
//!
//! Depth is learned in focal-normalized form `d̂ = d / √(fx·fy)`, discretized
//! on a log scale between `α` and `β` into `N_B` bins. A continuous bin
//! coordinate is encoded by splitting unit mass over the two neighbouring
//! bins, so that the expected index of the encoding is the coordinate itself.

use serde::{Deserialize, Serialize};

use crate::error::{positive, CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        positive("fx", self.fx)?;
        positive("fy", self.fy)?;
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(CoreError::invalid("principal point", format!("({}, {})", self.cx, self.cy)));
        }
        Ok(())
    }

    /// Geometric-mean focal length `√(fx·fy)`.
    pub fn focal(&self) -> f64 {
        (self.fx * self.fy).sqrt()
    }

    /// Camera-space point `(X, Y, Z)` seen at pixel `(u, v)` with depth `d`.
    pub fn back_project(&self, u: f64, v: f64, d: f64) -> Result<[f64; 3]> {
        positive("depth", d)?;
        Ok([(u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d])
    }

    pub fn project(&self, p: [f64; 3]) -> Result<[f64; 2]> {
        positive("depth", p[2])?;
        Ok([p[0] * self.fx / p[2] + self.cx, p[1] * self.fy / p[2] + self.cy])
    }
}

pub fn normalize_depth(d: f64, camera: &CameraIntrinsics) -> Result<f64> {
    positive("depth", d)?;
    Ok(d / camera.focal())
}

pub fn denormalize_depth(d_hat: f64, camera: &CameraIntrinsics) -> f64 {
    d_hat * camera.focal()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinConfig {
    pub alpha: f64,
    pub beta: f64,
    pub num_bins: usize,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 8.0,
            num_bins: 71,
        }
    }
}

impl BinConfig {
    pub fn validate(&self) -> Result<()> {
        positive("alpha", self.alpha)?;
        if !(self.beta > self.alpha && self.beta.is_finite()) {
            return Err(CoreError::invalid(
                "bin range",
                format!("need 0 < alpha < beta, got [{}, {}]", self.alpha, self.beta),
            ));
        }
        if self.num_bins < 2 {
            return Err(CoreError::invalid("num_bins", format!("need at least 2, got {}", self.num_bins)));
        }
        Ok(())
    }

    pub fn max_index(&self) -> f64 {
        (self.num_bins - 1) as f64
    }

    /// Normalized depth at a (possibly fractional) bin coordinate.
    pub fn normalized_depth_at(&self, b: f64) -> f64 {
        let (la, lb) = (self.alpha.ln(), self.beta.ln());
        (b / self.max_index() * (lb - la) + la).exp()
    }
}

/// Result of [`bin_index`]: the coordinate and whether it had to be clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinIndex {
    pub b: f64,
    pub clamped: bool,
}

/// Continuous bin coordinate of a normalized depth, clamped into `[α, β]`.
pub fn bin_index(d_hat: f64, cfg: &BinConfig) -> Result<BinIndex> {
    positive("normalized depth", d_hat)?;
    let clamped = d_hat < cfg.alpha || d_hat > cfg.beta;
    let x = d_hat.clamp(cfg.alpha, cfg.beta);
    let (la, lb) = (cfg.alpha.ln(), cfg.beta.ln());
    let b = ((x.ln() - la) / (lb - la) * cfg.max_index()).clamp(0.0, cfg.max_index());
    Ok(BinIndex { b, clamped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BinDistribution {
    weights: Vec<f64>,
}

const DISTRIBUTION_TOL: f64 = 1e-9;

impl BinDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(CoreError::InvalidDistribution(format!("{} bins", weights.len())));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(CoreError::InvalidDistribution(format!("entry {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(CoreError::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(num_bins: usize) -> Result<Self> {
        Self::new(vec![1.0 / num_bins as f64; num_bins])
    }

    pub fn one_hot(index: usize, num_bins: usize) -> Result<Self> {
        if index >= num_bins {
            return Err(CoreError::BinOutOfRange {
                b: index as f64,
                max: num_bins.saturating_sub(1),
            });
        }
        let mut w = vec![0.0; num_bins];
        w[index] = 1.0;
        Self::new(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `b̂ = Σ i·w_i`.
    pub fn expected_index(&self) -> f64 {
        self.weights.iter().enumerate().map(|(i, w)| i as f64 * w).sum()
    }

    /// `1 − H(w)/ln N`, in `[0, 1]`; used as a detection confidence.
    pub fn confidence(&self) -> f64 {
        let h: f64 = self.weights.iter().filter(|w| **w > 0.0).map(|w| -w * w.ln()).sum();
        (1.0 - h / (self.weights.len() as f64).ln()).clamp(0.0, 1.0)
    }
}

/// Two-bin encoding: mass `1 − frac(b)` at `⌊b⌋` and `frac(b)` at `⌊b⌋ + 1`.
pub fn encode_bins(b: f64, num_bins: usize) -> Result<BinDistribution> {
    let max = num_bins.saturating_sub(1);
    if num_bins < 2 || !(0.0..=max as f64).contains(&b) {
        return Err(CoreError::BinOutOfRange { b, max });
    }
    let lo = (b.floor() as usize).min(max - 1);
    let frac = b - lo as f64;
    let mut w = vec![0.0; num_bins];
    w[lo] = 1.0 - frac;
    w[lo + 1] = frac;
    BinDistribution::new(w)
}

pub fn decode_depth(dist: &BinDistribution, cfg: &BinConfig, camera: &CameraIntrinsics) -> Result<f64> {
    if dist.len() != cfg.num_bins {
        return Err(CoreError::InvalidDistribution(format!(
            "{} bins, config expects {}",
            dist.len(),
            cfg.num_bins
        )));
    }
    Ok(denormalize_depth(cfg.normalized_depth_at(dist.expected_index()), camera))
}

/// Axis-aligned box, `[x_min, x_max] × [y_min, y_max]` in some pixel frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !(x_min <= x_max && y_min <= y_max) || ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(CoreError::invalid("bounding box", format!("{b:?}")));
        }
        Ok(b)
    }

    /// Tightest box around `points`.
    pub fn around(points: &[[f64; 2]]) -> Result<Self> {
        let mut it = points.iter();
        let first = it
            .next()
            .ok_or_else(|| CoreError::invalid("bounding box", "no points"))?;
        let mut b = Self {
            x_min: first[0],
            y_min: first[1],
            x_max: first[0],
            y_max: first[1],
        };
        for p in it {
            b.x_min = b.x_min.min(p[0]);
            b.y_min = b.y_min.min(p[1]);
            b.x_max = b.x_max.max(p[0]);
            b.y_max = b.y_max.max(p[1]);
        }
        Self::new(b.x_min, b.y_min, b.x_max, b.y_max)
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn expanded(&self, margin: f64) -> Self {
        Self {
            x_min: self.x_min - margin,
            y_min: self.y_min - margin,
            x_max: self.x_max + margin,
            y_max: self.y_max + margin,
        }
    }

    /// Image of the box under `p ↦ (p − offset) / scale`.
    pub fn to_local(&self, t: &CropTransform) -> Self {
        let [x_min, y_min] = t.to_local([self.x_min, self.y_min]);
        let [x_max, y_max] = t.to_local([self.x_max, self.y_max]);
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.x_min..=self.x_max).contains(&p[0]) && (self.y_min..=self.y_max).contains(&p[1])
    }
}

/// Maps patch coordinates to image coordinates: `image = patch·scale + offset`.
///
/// With a power-of-two `scale` and integral offset, `to_image(to_local(p))`
/// returns `p` bit for bit whenever `p − offset` is exact (any `|p| ≥ 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub scale: f64,
    pub offset: [f64; 2],
}

impl CropTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            offset: [0.0, 0.0],
        }
    }

    pub fn to_image(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.scale + self.offset[0], p[1] * self.scale + self.offset[1]]
    }

    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.offset[0]) / self.scale, (p[1] - self.offset[1]) / self.scale]
    }

    /// `self` applied after `inner`.
    pub fn compose(&self, inner: &CropTransform) -> Self {
        Self {
            scale: self.scale * inner.scale,
            offset: self.to_image(inner.offset),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam1000() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 500.0, 500.0).unwrap()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_depth(3000.0, &cam1000()).unwrap(), 3.0);
        let cam = CameraIntrinsics::new(1000.0, 4000.0, 0.0, 0.0).unwrap();
        assert_eq!(normalize_depth(2000.0, &cam).unwrap(), 1.0);
        assert!(normalize_depth(0.0, &cam).is_err());
        assert!(normalize_depth(-5.0, &cam).is_err());
    }

    #[test]
    fn bin_index_examples() {
        let cfg = BinConfig::default();
        assert_eq!(bin_index(1.0, &cfg).unwrap().b, 0.0);
        assert_eq!(bin_index(8.0, &cfg).unwrap().b, 70.0);
        assert!((bin_index(2.0, &cfg).unwrap().b - 70.0 / 3.0).abs() < 1e-12);
        let out = bin_index(9.5, &cfg).unwrap();
        assert!(out.clamped && out.b == 70.0);
        assert!(bin_index(0.0, &cfg).is_err());
    }

    #[test]
    fn encoding_examples() {
        let e = encode_bins(3.0, 5).unwrap();
        assert_eq!(e.weights(), &[0.0, 0.0, 0.0, 1.0, 0.0]);
        let e = encode_bins(0.25, 4).unwrap();
        assert_eq!(e.weights(), &[0.75, 0.25, 0.0, 0.0]);
        let e = encode_bins(4.0, 5).unwrap();
        assert_eq!(e.weights(), &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(encode_bins(4.5, 5).is_err());
        assert!(encode_bins(-0.1, 5).is_err());
    }

    #[test]
    fn decode_examples() {
        let cfg = BinConfig::default();
        let d = decode_depth(&BinDistribution::one_hot(35, 71).unwrap(), &cfg, &cam1000()).unwrap();
        assert!((d - 2000.0 * 2f64.sqrt()).abs() < 1e-9);
        let d = decode_depth(&BinDistribution::one_hot(70, 71).unwrap(), &cfg, &cam1000()).unwrap();
        assert!((d - 8000.0).abs() < 1e-9);
        let d = decode_depth(&BinDistribution::uniform(71).unwrap(), &cfg, &cam1000()).unwrap();
        assert!((d - 2828.427_124_746_19).abs() < 1e-6);
        assert!(decode_depth(&BinDistribution::uniform(5).unwrap(), &cfg, &cam1000()).is_err());
    }

    #[test]
    fn back_projection_examples() {
        let cam = cam1000();
        assert_eq!(cam.back_project(500.0, 500.0, 5.0).unwrap(), [0.0, 0.0, 5.0]);
        assert_eq!(cam.back_project(1500.0, 500.0, 2000.0).unwrap(), [2000.0, 0.0, 2000.0]);
        assert!(cam.back_project(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(BinDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(BinDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(BinDistribution::new(vec![1.0]).is_err());
        assert_eq!(BinDistribution::one_hot(2, 4).unwrap().confidence(), 1.0);
        assert!(BinDistribution::uniform(4).unwrap().confidence().abs() < 1e-12);
    }
}
