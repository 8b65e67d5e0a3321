use hdnet_autodiff::Tensor;

use crate::error::{CoreError, Result};
use crate::geometry::{BoundingBox, CameraIntrinsics, CropTransform};

/// A fixed-size patch cut from a stored image at its original scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    /// `[3, P, P]`.
    pub patch: Tensor,
    /// Patch pixel → native image pixel.
    pub transform: CropTransform,
    /// Top-left stored pixel of the patch; may be negative.
    pub origin: [i64; 2],
}

impl Crop {
    /// Centre of the crop: the box centre, or the principal point without a box.
    pub fn centre(bbox: Option<&BoundingBox>, camera: &CameraIntrinsics) -> [f64; 2] {
        match bbox {
            Some(b) => b.center(),
            None => [camera.cx, camera.cy],
        }
    }
}

/// Cuts a `patch × patch` window centred (to the nearest stored pixel) on
/// `centre`, given in native pixels. Pixels outside the image are zero.
///
/// `pixel_scale` is the number of native pixels per stored pixel; the
/// returned transform maps patch coordinates to native coordinates.
pub fn crop_and_resize(image: &Tensor, centre: [f64; 2], patch: usize, pixel_scale: f64) -> Result<Crop> {
    let shape = image.shape();
    if shape.len() != 3 || patch == 0 {
        return Err(CoreError::invalid("crop", format!("image shape {shape:?}, patch {patch}")));
    }
    let (c, h, w) = (shape[0], shape[1] as i64, shape[2] as i64);
    let half = (patch as f64 - 1.0) / 2.0;
    let origin = [
        (centre[0] / pixel_scale - half).round() as i64,
        (centre[1] / pixel_scale - half).round() as i64,
    ];
    let p = patch as i64;
    if origin[0] >= w || origin[1] >= h || origin[0] + p <= 0 || origin[1] + p <= 0 {
        return Err(CoreError::EmptyCrop);
    }
    let src = image.values();
    let mut out = vec![0.0; c * patch * patch];
    let xs = origin[0].max(0)..(origin[0] + p).min(w);
    for ch in 0..c {
        for y in origin[1].max(0)..(origin[1] + p).min(h) {
            let row = (ch as i64 * h + y) * w;
            let dst = (ch * patch + (y - origin[1]) as usize) * patch;
            for x in xs.clone() {
                out[dst + (x - origin[0]) as usize] = src[(row + x) as usize];
            }
        }
    }
    Ok(Crop {
        patch: Tensor::new(&[c, patch, patch], out)?,
        transform: CropTransform {
            scale: pixel_scale,
            offset: [origin[0] as f64 * pixel_scale, origin[1] as f64 * pixel_scale],
        },
        origin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(s: usize) -> Tensor {
        Tensor::new(&[1, s, s], (0..s * s).map(|i| i as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn inside_copy_and_padding() {
        let img = ramp(8);
        let c = crop_and_resize(&img, [4.0 * 2.0, 4.0 * 2.0], 4, 2.0).unwrap();
        assert_eq!(c.origin, [3, 3]);
        assert_eq!(&c.patch.values()[..4], &[28.0, 29.0, 30.0, 31.0]);

        let c = crop_and_resize(&img, [0.0, 0.0], 4, 1.0).unwrap();
        assert_eq!(c.origin, [-2, -2]);
        assert_eq!(&c.patch.values()[..4], &[0.0; 4]);
        assert_eq!(c.patch.values()[2 * 4 + 2], 1.0);

        assert!(matches!(crop_and_resize(&img, [40.0, 0.0], 4, 1.0), Err(CoreError::EmptyCrop)));
    }

    #[test]
    fn transform_round_trip() {
        let c = crop_and_resize(&ramp(16), [100.0, 37.0], 8, 8.0).unwrap();
        for p in [[0.0, 0.0], [3.5, 7.25], [-1.0, 9.0]] {
            let img = c.transform.to_image(p);
            assert_eq!(c.transform.to_local(img), p);
        }
        // Patch pixel (i, j) is stored pixel origin + (i, j).
        let q = c.transform.to_image([2.0, 3.0]);
        assert_eq!(q, [(c.origin[0] + 2) as f64 * 8.0, (c.origin[1] + 3) as f64 * 8.0]);
    }
}
