//! Index schema for bringing in externally captured data.
//!
//! No loader for any real dataset ships here. A split converted from licensed
//! multi-person capture data can be evaluated (and trained on) as long as it
//! follows the same directory layout as generated splits:
//!
//! ```text
//! <split>/manifest.json   format_version = 1, count, image_size, pixel_scale,
//!                         bins, skeleton (TOML text), content_hash, ...
//! <split>/index.jsonl     one scene per line, schema below
//! <split>/images/<id>.u8  3 × S × S bytes, channel-major, RGB
//! ```
//!
//! Each `index.jsonl` line:
//!
//! ```text
//! {
//!   "id": "000000",
//!   "seed": 0,
//!   "image": "images/000000.u8",
//!   "camera": {"fx": 1145.0, "fy": 1144.0, "cx": 512.5, "cy": 515.4},
//!   "persons": [{
//!     "pose3d": [[x, y, z], ...],          // camera space, mm, skeleton order
//!     "pose2d": [[u, v], ...],             // native pixels, projection of pose3d
//!     "truncated": [false, ...],
//!     "bbox": {"x_min": .., "y_min": .., "x_max": .., "y_max": ..},
//!     "root_depth": 4213.0,                // pose3d[root].z
//!     "bin_coord": 31.7,
//!     "bin_target": [0.0, ..., 0.3, 0.7, ..., 0.0],
//!     "clamped": false
//!   }]
//! }
//! ```
//!
//! The image is the sensor image downsampled by `pixel_scale`; intrinsics and
//! all pixel coordinates stay in full-resolution pixels. Real data has no
//! seed; any integer will do. `bin_coord`, `bin_target` and `clamped` follow
//! from `root_depth` and the camera, and [`parse_index_line`] checks them.

use crate::error::{CoreError, Result};
use crate::geometry::{bin_index, encode_bins, normalize_depth, BinConfig};

use super::dataset::SceneRecord;

/// Parses one index line and checks its shape against the skeleton size.
pub fn parse_index_line(line: &str, joints: usize) -> Result<SceneRecord> {
    let rec: SceneRecord = serde_json::from_str(line).map_err(|e| CoreError::Data(e.to_string()))?;
    rec.camera.validate()?;
    for (i, p) in rec.persons.iter().enumerate() {
        if p.pose3d.len() != joints || p.pose2d.len() != joints || p.truncated.len() != joints {
            return Err(CoreError::Data(format!(
                "person {i}: expected {joints} joints, got {}/{}/{}",
                p.pose3d.len(),
                p.pose2d.len(),
                p.truncated.len()
            )));
        }
        if p.pose3d.iter().flatten().chain(p.pose2d.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(CoreError::Data(format!("person {i}: non-finite coordinate")));
        }
    }
    Ok(rec)
}

/// Checks that a record's bin targets follow from its depths.
pub fn check_bin_targets(rec: &SceneRecord, bins: &BinConfig) -> Result<()> {
    for (i, p) in rec.persons.iter().enumerate() {
        let bi = bin_index(normalize_depth(p.root_depth, &rec.camera)?, bins)?;
        let want = encode_bins(bi.b, bins.num_bins)?;
        let same = want.len() == p.bin_target.len()
            && want.weights().iter().zip(p.bin_target.weights()).all(|(a, b)| (a - b).abs() <= 1e-9);
        if bi.clamped != p.clamped || (bi.b - p.bin_coord).abs() > 1e-9 || !same {
            return Err(CoreError::Data(format!("scene {}: person {i} bin target disagrees with its depth", rec.id)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::Skeleton;
    use crate::synth::{generate_scene, GenConfig};

    #[test]
    fn generated_records_pass() {
        let skel = Skeleton::default_human();
        let bins = BinConfig::default();
        let s = generate_scene(&GenConfig::default(), &skel, &bins, 4).unwrap();
        let rec = SceneRecord {
            id: "x".into(),
            seed: s.seed,
            image: "images/x.u8".into(),
            camera: s.camera,
            persons: s.persons,
        };
        let line = serde_json::to_string(&rec).unwrap();
        let back = parse_index_line(&line, 16).unwrap();
        assert_eq!(back, rec);
        check_bin_targets(&back, &bins).unwrap();
        assert!(parse_index_line(&line, 15).is_err());
        assert!(parse_index_line("{\"id\": 1}", 16).is_err());
    }
}
