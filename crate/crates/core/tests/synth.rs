use hdnet_autodiff::Tensor;
use hdnet_core::geometry::{decode_depth, BinConfig};
use hdnet_core::model::HeatmapStack;
use hdnet_core::skeleton::Skeleton;
use hdnet_core::synth::{crop_and_resize, generate_scene, render_gt_heatmaps, scene_seed, Dataset, GenConfig};
use hdnet_core::CoreError;
use proptest::prelude::*;

fn setup() -> (GenConfig, BinConfig, Skeleton) {
    (GenConfig::default(), BinConfig::default(), Skeleton::default_human())
}

/// Kolmogorov–Smirnov statistic of `xs` against the continuous CDF `cdf`.
fn ks_statistic(xs: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic two-sided critical value at significance 0.01.
fn ks_critical(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

#[test]
fn root_depths_follow_the_sampling_law() {
    let (gen, bins, skel) = setup();
    let ds = Dataset::generate(&gen, &bins, &skel, "ks", 1000, 77).unwrap();
    let mut depths: Vec<f64> = ds.scenes.iter().flat_map(|s| s.persons.iter().map(|p| p.root_depth)).collect();
    let n = depths.len();
    assert!(n >= 1000);
    let [lo, hi] = gen.depth_range;
    let d = ks_statistic(&mut depths, |x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0));
    assert!(d < ks_critical(n), "D = {d}, critical {}", ks_critical(n));
    assert!(depths[0] >= lo && depths[n - 1] <= hi);
    // The same samples clearly reject a narrower law.
    let narrow = ks_statistic(&mut depths, |x| ((x - lo) / (0.8 * (hi - lo))).clamp(0.0, 1.0));
    assert!(narrow > ks_critical(n));
}

#[test]
fn persons_are_geometrically_consistent() {
    let (gen, bins, skel) = setup();
    let root = skel.root_index();
    let max = gen.native_size() - gen.pixel_scale;
    for i in 0..200 {
        let scene = generate_scene(&gen, &skel, &bins, scene_seed(5, i)).unwrap();
        let cam = scene.camera;
        assert!(scene.persons.len() >= gen.persons[0] && scene.persons.len() <= gen.persons[1]);
        for p in &scene.persons {
            assert_eq!(p.root_depth, p.pose3d[root][2]);
            for ((x, uv), &trunc) in p.pose3d.iter().zip(&p.pose2d).zip(&p.truncated) {
                let u = cam.fx * x[0] / x[2] + cam.cx;
                let v = cam.fy * x[1] / x[2] + cam.cy;
                assert!((u - uv[0]).abs() <= 1e-9 * u.abs().max(1.0));
                assert!((v - uv[1]).abs() <= 1e-9 * v.abs().max(1.0));
                let inside = (0.0..=max).contains(&uv[0]) && (0.0..=max).contains(&uv[1]);
                assert_eq!(trunc, !inside);
            }
            let r = cam.back_project(p.pose2d[root][0], p.pose2d[root][1], p.root_depth).unwrap();
            for k in 0..3 {
                assert!((r[k] - p.pose3d[root][k]).abs() <= 1e-9 * p.root_depth);
            }
            assert!(!p.clamped);
            let d = decode_depth(&p.bin_target, &bins, &cam).unwrap();
            assert!((d - p.root_depth).abs() / p.root_depth < 1e-9);
            let sum: f64 = p.bin_target.weights().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.bbox.x_min <= p.bbox.x_max && p.bbox.y_min <= p.bbox.y_max);
        }
    }
}

#[test]
fn images_are_in_range_and_not_blank() {
    let (gen, bins, skel) = setup();
    let scene = generate_scene(&gen, &skel, &bins, 3).unwrap();
    assert_eq!(scene.image.shape(), &[3, gen.image_size, gen.image_size]);
    let v = scene.image.values();
    assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
    assert!(v.iter().all(|&x| ((x * 255.0).round() - x * 255.0).abs() < 1e-9));
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    assert!(v.iter().map(|x| (x - mean).abs()).sum::<f64>() > 0.0);
}

fn centroid(hm: &HeatmapStack, j: usize) -> [f64; 2] {
    let plane = hm.plane(j);
    let mut c = [0.0; 2];
    for (p, &m) in plane.iter().enumerate() {
        c[0] += m * (p % hm.width) as f64;
        c[1] += m * (p / hm.width) as f64;
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn heatmap_centroid_recovers_the_joint(u in 2.25..=60.75f64, v in 2.25..=60.75f64) {
        let (hm, trunc) = render_gt_heatmaps(&[[u, v]], 64, 64, 0.75).unwrap();
        prop_assert!(!trunc[0]);
        prop_assert!((hm.masses()[0] - 1.0).abs() < 1e-9);
        let c = centroid(&hm, 0);
        prop_assert!((c[0] - u).abs() < 0.01 && (c[1] - v).abs() < 0.01, "{c:?} vs ({u}, {v})");
        let sa = hm.soft_argmax()[0];
        prop_assert!((sa[0] - c[0]).abs() < 1e-12 && (sa[1] - c[1]).abs() < 1e-12);
        // The largest cell is the grid point nearest the joint.
        let peak = hm.plane(0).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(peak, (v.round() as usize) * 64 + u.round() as usize);
    }

    #[test]
    fn joints_off_the_grid_are_flagged(u in -20.0..80.0f64, v in -20.0..80.0f64) {
        let (hm, trunc) = render_gt_heatmaps(&[[u, v]], 64, 64, 0.75).unwrap();
        let inside = (0.0..=63.0).contains(&u) && (0.0..=63.0).contains(&v);
        prop_assert_eq!(trunc[0], !inside);
        let mass = hm.masses()[0];
        let ok = if inside { (mass - 1.0).abs() < 1e-9 } else { mass == 0.0 };
        prop_assert!(ok, "mass {}", mass);
    }

    #[test]
    fn crops_copy_pixels_and_invert_exactly(
        cx in -200.0..2300.0f64,
        cy in -200.0..2300.0f64,
        patch in 1usize..40,
        px in 0.0..40.0f64,
        py in 0.0..40.0f64,
        qx in 0i64..640,
        qy in 0i64..640,
    ) {
        let s = 128usize;
        let k = 16.0;
        let image = Tensor::new(&[2, s, s], (0..2 * s * s).map(|i| (i % 9973) as f64 + 1.0).collect()).unwrap();
        let crop = match crop_and_resize(&image, [cx, cy], patch, k) {
            Ok(c) => c,
            Err(CoreError::EmptyCrop) => {
                let o = [(cx / k - (patch as f64 - 1.0) / 2.0).round(), (cy / k - (patch as f64 - 1.0) / 2.0).round()];
                prop_assert!(o.iter().any(|&o| o >= s as f64 || o + patch as f64 <= 0.0));
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert_eq!(crop.patch.shape(), &[2, patch, patch]);
        for ch in 0..2 {
            for y in 0..patch {
                for x in 0..patch {
                    let (ix, iy) = (crop.origin[0] + x as i64, crop.origin[1] + y as i64);
                    let inside = (0..s as i64).contains(&ix) && (0..s as i64).contains(&iy);
                    let want = if inside { image.values()[(ch * s + iy as usize) * s + ix as usize] } else { 0.0 };
                    prop_assert_eq!(crop.patch.values()[(ch * patch + y) * patch + x], want);
                }
            }
        }
        // Patch centre lies within half a stored pixel of the requested centre.
        let c = crop.transform.to_image([(patch as f64 - 1.0) / 2.0, (patch as f64 - 1.0) / 2.0]);
        prop_assert!((c[0] / k - cx / k).abs() <= 0.5 + 1e-9 && (c[1] / k - cy / k).abs() <= 0.5 + 1e-9);
        // Image ↔ patch coordinates invert exactly on a 1/16-pixel grid ...
        let q = [qx as f64 / 16.0, qy as f64 / 16.0];
        prop_assert_eq!(crop.transform.to_local(crop.transform.to_image(q)), q);
        let native = [cx.round(), cy.round()];
        prop_assert_eq!(crop.transform.to_image(crop.transform.to_local(native)), native);
        // ... and to rounding elsewhere.
        let back = crop.transform.to_local(crop.transform.to_image([px, py]));
        prop_assert!((back[0] - px).abs() <= 1e-12 * 40.0 && (back[1] - py).abs() <= 1e-12 * 40.0);
    }
}

#[test]
fn datasets_round_trip_through_disk() {
    let (gen, bins, skel) = setup();
    let ds = Dataset::generate(&gen, &bins, &skel, "val", 7, 9).unwrap();
    let again = Dataset::generate(&gen, &bins, &skel, "val", 7, 9).unwrap();
    assert_eq!(ds.manifest_hash(), again.manifest_hash());
    let other = Dataset::generate(&gen, &bins, &skel, "val", 7, 10).unwrap();
    assert_ne!(ds.manifest_hash(), other.manifest_hash());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("val");
    ds.write(&path, false).unwrap();
    let back = Dataset::read(&path).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.scenes, ds.scenes);
    for i in 0..ds.len() {
        assert_eq!(back.image(i), ds.image(i));
    }
    for i in 0..ds.len() {
        assert_eq!(back.scene(i), generate_scene(&gen, &skel, &bins, scene_seed(9, i as u64)).unwrap());
    }

    // A second write needs force.
    assert!(ds.write(&path, false).is_err());
    other.write(&path, true).unwrap();
    assert_eq!(Dataset::read(&path).unwrap().manifest_hash(), other.manifest_hash());

    // Tampering with an image is detected.
    let img = path.join(&other.scenes[0].image);
    let mut bytes = std::fs::read(&img).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&img, bytes).unwrap();
    assert!(matches!(Dataset::read(&path), Err(CoreError::Data(_))));
}

#[test]
fn empty_split_is_valid() {
    let (gen, bins, skel) = setup();
    let ds = Dataset::generate(&gen, &bins, &skel, "empty", 0, 1).unwrap();
    assert!(ds.is_empty());
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path(), false).unwrap();
    let back = Dataset::read(dir.path()).unwrap();
    assert_eq!(back.manifest.count, 0);
    assert!(back.is_empty());
}
