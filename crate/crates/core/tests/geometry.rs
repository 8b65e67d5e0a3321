use hdnet_core::geometry::{
    bin_index, decode_depth, denormalize_depth, encode_bins, normalize_depth, BinConfig, BinDistribution,
    CameraIntrinsics,
};
use hdnet_core::skeleton::{build_adjacency, normalize_adjacency, Skeleton};
use proptest::prelude::*;

const BINS: BinConfig = BinConfig {
    alpha: 1.0,
    beta: 8.0,
    num_bins: 71,
};

/// Depth at a bin coordinate, evaluated as a geometric progression.
fn oracle_depth(b: f64, cfg: &BinConfig, focal: f64) -> f64 {
    focal * cfg.alpha * (cfg.beta / cfg.alpha).powf(b / (cfg.num_bins - 1) as f64)
}

fn camera() -> impl Strategy<Value = CameraIntrinsics> {
    (200.0..3000.0f64, 200.0..3000.0f64, -500.0..2500.0f64, -500.0..2500.0f64)
        .prop_map(|(fx, fy, cx, cy)| CameraIntrinsics::new(fx, fy, cx, cy).unwrap())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn codec_round_trips(d_hat in 1.0..=8.0f64) {
        let b = bin_index(d_hat, &BINS).unwrap();
        prop_assert!(!b.clamped);
        let dist = encode_bins(b.b, BINS.num_bins).unwrap();
        let back = BINS.normalized_depth_at(dist.expected_index());
        prop_assert!(rel(back, d_hat) < 1e-9, "{} -> {}", d_hat, back);
    }

    #[test]
    fn bin_index_matches_log_ratio(d_hat in 1.0..=8.0f64) {
        let expected = 70.0 * (d_hat.log2() / 3.0);
        prop_assert!((bin_index(d_hat, &BINS).unwrap().b - expected).abs() < 1e-12);
    }

    #[test]
    fn bin_index_is_strictly_increasing(a in 1.0..8.0f64, gap in 1e-9..1.0f64) {
        let b = (a + gap).min(8.0);
        prop_assume!(b > a);
        prop_assert!(bin_index(a, &BINS).unwrap().b < bin_index(b, &BINS).unwrap().b);
    }

    #[test]
    fn decode_is_strictly_increasing(a in 0.0..70.0f64, gap in 1e-6..10.0f64, cam in camera()) {
        let b = (a + gap).min(70.0);
        let da = decode_depth(&encode_bins(a, 71).unwrap(), &BINS, &cam).unwrap();
        let db = decode_depth(&encode_bins(b, 71).unwrap(), &BINS, &cam).unwrap();
        prop_assert!(da < db);
    }

    #[test]
    fn decode_matches_geometric_progression(b in 0.0..=70.0f64, cam in camera()) {
        let d = decode_depth(&encode_bins(b, 71).unwrap(), &BINS, &cam).unwrap();
        prop_assert!(rel(d, oracle_depth(b, &BINS, (cam.fx * cam.fy).sqrt())) < 1e-12);
    }

    #[test]
    fn decode_scales_with_focal_length(
        weights in prop::collection::vec(0.0..1.0f64, 71),
        cam in camera(),
        k in -4i32..=4,
        s in 0.25..4.0f64,
    ) {
        let sum: f64 = weights.iter().sum();
        prop_assume!(sum > 1e-3);
        let dist = BinDistribution::new(weights.iter().map(|w| w / sum).collect()).unwrap();
        let base = decode_depth(&dist, &BINS, &cam).unwrap();
        // Power-of-two scales are exact in binary floating point.
        let p = 2f64.powi(k);
        let scaled = CameraIntrinsics::new(cam.fx * p, cam.fy * p, cam.cx, cam.cy).unwrap();
        prop_assert_eq!(decode_depth(&dist, &BINS, &scaled).unwrap(), base * p);
        let scaled = CameraIntrinsics::new(cam.fx * s, cam.fy * s, cam.cx, cam.cy).unwrap();
        prop_assert!(rel(decode_depth(&dist, &BINS, &scaled).unwrap(), base * s) < 4.0 * f64::EPSILON);
    }

    #[test]
    fn normalization_inverts(d in 1.0..1e5f64, cam in camera()) {
        let d_hat = normalize_depth(d, &cam).unwrap();
        prop_assert!(rel(d_hat, d / (cam.fx * cam.fy).sqrt()) < 1e-15);
        prop_assert!(rel(denormalize_depth(d_hat, &cam), d) < 1e-15);
    }

    #[test]
    fn projection_inverts_back_projection(
        u in -1000.0..3000.0f64,
        v in -1000.0..3000.0f64,
        d in 10.0..1e5f64,
        cam in camera(),
    ) {
        let p = cam.back_project(u, v, d).unwrap();
        prop_assert_eq!(p[2], d);
        let [u2, v2] = cam.project(p).unwrap();
        prop_assert!((u2 - u).abs() <= 1e-9 * u.abs().max(1.0));
        prop_assert!((v2 - v).abs() <= 1e-9 * v.abs().max(1.0));
    }

    #[test]
    fn back_projection_inverts_projection(
        x in -5e3..5e3f64,
        y in -5e3..5e3f64,
        z in 100.0..1e4f64,
        cam in camera(),
    ) {
        let [u, v] = cam.project([x, y, z]).unwrap();
        let p = cam.back_project(u, v, z).unwrap();
        prop_assert!((p[0] - x).abs() <= 1e-9 * x.abs().max(1.0));
        prop_assert!((p[1] - y).abs() <= 1e-9 * y.abs().max(1.0));
    }

    #[test]
    fn out_of_range_depths_clamp_to_the_ends(d_hat in 0.01..100.0f64) {
        let b = bin_index(d_hat, &BINS).unwrap();
        prop_assert_eq!(b.clamped, !(1.0..=8.0).contains(&d_hat));
        prop_assert!((0.0..=70.0).contains(&b.b));
        if d_hat < 1.0 {
            prop_assert_eq!(b.b, 0.0);
        }
        if d_hat > 8.0 {
            prop_assert_eq!(b.b, 70.0);
        }
    }
}

/// A random tree over `n` joints, relabelled by a random permutation.
fn random_skeleton() -> impl Strategy<Value = Skeleton> {
    (2usize..12)
        .prop_flat_map(|n| {
            let parents: Vec<_> = (1..n).map(|i| 0..i).collect();
            (parents, Just((0..n).collect::<Vec<usize>>()).prop_shuffle(), 0..n)
        })
        .prop_map(|(parents, perm, root)| {
            let n = perm.len();
            let names = (0..n).map(|i| format!("j{i}")).collect();
            let edges = parents.iter().enumerate().map(|(i, &p)| (perm[i + 1], perm[p])).collect();
            Skeleton::new(names, edges, root).unwrap()
        })
}

proptest! {
    #[test]
    fn normalized_rows_are_stochastic(skel in random_skeleton()) {
        let raw = build_adjacency(&skel);
        let norm = normalize_adjacency(&raw).unwrap();
        let n = skel.num_joints();
        for i in 0..n {
            let sum: f64 = norm.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            let degree = skel.edges().iter().filter(|&&(a, b)| a == i || b == i).count();
            prop_assert_eq!(raw.row(i).iter().sum::<f64>(), (degree + 1) as f64);
            for j in 0..n {
                prop_assert_eq!(raw.get(i, j), raw.get(j, i));
                prop_assert!((0.0..=1.0).contains(&norm.get(i, j)));
            }
        }
    }

    #[test]
    fn permutation_commutes_with_normalization(
        skel in random_skeleton(),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = skel.num_joints();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let moved = skel.permuted(&perm).unwrap();
        let a = normalize_adjacency(&build_adjacency(&skel)).unwrap().conjugated(&perm);
        let b = normalize_adjacency(&build_adjacency(&moved)).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }
}
