use hdnet_autodiff::{GradCheckConfig, Tape, Tensor, Var};
use hdnet_core::experiment::{audit_model_config, objective_check, ExperimentConfig};
use hdnet_core::geometry::BoundingBox;
use hdnet_core::losses::{model_losses, LossWeights};
use hdnet_core::model::{heads, DepthOutput, FeaturePyramid, ForwardOutput, HdNet, ModelConfig, ModelInput, Variant};
use hdnet_core::skeleton::{build_adjacency, normalize_adjacency, Skeleton};
use hdnet_core::synth::{build_batch, person_samples, Dataset, SampleBatch};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        ..ExperimentConfig::default().model
    }
}

fn dataset(cfg: &ModelConfig) -> Dataset {
    let exp = ExperimentConfig::default();
    Dataset::generate(&exp.gen, &cfg.bins, &Skeleton::default_human(), "test", 6, 11).unwrap()
}

fn batch(cfg: &ModelConfig, ds: &Dataset, n: usize) -> SampleBatch {
    let refs = person_samples(ds);
    build_batch(ds, &refs[..n.min(refs.len())], cfg, 0.75).unwrap()
}

fn values(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).values().to_vec()
}

#[test]
fn pyramid_levels_have_expected_sizes() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.input_size, 256);
    let model = HdNet::new(cfg.clone(), Skeleton::default_human(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = Tensor::new(&[1, 3, 256, 256], (0..3 * 256 * 256).map(|_| rng.gen()).collect()).unwrap();
    let mut tape = Tape::new();
    let mut g = model.graph(&mut tape, false, false);
    let img = g.tape.constant(image);
    let pyr = model.backbone_forward(&mut g, img).unwrap();
    let shapes: Vec<Vec<usize>> = pyr.levels.iter().map(|&l| g.tape.shape(l).to_vec()).collect();
    let c = cfg.feature_channels;
    assert_eq!(shapes, vec![vec![1, c, 16, 16], vec![1, c, 32, 32], vec![1, c, 64, 64], vec![1, c, 128, 128]]);
    // Resampling factor of each level is its stride over the heatmap stride (4).
    let factors: Vec<f64> = [16.0, 8.0, 4.0, 2.0].iter().map(|s| s / cfg.heatmap_stride() as f64).collect();
    assert_eq!(cfg.merge_factors().to_vec(), factors);
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_config(Variant::Full);
    let ds = dataset(&cfg);
    let b = batch(&cfg, &ds, 4);
    let run = || {
        let model = HdNet::new(cfg.clone(), ds.skeleton.clone(), 42).unwrap();
        let mut tape = Tape::new();
        let mut g = model.graph(&mut tape, true, true);
        let out = model.forward(&mut g, &b.input).unwrap();
        let (loss, _) = model_losses(g.tape, &out, &b.targets, &LossWeights::default()).unwrap();
        let (vars, _) = g.into_parts();
        let snapshot = (values(&tape, out.heatmaps), values(&tape, out.coords), values(&tape, loss));
        tape.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
        (snapshot, grads)
    };
    assert_eq!(run(), run());
}

#[test]
fn shared_branch_reuses_the_pose_features() {
    let ds = dataset(&small_config(Variant::Full));
    for v in Variant::ALL {
        let cfg = small_config(v);
        let model = HdNet::new(cfg.clone(), ds.skeleton.clone(), 1).unwrap();
        let b = batch(&cfg, &ds, 2);
        let mut tape = Tape::new();
        let mut g = model.graph(&mut tape, false, false);
        let out = model.forward(&mut g, &b.input).unwrap();
        assert_eq!(out.pose_features == out.depth_features, v == Variant::SharedBranch, "{v}");
    }
}

#[test]
fn gradient_reaches_every_pyramid_level() {
    let cfg = small_config(Variant::Full);
    let ds = dataset(&cfg);
    let b = batch(&cfg, &ds, 3);
    let model = HdNet::new(cfg, ds.skeleton.clone(), 3).unwrap();
    // Evaluate the pyramid once, then re-enter it as leaves.
    let levels: Vec<Tensor> = {
        let mut tape = Tape::new();
        let mut g = model.graph(&mut tape, true, false);
        let img = g.tape.constant(b.input.images.clone());
        let pyr = model.backbone_forward(&mut g, img).unwrap();
        pyr.levels.iter().map(|&l| g.tape.value(l).clone()).collect()
    };
    let mut tape = Tape::new();
    let mut g = model.graph(&mut tape, true, false);
    let leaves: Vec<Var> = levels.iter().map(|t| g.tape.leaf(t.clone().with_requires_grad(true))).collect();
    let pyr = FeaturePyramid {
        levels: [leaves[0], leaves[1], leaves[2], leaves[3]],
    };
    let (fp, fd) = model.multiscale_merge(&mut g, &pyr).unwrap();
    let hm = model.pose_branch(&mut g, fp).unwrap();
    let coords = heads::soft_argmax_2d(g.tape, hm, 16, 16).unwrap();
    let depth = model.depth_head(&mut g, hm, fd).unwrap();
    let out = ForwardOutput {
        pyramid: pyr,
        pose_features: fp,
        depth_features: fd,
        heatmaps: hm,
        coords,
        depth,
    };
    let (loss, _) = model_losses(g.tape, &out, &b.targets, &LossWeights::default()).unwrap();
    tape.backward(loss).unwrap();
    for (k, &l) in leaves.iter().enumerate() {
        let g = tape.grad(l).unwrap();
        assert!(g.iter().any(|&x| x != 0.0), "no gradient at pyramid level {k}");
    }
}

#[test]
fn every_variant_produces_valid_predictions() {
    let base = small_config(Variant::Full);
    let ds = dataset(&base);
    for v in Variant::ALL {
        let cfg = small_config(v);
        let model = HdNet::new(cfg.clone(), ds.skeleton.clone(), 5).unwrap();
        let b = batch(&cfg, &ds, 5);
        let mut tape = Tape::new();
        let mut g = model.graph(&mut tape, false, false);
        let out = model.forward(&mut g, &b.input).unwrap();
        let hm = values(&tape, out.heatmaps);
        for plane in hm.chunks(16 * 16) {
            assert!((plane.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{v}");
        }
        let preds = model.decode(&tape, &out, &b.crops, &b.cameras).unwrap();
        assert_eq!(preds.len(), 5);
        for (p, cam) in preds.iter().zip(&b.cameras) {
            let f = cam.focal();
            assert!(p.depth >= cfg.bins.alpha * f * (1.0 - 1e-12) && p.depth <= cfg.bins.beta * f * (1.0 + 1e-12), "{v}");
            assert_eq!(p.bins.len(), cfg.bins.num_bins);
            assert!((p.bins.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(p.pose2d_image.len(), ds.skeleton.num_joints());
            assert!(p.root3d.iter().all(|x| x.is_finite()));
        }
    }
}

#[test]
fn global_pooling_ignores_the_heatmaps() {
    let ds = dataset(&small_config(Variant::Full));
    let depth_of = |v: Variant, boxes: Vec<BoundingBox>| {
        let cfg = small_config(v);
        let model = HdNet::new(cfg.clone(), ds.skeleton.clone(), 9).unwrap();
        let mut b = batch(&cfg, &ds, 2);
        b.input.boxes = Some(boxes);
        let mut tape = Tape::new();
        let mut g = model.graph(&mut tape, false, false);
        let out = model.forward(&mut g, &b.input).unwrap();
        match out.depth {
            DepthOutput::Bins { probs, .. } => values(&tape, probs),
            DepthOutput::Direct { d_hat } => values(&tape, d_hat),
        }
    };
    let full = BoundingBox::new(0.0, 0.0, 15.0, 15.0).unwrap();
    let corner = BoundingBox::new(0.0, 0.0, 3.0, 3.0).unwrap();
    assert_eq!(
        depth_of(Variant::NoHmPooling, vec![full; 2]),
        depth_of(Variant::NoHmPooling, vec![corner; 2])
    );
    assert_ne!(depth_of(Variant::Full, vec![full; 2]), depth_of(Variant::Full, vec![corner; 2]));
}

#[test]
fn ground_truth_outputs_decode_to_ground_truth_roots() {
    let cfg = small_config(Variant::Full);
    let ds = dataset(&cfg);
    let refs = person_samples(&ds);
    let b = build_batch(&ds, &refs, &cfg, 0.75).unwrap();
    let model = HdNet::new(cfg, ds.skeleton.clone(), 0).unwrap();
    let mut tape = Tape::new();
    let hm = tape.constant(b.targets.heatmaps.clone());
    let coords = tape.constant(b.targets.coords.clone());
    let probs = tape.constant(b.targets.bins.clone());
    let b_hat = tape.constant(b.targets.b.clone());
    let out = ForwardOutput {
        pyramid: FeaturePyramid { levels: [hm; 4] },
        pose_features: hm,
        depth_features: hm,
        heatmaps: hm,
        coords,
        depth: DepthOutput::Bins { probs, b_hat },
    };
    let preds = model.decode(&tape, &out, &b.crops, &b.cameras).unwrap();
    let root = ds.skeleton.root_index();
    for (p, r) in preds.iter().zip(&refs) {
        let gt = ds.scenes[r.scene].persons[r.person].pose3d[root];
        for k in 0..3 {
            assert!((p.root3d[k] - gt[k]).abs() <= 1e-9 * gt[2], "{:?} vs {gt:?}", p.root3d);
        }
    }
}

#[test]
fn full_objective_passes_finite_differences() {
    let cfg = ExperimentConfig::default();
    for v in Variant::ALL {
        let model_cfg = audit_model_config(&small_config(v));
        let r = objective_check(&model_cfg, &cfg.loss, &cfg.skeleton().unwrap(), 7, &GradCheckConfig::default(), |_| {})
            .unwrap();
        assert!(r.passed && r.max_rel_error < 1e-4, "{v}: {r:?}");
    }
}

#[test]
fn detached_pooling_is_not_the_loss_derivative() {
    let cfg = ExperimentConfig::default();
    let model_cfg = ModelConfig {
        attention_gradient: false,
        ..audit_model_config(&cfg.model)
    };
    let r = objective_check(&model_cfg, &cfg.loss, &cfg.skeleton().unwrap(), 7, &GradCheckConfig::default(), |_| {})
        .unwrap();
    assert!(!r.passed);
}

fn random_graph_input() -> impl Strategy<Value = (Skeleton, Vec<usize>, u64)> {
    (3usize..9)
        .prop_flat_map(|n| {
            let parents: Vec<_> = (1..n).map(|i| 0..i).collect();
            (parents, Just((0..n).collect::<Vec<usize>>()).prop_shuffle(), any::<u64>())
        })
        .prop_map(|(parents, perm, seed)| {
            let n = perm.len();
            let names = (0..n).map(|i| format!("j{i}")).collect();
            let edges = parents.iter().enumerate().map(|(i, &p)| (i + 1, p)).collect();
            (Skeleton::new(names, edges, 0).unwrap(), perm, seed)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Relabelling joints in both the features and the adjacency leaves the
    /// node-pooled output of a GNN stack unchanged.
    #[test]
    fn gnn_pooling_is_permutation_invariant((skel, perm, seed) in random_graph_input()) {
        let n = skel.num_joints();
        let c = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = rand_t(&[2, n, c]);
        let ws: Vec<Tensor> = (0..4).map(|_| rand_t(&[c, c])).collect();
        let permuted_x = {
            let v = x.values();
            let vals = (0..2)
                .flat_map(|b| perm.iter().flat_map(move |&p| v[(b * n + p) * c..][..c].to_vec()))
                .collect();
            Tensor::new(&[2, n, c], vals).unwrap()
        };
        let run = |skel: &Skeleton, x: &Tensor| {
            let adj = normalize_adjacency(&build_adjacency(skel)).unwrap();
            let mut t = Tape::new();
            let mut h = t.constant(x.clone());
            for layer in ws.chunks(2) {
                let ws = t.constant(layer[0].clone());
                let wi = t.constant(layer[1].clone());
                let m = heads::gnn_mix(&mut t, h, &adj, ws, wi).unwrap();
                h = t.relu(m).unwrap();
            }
            let pooled = t.mean_axis(h, 1).unwrap();
            t.value(pooled).values().to_vec()
        };
        let a = run(&skel, &x);
        let b = run(&skel.permuted(&perm).unwrap(), &permuted_x);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn model_input_rejects_wrong_shapes() {
    let cfg = small_config(Variant::Full);
    let model = HdNet::new(cfg, Skeleton::default_human(), 0).unwrap();
    let mut tape = Tape::new();
    let mut g = model.graph(&mut tape, false, false);
    let input = ModelInput {
        images: Tensor::zeros(&[1, 3, 32, 32]),
        boxes: None,
    };
    assert!(model.forward(&mut g, &input).is_err());
}
