use hdnet_core::experiment::{
    ablate, evaluate, ground_truth_predictions, predict_dataset, select_columns, summarize_ablation, train,
    ExperimentConfig, StepLog, TrainState,
};
use hdnet_core::losses::LossWeights;
use hdnet_core::model::{decode_checkpoint, encode_checkpoint, HdNet, Variant};
use hdnet_core::skeleton::Skeleton;
use hdnet_core::synth::Dataset;
use hdnet_core::CoreError;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.optim.steps = 10;
    cfg.optim.batch_size = 4;
    cfg.optim.decay_interval = 4;
    cfg.data.train_count = 12;
    cfg.data.val_count = 6;
    cfg.eval.val_every = 5;
    cfg.eval.val_persons = 6;
    cfg.eval.sequence_length = 3;
    cfg.ablate.seeds = vec![1, 2];
    cfg.ablate.steps = Some(3);
    cfg
}

fn run(cfg: &ExperimentConfig, state: &mut TrainState, data: &(Dataset, Dataset), stop: Option<u64>) -> Vec<StepLog> {
    train(cfg, state, &data.0, &data.1, None, stop, &mut |_| {}).unwrap().logs
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = tiny();
    let data = cfg.datasets().unwrap();
    let mut a = TrainState::new(&cfg).unwrap();
    let mut b = TrainState::new(&cfg).unwrap();
    let la = run(&cfg, &mut a, &data, None);
    assert_eq!(la.len(), 10);
    assert_eq!(la, run(&cfg, &mut b, &data, None));
    assert_eq!(a.model.params(), b.model.params());
    assert!(la.iter().all(|l| l.loss.is_finite()));
    assert_eq!(la.iter().filter(|l| l.val_depth_error.is_some()).count(), 2);
    // Step decay every 4 steps.
    assert_eq!(la[3].lr, cfg.optim.learning_rate);
    assert_eq!(la[4].lr, cfg.optim.learning_rate * cfg.optim.decay_factor);
}

#[test]
fn resuming_reproduces_the_unbroken_run() {
    let cfg = tiny();
    let data = cfg.datasets().unwrap();
    let mut whole = TrainState::new(&cfg).unwrap();
    let full = run(&cfg, &mut whole, &data, None);

    let mut first = TrainState::new(&cfg).unwrap();
    let mut logs = run(&cfg, &mut first, &data, Some(6));
    let bytes = encode_checkpoint(&first.to_checkpoint(&cfg));
    let mut resumed = TrainState::from_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.step, 6);
    logs.extend(run(&cfg, &mut resumed, &data, None));
    assert_eq!(logs, full);
    assert_eq!(resumed.model.params(), whole.model.params());
    assert_eq!(resumed.adam, whole.adam);
    assert_eq!(resumed.best, whole.best);
}

#[test]
fn bin_loss_alone_leaves_the_pose_branch_untouched() {
    let mut cfg = tiny();
    cfg.optim.steps = 3;
    cfg.loss = LossWeights {
        lambda_hm: 0.0,
        lambda_pose: 0.0,
        lambda_bins: 1.0,
        lambda_idx: 0.0,
    };
    let data = cfg.datasets().unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let before = state.model.params().clone();
    run(&cfg, &mut state, &data, None);
    let after = state.model.params();
    let pose = state.model.pose_branch_params();
    let depth = state.model.depth_branch_params();
    let changed = |i: usize| before.tensor(i).values() != after.tensor(i).values();
    assert!(!pose.is_empty() && !depth.is_empty());
    for &i in &pose {
        assert!(!changed(i), "pose-branch parameter `{}` moved", after.names()[i]);
    }
    // The bin output layer and the shared backbone both learn.
    assert!(depth.iter().any(|&i| changed(i)));
    let backbone: Vec<usize> = (0..after.len()).filter(|i| !pose.contains(i) && !depth.contains(i)).collect();
    assert!(!backbone.is_empty());
    assert!(backbone.iter().filter(|&&i| after.names()[i].starts_with("backbone.")).any(|&i| changed(i)));
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let mut cfg = tiny();
    cfg.optim.learning_rate = 1e300;
    let data = cfg.datasets().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let err = train(&cfg, &mut state, &data.0, &data.1, Some(dir.path()), None, &mut |_| {}).unwrap_err();
    let CoreError::NonFiniteLoss { step, dump, .. } = err else {
        panic!("unexpected error {err}");
    };
    assert!(step >= 1);
    let body: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&dump).unwrap()).unwrap();
    assert_eq!(body["step"], step);
    assert_eq!(body["persons"].as_array().unwrap().len(), cfg.optim.batch_size);
}

#[test]
fn ablation_covers_every_variant_and_seed() {
    let cfg = tiny();
    let data = cfg.datasets().unwrap();
    let mut seen = 0;
    let rows = ablate(&cfg, &[], &data.0, &data.1, &mut |_| seen += 1).unwrap();
    assert_eq!(rows.len(), 5 * 2);
    assert_eq!(seen, rows.len());
    for (i, v) in Variant::ALL.iter().enumerate() {
        for (k, &seed) in cfg.ablate.seeds.iter().enumerate() {
            let r = &rows[i * 2 + k];
            assert_eq!((r.variant.as_str(), r.seed, r.steps), (v.name(), seed, 3));
            assert_eq!(r.config_hash.len(), 64);
            assert!(!r.diverged && r.depth_rel_median.is_finite());
        }
    }
    let hashes: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
    assert_eq!(hashes.len(), rows.len());
    let summary = summarize_ablation(&rows);
    assert_eq!(summary.len(), 5);
    assert!(summary.iter().all(|s| s.runs == 2 && s.depth_rel_median_std.is_finite()));
}

#[test]
fn diverging_runs_are_flagged_not_fatal() {
    let mut cfg = tiny();
    cfg.optim.learning_rate = 1e300;
    let data = cfg.datasets().unwrap();
    let rows = ablate(&cfg, &[Variant::Full, Variant::NoGnn], &data.0, &data.1, &mut |_| {}).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.diverged && r.depth_rel_median.is_nan()));
    assert_eq!(rows[0].variant, "full");
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let cfg = tiny();
    let (_, val) = cfg.datasets().unwrap();
    let report = evaluate(&val, &ground_truth_predictions(&val), &cfg.eval).unwrap();
    let m = report.overall();
    for k in ["mrpe", "mrpe_x", "mrpe_y", "mrpe_z"] {
        assert_eq!(m[k], 0.0, "{k}");
    }
    for t in ["250", "200", "150", "100"] {
        assert_eq!(m[&format!("ap_{t}")], 1.0);
        assert_eq!(m[&format!("ar_{t}")], 1.0);
    }
    assert_eq!(m["pck_abs"], 100.0);
    assert_eq!(m["pck_rel"], 100.0);
    // One overall row plus one per sequence of three scenes.
    assert_eq!(report.rows.len(), 1 + 2);
}

#[test]
fn evaluation_is_deterministic_and_column_selectable() {
    let cfg = tiny();
    let (_, val) = cfg.datasets().unwrap();
    let model = HdNet::new(cfg.model.clone(), cfg.skeleton().unwrap(), 4).unwrap();
    let csv = || {
        let preds = predict_dataset(&model, &val, &cfg.eval, None).unwrap();
        evaluate(&val, &preds, &cfg.eval).unwrap().to_csv("full", &select_columns(&[]).unwrap())
    };
    let a = csv();
    assert_eq!(a, csv());
    let cols = select_columns(&["mrpe".into(), "ap_150".into()]).unwrap();
    assert_eq!(cols, ["mrpe", "mrpe_x", "mrpe_y", "mrpe_z", "ap_150"]);
    let preds = predict_dataset(&model, &val, &cfg.eval, None).unwrap();
    let sub = evaluate(&val, &preds, &cfg.eval).unwrap().to_csv("full", &cols);
    assert_eq!(sub.lines().next().unwrap(), "variant,sequence,mrpe,mrpe_x,mrpe_y,mrpe_z,ap_150");
    assert!(select_columns(&["nope".into()]).is_err());
}

#[test]
fn skeleton_mismatch_is_rejected() {
    let cfg = tiny();
    let (_, val) = cfg.datasets().unwrap();
    let skel = Skeleton::new(vec!["a".into(), "b".into()], vec![(0, 1)], 0).unwrap();
    let model = HdNet::new(cfg.model.clone(), skel, 0).unwrap();
    assert!(matches!(predict_dataset(&model, &val, &cfg.eval, None), Err(CoreError::Data(_))));
}
