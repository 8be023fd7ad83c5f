use piqa::checkpoint::Checkpoint;
use piqa::dataset::{make_synthetic_with, SyntheticConfig};
use piqa::image::ImageTensor;
use piqa::model::ForwardOptions;
use piqa::aggregation::ScoreForm;
use piqa::nn::Module;
use piqa::trainer::{Stage, TrainConfig, TrainError, Trainer};

type Set = Vec<(ImageTensor, f64)>;

fn synthetic(n: usize, size: usize, seed: u64) -> Set {
    let cfg = SyntheticConfig {
        width: size,
        height: size,
        ..SyntheticConfig::default()
    };
    make_synthetic_with(&cfg, n, seed)
        .unwrap()
        .into_iter()
        .map(|s| (s.image, s.mos))
        .collect()
}

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.arch.local.channels = 4;
    cfg.arch.local.head.hidden1 = 8;
    cfg.arch.local.head.hidden2 = 4;
    cfg.arch.roi_head.hidden1 = 8;
    cfg.arch.roi_head.hidden2 = 4;
    cfg.arch.embed_channels = 4;
    cfg.arch.dim.branch_channels = 4;
    cfg.arch.dim.out_channels = 4;
    cfg.arch.backbone.stages = vec![4, 4, 8, 8, 8];
    cfg.batch_size = 4;
    cfg
}

fn param_bits(t: &Trainer) -> Vec<(String, Vec<u32>)> {
    let mut refs = Vec::new();
    t.net.params("", &mut refs);
    refs.into_iter()
        .map(|(n, p)| (n, p.value.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn default_schedule_changes_lr_at_stage_boundaries() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.total_epochs(), 90);
    assert_eq!(cfg.batch_size, 48);
    for (epoch, lr) in [(1, 1e-4), (30, 1e-4), (31, 5e-4), (60, 5e-4), (61, 1e-5), (90, 1e-5)] {
        assert_eq!(cfg.lr_for_epoch(epoch), lr, "epoch {epoch}");
    }
    assert_eq!(cfg.stage_ends(), vec![30, 60, 90]);
    assert_eq!(cfg.lr_at_step(0, 10), 1e-4);
    assert_eq!(cfg.lr_at_step(299, 10), 1e-4);
    assert_eq!(cfg.lr_at_step(300, 10), 5e-4);
    assert_eq!(cfg.lr_at_step(600, 10), 1e-5);
}

#[test]
fn optimizer_steps_follow_the_stages() {
    let mut cfg = tiny();
    cfg.stages = vec![
        Stage { epochs: 1, lr: 1e-3 },
        Stage { epochs: 2, lr: 5e-4 },
        Stage { epochs: 1, lr: 1e-5 },
    ];
    let train = synthetic(8, 32, 1);
    let mut t = Trainer::new(cfg).unwrap();
    for _ in 0..4 {
        t.run_epoch(&train).unwrap();
    }
    assert_eq!(t.lr_trace, vec![1e-3, 1e-3, 5e-4, 5e-4, 5e-4, 5e-4, 1e-5, 1e-5]);
    assert_eq!(t.adam.state().step, 8);
}

#[test]
fn checkpoint_reload_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let train = synthetic(8, 32, 2);
    let mut cfg = tiny();
    cfg.stages = vec![Stage { epochs: 2, lr: 1e-3 }];
    let mut t = Trainer::new(cfg).unwrap().with_run_dir(dir.path());
    t.fit(&train, &train).unwrap();
    let ckpt_dir = dir.path().join("ckpt_2");
    assert!(ckpt_dir.join("manifest.json").is_file());
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss,plcc,srcc,rmse\n"));
    assert_eq!(history.lines().count(), 3);

    let loaded = Checkpoint::load(&ckpt_dir).unwrap();
    let mut net = loaded.build_net().unwrap();
    let mut resumed = Trainer::resume(&loaded).unwrap();
    assert_eq!(param_bits(&resumed), param_bits(&t));
    assert_eq!(resumed.adam.state(), t.adam.state());
    assert_eq!(resumed.adam.moments(), t.adam.moments());
    for (img, _) in &train {
        let a = t.net.predict(img, ScoreForm::MeanShifted, ForwardOptions::default()).unwrap();
        let b = net.predict(img, ScoreForm::MeanShifted, ForwardOptions::default()).unwrap();
        assert_eq!(a.score.value.to_bits(), b.score.value.to_bits());
        assert_eq!(a.pmos, b.pmos);
        assert_eq!(a.roi, b.roi);
    }
    assert_eq!(resumed.epoch, 2);
    resumed.run_epoch(&train).unwrap();
}

#[test]
fn without_roi_head_no_roi_parameters_exist_or_move() {
    let mut cfg = tiny();
    cfg.use_roi = false;
    let train = synthetic(8, 32, 3);
    let mut t = Trainer::new(cfg).unwrap();
    assert!(t.net.roi.is_none());
    t.run_epoch(&train).unwrap();
    let mut refs = Vec::new();
    t.net.params("", &mut refs);
    assert!(!refs.iter().any(|(n, _)| n.starts_with("roi_head")));
    assert!(refs.iter().any(|(n, _)| n.starts_with("local_iqa")));
    assert_eq!(t.score_form(), ScoreForm::Plain);
}

#[test]
fn frozen_backbone_does_not_move() {
    let mut cfg = tiny();
    cfg.arch.backbone.freeze = true;
    let train = synthetic(8, 32, 4);
    let mut t = Trainer::new(cfg).unwrap();
    let before = param_bits(&t);
    t.run_epoch(&train).unwrap();
    let after = param_bits(&t);
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if name.starts_with("backbone.") {
            assert_eq!(a, b, "{name}");
        }
    }
    assert!(before
        .iter()
        .zip(&after)
        .any(|((n, a), (_, b))| n.starts_with("local_iqa") && a != b));
}

#[test]
fn same_seed_same_weights() {
    let train = synthetic(8, 32, 5);
    let run = || {
        let mut t = Trainer::new(tiny()).unwrap();
        t.run_epoch(&train).unwrap();
        t.run_epoch(&train).unwrap();
        param_bits(&t)
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_stays_finite_for_500_steps() {
    let mut cfg = TrainConfig::desk();
    cfg.batch_size = 4;
    let train = synthetic(32, 32, 6);
    let mut t = Trainer::new(cfg).unwrap();
    let steps_per_epoch = train.len() / t.cfg.batch_size;
    let mut k = 0;
    while t.step < 500 {
        let lr = t.cfg.lr_at_step(t.step, steps_per_epoch);
        let batch: Vec<&ImageTensor> = (0..4).map(|i| &train[(k + i) % train.len()].0).collect();
        let targets: Vec<f64> = (0..4).map(|i| train[(k + i) % train.len()].1).collect();
        let loss = t.train_step(&batch, &targets, lr).unwrap();
        assert!(loss.is_finite(), "step {}: loss {loss}", t.step);
        k += 4;
    }
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let mut train = synthetic(8, 32, 7);
    train[0].1 = f64::NAN;
    let mut cfg = tiny();
    cfg.batch_size = 8;
    let mut t = Trainer::new(cfg).unwrap();
    match t.run_epoch(&train) {
        Err(TrainError::NonFiniteLoss { epoch, batch, .. }) => {
            assert_eq!((epoch, batch), (1, 0));
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny();
    cfg.use_highlevel = false;
    assert!(matches!(Trainer::new(cfg), Err(TrainError::Config(_))));
    let mut cfg = tiny();
    cfg.stages.clear();
    assert!(Trainer::new(cfg).is_err());
    let train = synthetic(8, 32, 8);
    let mut cfg = tiny();
    cfg.batch_size = 9;
    let mut t = Trainer::new(cfg).unwrap();
    assert!(matches!(t.run_epoch(&train), Err(TrainError::BatchTooLarge { .. })));
}
