use aortaseg::augment::AugmentConfig;
use aortaseg::checkpoint::Checkpoint;
use aortaseg::infer::WindowConfig;
use aortaseg::phantom::dataset_case;
use aortaseg::segresnet::{ArchConfig, NormalizationMode};
use aortaseg::train::{checkpoint_path, prepare_image, train_all, train_fold, validate_model, CaseData, TrainConfig};

fn cases(n: usize) -> Vec<CaseData> {
    (0..n)
        .map(|i| {
            let c = dataset_case([32; 3], 7, i, false).unwrap();
            CaseData {
                id: format!("case{i:02}"),
                fold: i % 5,
                image: c.image,
                label: c.label,
            }
        })
        .collect()
}

fn tiny() -> TrainConfig {
    TrainConfig {
        lr0: 1e-2,
        epochs: 2,
        effective_batch: 2,
        val_interval: 1,
        arch: ArchConfig {
            init_filters: 2,
            blocks_per_stage: vec![1, 1],
            deep_supervision_levels: 1,
            ..ArchConfig::default()
        },
        augment: AugmentConfig {
            crop_size: [16; 3],
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn smoke_run_writes_loadable_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f1").join("best.ckpt");
    let data = cases(10);
    let cfg = TrainConfig { epochs: 3, ..tiny() };
    let ck = train_fold(&cfg, &data, 1, 0, Some(&path)).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.params, ck.params);
    assert_eq!(loaded.meta, ck.meta);
    let m = &ck.meta;
    assert_eq!((m.fold, m.repeat, m.seed), (1, 0, 0));
    assert_eq!(m.normalization_mode, NormalizationMode::Zscore);
    assert_eq!(m.train_loss_history.len(), 3);
    assert!(m.train_loss_history.iter().all(|l| l.is_finite()));
    assert_eq!(m.val_dice_history.len(), 3);
    // best epoch is the last one reaching the maximum
    let top = m.val_dice_history.iter().map(|(_, d)| *d).fold(f64::NEG_INFINITY, f64::max);
    let best_epoch = m.val_dice_history.iter().rev().find(|(_, d)| *d == top).unwrap().0;
    assert_eq!((m.epoch, m.val_dice), (best_epoch, top));
    assert!((0.0..=1.0).contains(&m.val_dice));
    loaded.to_model().unwrap();
}

#[test]
fn stored_val_dice_is_reproduced_by_the_loaded_model() {
    let data = cases(10);
    let cfg = tiny();
    for repeat in [0, 1] {
        let ck = train_fold(&cfg, &data, 2, repeat, None).unwrap();
        let model = ck.to_model().unwrap();
        let val: Vec<&CaseData> = data.iter().filter(|c| c.fold == 2).collect();
        let mode = cfg.normalization_for(repeat);
        let imgs: Vec<_> = val.iter().map(|c| prepare_image(c, mode, &cfg).unwrap()).collect();
        let labs: Vec<_> = val.iter().map(|c| c.label.clone()).collect();
        let d = validate_model(&model, &imgs, &labs, &WindowConfig::new(cfg.augment.crop_size, cfg.val_overlap)).unwrap();
        assert_eq!(d, ck.meta.val_dice, "repeat {repeat}");
    }
}

#[test]
fn same_seed_same_weights() {
    let data = cases(10);
    let a = train_fold(&tiny(), &data, 0, 1, None).unwrap();
    let b = train_fold(&tiny(), &data, 0, 1, None).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.buffers, b.buffers);
    let c = train_fold(&TrainConfig { seed: 5, ..tiny() }, &data, 0, 1, None).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn validation_cases_never_train() {
    let mut data = cases(10);
    // the same case id in two folds
    data[6].id = data[0].id.clone();
    let e = train_fold(&tiny(), &data, 1, 0, None).unwrap_err();
    assert_eq!(e.kind(), "training");
    assert!(e.to_string().contains("both training and validation"));

    let data: Vec<CaseData> = cases(10).into_iter().filter(|c| c.fold != 3).collect();
    let e = train_fold(&tiny(), &data, 3, 0, None).unwrap_err();
    assert!(e.to_string().contains("empty validation split"));
}

#[test]
fn train_all_emits_fifteen_checkpoints_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let data = cases(10);
    let cfg = TrainConfig { epochs: 1, ..tiny() };
    let runs = train_all(&cfg, &data, dir.path()).unwrap();
    assert_eq!(runs.len(), 15);
    assert!(runs.iter().all(|r| !r.skipped && r.error.is_none()));
    let mut seeds = Vec::new();
    for repeat in 0..3 {
        for fold in 0..5 {
            let ck = Checkpoint::load(&checkpoint_path(dir.path(), fold, repeat)).unwrap();
            assert_eq!((ck.meta.fold, ck.meta.repeat), (fold, repeat));
            let want = if repeat == 0 {
                NormalizationMode::Zscore
            } else {
                NormalizationMode::PercentileSoftclip
            };
            assert_eq!(ck.meta.normalization_mode, want);
            seeds.push(ck.meta.seed);
        }
    }
    assert_eq!(seeds, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);

    let victim = checkpoint_path(dir.path(), 3, 2);
    let before = std::fs::read(&victim).unwrap();
    std::fs::remove_file(&victim).unwrap();
    let other = checkpoint_path(dir.path(), 0, 1);
    std::fs::write(&other, b"garbage").unwrap();
    let again = train_all(&cfg, &data, dir.path()).unwrap();
    let retrained: Vec<(usize, usize)> = again.iter().filter(|r| !r.skipped).map(|r| (r.fold, r.repeat)).collect();
    assert_eq!(retrained, vec![(0, 1), (3, 2)]);
    assert_eq!(std::fs::read(&victim).unwrap(), before);
}

#[test]
fn paper_literal_keeps_every_repeat_on_zscore() {
    let cfg = TrainConfig {
        paper_literal: true,
        ..tiny()
    };
    assert!((0..3).all(|r| cfg.normalization_for(r) == NormalizationMode::Zscore));
    let ck = train_fold(&TrainConfig { epochs: 1, ..cfg }, &cases(10), 4, 2, None).unwrap();
    assert_eq!(ck.meta.normalization_mode, NormalizationMode::Zscore);
    assert_eq!(ck.meta.seed, 2);
}
