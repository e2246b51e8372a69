use cotrain::detector::{Detector, DetectorConfig};
use cotrain::params::Checkpoint;
use cotrain::scenes::{build_split, LabeledDataset, SceneConfig, ShiftParams, UnlabeledImages};
use cotrain::trainer::{
    run_pipeline, stage_pretrain, PipelineInputs, RunPaths, Stage, TrainConfig, TrainOutcome,
    Variant, VariantFlags,
};

fn data(n: usize) -> (LabeledDataset, UnlabeledImages) {
    let scene = SceneConfig::default();
    let source = build_split(n, &scene, &ShiftParams::identity(), 100).unwrap();
    let target = build_split(n, &scene, &ShiftParams::default_target(), 200)
        .unwrap()
        .into_unlabeled();
    (source, target)
}

fn short(iters: [usize; 3]) -> TrainConfig {
    TrainConfig {
        iters_pretrain: iters[0],
        iters_align: iters[1],
        iters_full: iters[2],
        lr: 0.002,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn run(
    train: TrainConfig,
    flags: VariantFlags,
    source: &LabeledDataset,
    target: &UnlabeledImages,
) -> TrainOutcome {
    run_pipeline(
        PipelineInputs {
            detector: DetectorConfig::default(),
            train,
            flags,
            source,
            target,
            data_id: "test".into(),
            pretrained: None,
        },
        None,
    )
    .unwrap()
}

#[test]
fn zero_iterations_return_the_initialization() {
    let (source, target) = data(2);
    let out = run(short([0, 0, 0]), Variant::Full.flags(), &source, &target);
    assert!(out.log.is_empty());
    let init = Detector::new(DetectorConfig::default(), 5).unwrap();
    assert_eq!(out.detector.params, init.params);
}

#[test]
fn log_has_one_record_per_iteration_with_variant_terms() {
    let (source, target) = data(3);
    let out = run(short([3, 2, 4]), Variant::Full.flags(), &source, &target);
    assert_eq!(out.log.len(), 9);
    let stages: Vec<Stage> = out.log.iter().map(|r| r.stage).collect();
    assert_eq!(stages[..3], [Stage::Pretrain; 3]);
    assert_eq!(stages[3..5], [Stage::Align; 2]);
    assert_eq!(stages[5..], [Stage::Full; 4]);
    for (i, r) in out.log.iter().enumerate() {
        assert_eq!(r.iteration, i);
        assert!(r.losses.values().all(|v| v.is_finite()));
    }
    for key in ["l_adv_s", "l_adv_t", "l_rpn_t", "l_cls_t", "l_mcd", "l_d"] {
        assert!(out.log.last().unwrap().losses.contains_key(key), "{key}");
    }
    assert!(!out.log[0].losses.contains_key("l_adv_s"));

    let plain = run(
        short([1, 2, 2]),
        Variant::SourceOnly.flags(),
        &source,
        &target,
    );
    for r in &plain.log {
        let keys: Vec<&str> = r.losses.keys().map(String::as_str).collect();
        assert_eq!(keys, ["l_cls", "l_det", "l_rpn"]);
    }
}

#[test]
fn same_seed_gives_identical_runs() {
    let (source, target) = data(3);
    let a = run(short([3, 3, 3]), Variant::Full.flags(), &source, &target);
    let b = run(short([3, 3, 3]), Variant::Full.flags(), &source, &target);
    assert_eq!(a.log, b.log);
    assert_eq!(a.detector.params, b.detector.params);
    let c = run(
        TrainConfig {
            seed: 6,
            ..short([3, 3, 3])
        },
        Variant::Full.flags(),
        &source,
        &target,
    );
    assert_ne!(a.log, c.log);
}

#[test]
fn zero_target_weights_continue_the_alignment_stage() {
    let (source, target) = data(3);
    let zero = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        ..short([2, 2, 4])
    };
    let full = run(zero.clone(), Variant::Full.flags(), &source, &target);
    let align_only = run(zero, Variant::WeightedLocal.flags(), &source, &target);
    assert_eq!(full.log, align_only.log);
    assert_eq!(full.detector.params, align_only.detector.params);
}

#[test]
fn unit_pseudo_threshold_silences_rpn_self_training() {
    let (source, target) = data(3);
    let cfg = TrainConfig {
        pseudo_threshold: 1.0,
        ..short([0, 0, 4])
    };
    let out = run(cfg, Variant::CstOnly.flags(), &source, &target);
    for r in &out.log {
        assert_eq!(r.losses["l_rpn_t"], 0.0);
        assert_eq!(r.losses["pseudo_fg"], 0.0);
    }
}

#[test]
fn overfits_a_small_source_set() {
    let (source, _) = data(10);
    let cfg = TrainConfig {
        iters_pretrain: 3000,
        lr: 0.01,
        seed: 1,
        ..TrainConfig::default()
    };
    let (_, log) = stage_pretrain(DetectorConfig::default(), &cfg, &source).unwrap();
    let mean = |r: &[cotrain::trainer::IterationRecord]| {
        r.iter().map(|x| x.losses["l_det"]).sum::<f64>() / r.len() as f64
    };
    let first = log[0].losses["l_det"];
    let last = mean(&log[log.len() - 50..]);
    assert!(last < 0.1 * first, "initial {first}, final {last}");
}

#[test]
fn interrupted_runs_resume_from_stage_checkpoints() {
    let (source, target) = data(3);
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths {
        dir: dir.path().join("run"),
    };
    let inputs = || PipelineInputs {
        detector: DetectorConfig::default(),
        train: short([2, 2, 2]),
        flags: Variant::Full.flags(),
        source: &source,
        target: &target,
        data_id: "test".into(),
        pretrained: None,
    };
    let whole = run_pipeline(inputs(), Some(&paths)).unwrap();
    std::fs::remove_file(paths.checkpoint(Stage::Full)).unwrap();
    std::fs::remove_file(paths.stage_log(Stage::Full)).unwrap();
    std::fs::remove_file(paths.final_checkpoint()).unwrap();
    let resumed = run_pipeline(inputs(), Some(&paths)).unwrap();
    assert_eq!(whole.log, resumed.log);
    assert_eq!(whole.detector.params, resumed.detector.params);
    let ckpt = Checkpoint::load(
        &paths.final_checkpoint(),
        Some(&DetectorConfig::default().fingerprint()),
    )
    .unwrap();
    assert_eq!(ckpt.params, whole.detector.params);
    assert_eq!(ckpt.iteration, 6);

    let changed = PipelineInputs {
        train: short([2, 2, 3]),
        ..inputs()
    };
    assert!(run_pipeline(changed, Some(&paths)).is_err());
}
