use std::fs;

use partsmine::detect::{SceneSpec, SyntheticScene};
use partsmine::encoder::{load_checkpoint, SequenceDataset};
use partsmine::pipeline::{benchmark_experiment, gen_benchmark, run_pipeline, PipelineConfig, PipelineInput, RunReport};
use partsmine::rng::stream_seed;
use partsmine::Error;

fn small() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.seed = 21;
    cfg.detection.scenes = 2;
    cfg.benchmark.train = 96;
    cfg.benchmark.test = 32;
    cfg.encoder.hidden = 8;
    cfg.encoder.optim.epochs = 2;
    cfg.baseline_optim.epochs = 2;
    cfg
}

#[test]
fn run_writes_every_stage_and_a_consistent_report() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&cfg, PipelineInput::Synthetic, Some(dir.path())).unwrap();
    assert_eq!(report.config_hash, cfg.hash());
    let stages: Vec<&str> = report.timings.iter().map(|t| t.stage.as_str()).collect();
    assert_eq!(stages, ["detect", "mine", "benchmark", "encoder"]);

    let on_disk: RunReport = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(on_disk, report.without_timings());
    let back: PipelineConfig = serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(back, cfg);

    for k in 1..=3 {
        let iou = report.metric("detect", &format!("round_{k}_mean_instance_iou")).unwrap();
        assert!((0.0..=1.0).contains(&iou));
    }
    assert!(dir.path().join("detect/scene_001/labels.pmt").exists());
    assert!(dir.path().join("mine/scene_000.json").exists());
    let train = SequenceDataset::load(dir.path().join("benchmark/train")).unwrap();
    assert_eq!(train.len(), 96);
    let (net, _) = load_checkpoint(dir.path().join("encoder/multi")).unwrap();
    assert_eq!(net.hidden(), 8);

    // the encoder stage reproduces a standalone benchmark experiment
    let bench = gen_benchmark(&cfg.benchmark, cfg.sigma_0, stream_seed(cfg.seed, "benchmark")).unwrap();
    let standalone = benchmark_experiment(&bench, &cfg).unwrap();
    assert_eq!(report.metric("encoder", "multi_loss_test_accuracy"), Some(standalone.multi_accuracy));
    assert_eq!(report.metric("encoder", "single_loss_test_accuracy"), Some(standalone.single_accuracy));
}

#[test]
fn explicit_scenes_and_stage_errors() {
    let cfg = small();
    let scene = SyntheticScene::random(&SceneSpec::default(), 99).unwrap();
    let report = run_pipeline(&cfg, PipelineInput::Scenes(vec![scene]), None).unwrap();
    assert_eq!(report.metric("detect", "refinement_monotone_fraction").map(|f| f == 0.0 || f == 1.0), Some(true));

    match run_pipeline(&cfg, PipelineInput::Scenes(Vec::new()), None) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "detect"),
        other => panic!("expected a detect stage error, got {other:?}"),
    }

    let mut bad = small();
    bad.benchmark.classes = 3;
    // infeasible specs are rejected before any stage runs
    assert!(matches!(run_pipeline(&bad, PipelineInput::Synthetic, None), Err(Error::InvalidArgument(_))));
}

#[test]
fn seed_changes_the_report() {
    let mut a = small();
    a.detection.scenes = 1;
    let mut b = a.clone();
    b.seed += 1;
    let ra = run_pipeline(&a, PipelineInput::Synthetic, None).unwrap();
    let rb = run_pipeline(&b, PipelineInput::Synthetic, None).unwrap();
    assert_ne!(ra.without_timings(), rb.without_timings());
    assert_ne!(ra.config_hash, rb.config_hash);
}
