use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::{gen_benchmark, Benchmark, PipelineConfig, RunReport, Timing};
use crate::detect::{iterative_refine, mean_instance_iou, synthetic_provider, RefineOutcome, SyntheticScene};
use crate::encoder::{
    evaluate, predict, save_checkpoint, train, train_baseline, Aggregation, BaselineKind, EncoderConfig, LossConfig, LstmObjective, StackedLstm,
    TrainReport,
};
use crate::error::{Error, Result};
use crate::par;
use crate::parts::{mine_all, MinedObject};
use crate::rng::stream_seed;

/// Where the detection stage gets its scenes.
#[derive(Debug, Clone, PartialEq)]
pub enum PipelineInput {
    /// Scenes generated from the config's detection suite.
    Synthetic,
    Scenes(Vec<SyntheticScene>),
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn detection_scenes(cfg: &PipelineConfig) -> Result<Vec<SyntheticScene>> {
    (0..cfg.detection.scenes)
        .map(|i| SyntheticScene::random(&cfg.detection.spec, stream_seed(cfg.seed, &format!("detect/scene/{i}"))))
        .collect()
}

/// One scene through the detector/CRF alternation.
#[derive(Debug, Clone)]
pub struct SceneResult {
    pub scene: SyntheticScene,
    pub outcome: RefineOutcome,
    /// Mean instance IoU against ground truth after each round.
    pub round_iou: Vec<f64>,
}

pub fn detect_scene(scene: &SyntheticScene, cfg: &PipelineConfig) -> Result<SceneResult> {
    let image = scene.render();
    let provider = synthetic_provider(scene, cfg.detection.jitter, cfg.detection.count)?;
    let outcome = iterative_refine(&image, provider, &cfg.refine())?;
    let gt = scene.ground_truth();
    let round_iou = outcome.history.iter().map(|r| mean_instance_iou(&gt, &r.survivors)).collect();
    Ok(SceneResult {
        scene: scene.clone(),
        outcome,
        round_iou,
    })
}

/// Test-set results of the stacked network and the ablations.
#[derive(Debug, Clone)]
pub struct BenchmarkResults {
    pub multi: StackedLstm,
    pub single: StackedLstm,
    pub multi_report: TrainReport,
    pub single_report: TrainReport,
    pub multi_accuracy: f64,
    pub single_accuracy: f64,
    pub concat_accuracy: f64,
    pub average_accuracy: f64,
    /// Fraction of test items where mean aggregation and the whole-image
    /// step agree (multi-loss network).
    pub aggregation_agreement: f64,
}

/// Trains multi-loss and single-loss networks from the same initialization,
/// plus both linear baselines, and scores them on the test split.
pub fn benchmark_experiment(bench: &Benchmark, cfg: &PipelineConfig) -> Result<BenchmarkResults> {
    let seed = stream_seed(cfg.seed, "encoder");
    let variant = |loss: LossConfig| EncoderConfig { loss, ..cfg.encoder.clone() };
    let accuracy = |net: &StackedLstm, loss: LossConfig| -> Result<f64> {
        let m = LstmObjective {
            net: net.clone(),
            loss,
            aggregation: cfg.encoder.aggregation,
        };
        Ok(evaluate(&m, &bench.test)?.1)
    };
    let (multi, multi_report) = train(&bench.train, Some(&bench.test), &variant(LossConfig::Multi), seed)?;
    let (single, single_report) = train(&bench.train, Some(&bench.test), &variant(LossConfig::Single), seed)?;
    let (concat, _) = train_baseline(BaselineKind::Concat, &bench.train, None, &cfg.baseline_optim, seed)?;
    let (average, _) = train_baseline(BaselineKind::Average, &bench.train, None, &cfg.baseline_optim, seed)?;
    let agree = par::map(&bench.test.items, |s| -> Result<bool> {
        Ok(predict(s, &multi, Aggregation::WholeImage)?.label == predict(s, &multi, Aggregation::Mean)?.label)
    })
    .into_iter()
    .collect::<Result<Vec<bool>>>()?;
    Ok(BenchmarkResults {
        multi_accuracy: accuracy(&multi, LossConfig::Multi)?,
        single_accuracy: accuracy(&single, LossConfig::Single)?,
        concat_accuracy: evaluate(&concat, &bench.test)?.1,
        average_accuracy: evaluate(&average, &bench.test)?.1,
        aggregation_agreement: agree.iter().filter(|&&a| a).count() as f64 / agree.len() as f64,
        multi,
        single,
        multi_report,
        single_report,
    })
}

fn timed<T>(report: &mut RunReport, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    report.timings.push(Timing {
        stage: stage.into(),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs detection with CRF refinement, parts mining, benchmark generation
/// and encoder training, writing every intermediate artifact under `out`.
/// Given the same config, every file except `timings.json` is reproduced
/// byte for byte.
pub fn run_pipeline(cfg: &PipelineConfig, input: PipelineInput, out: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let mut report = RunReport::new(cfg.seed, cfg.hash());
    let write = |rel: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        match out {
            Some(dir) => f(&dir.join(rel)),
            None => Ok(()),
        }
    };
    write("config.json", &|p| write_json(p, cfg))?;

    let scenes = match input {
        PipelineInput::Synthetic => detection_scenes(cfg).map_err(|e| e.in_stage("detect"))?,
        PipelineInput::Scenes(s) => s,
    };
    if scenes.is_empty() {
        return Err(Error::arg("no scenes to process").in_stage("detect"));
    }
    let results = timed(&mut report, "detect", || {
        par::map(&scenes, |s| detect_scene(s, cfg)).into_iter().collect::<Result<Vec<_>>>()
    })?;
    for (i, r) in results.iter().enumerate() {
        let dir = format!("detect/scene_{i:03}");
        write(&format!("{dir}/scene.json"), &|p| write_json(p, &r.scene))?;
        write(&format!("{dir}/nms.json"), &|p| write_json(p, &r.outcome.nms))?;
        write(&format!("{dir}/history.json"), &|p| write_json(p, &r.outcome.history))?;
        write(&format!("{dir}/labels.pmt"), &|p| r.outcome.labels.to_tensor().save(p))?;
        write(&format!("{dir}/marginals.pmt"), &|p| r.outcome.marginals.to_tensor().save(p))?;
    }
    let rounds = cfg.refine_rounds;
    for k in 0..rounds {
        report.push("detect", &format!("round_{}_mean_instance_iou", k + 1), mean(results.iter().map(|r| r.round_iou[k])), "iou");
    }
    let monotone = results.iter().filter(|r| r.round_iou[rounds - 1] >= r.round_iou[0]).count();
    report.push("detect", "refinement_monotone_fraction", monotone as f64 / results.len() as f64, "fraction of scenes");
    report.push("detect", "mean_proposals_per_scene", mean(results.iter().map(|r| r.outcome.nms.proposals.len() as f64)), "proposals");
    report.push("detect", "mean_survivors_per_scene", mean(results.iter().map(|r| r.outcome.nms.n() as f64)), "objects");
    report.push("detect", "mean_suppressed_per_scene", mean(results.iter().map(|r| r.outcome.nms.suppression.len() as f64)), "proposals");

    let search = cfg.search();
    let mined = timed(&mut report, "mine", || {
        results.iter().map(|r| mine_all(&r.outcome.nms, &search, cfg.oracle)).collect::<Result<Vec<_>>>()
    })?;
    for (i, m) in mined.iter().enumerate() {
        write(&format!("mine/scene_{i:03}.json"), &|p| write_json(p, m))?;
    }
    let objects: Vec<&MinedObject> = mined.iter().flatten().collect();
    report.push("mine", "objects", objects.len() as f64, "objects");
    report.push("mine", "mean_candidates", mean(objects.iter().map(|o| o.candidates as f64)), "proposals");
    report.push("mine", "mean_greedy_score", mean(objects.iter().map(|o| o.score)), "score");
    report.push("mine", "greedy_not_below_init_fraction", mean(objects.iter().map(|o| f64::from(u8::from(o.score >= o.init_score)))), "fraction of objects");
    let with_oracle: Vec<&&MinedObject> = objects.iter().filter(|o| o.oracle_score.is_some()).collect();
    report.push("mine", "oracle_objects", with_oracle.len() as f64, "objects");
    if !with_oracle.is_empty() {
        let ratio = mean(with_oracle.iter().map(|o| o.score / o.oracle_score.expect("filtered")));
        report.push("mine", "mean_greedy_oracle_ratio", ratio, "ratio");
    }

    let bench = timed(&mut report, "benchmark", || gen_benchmark(&cfg.benchmark, cfg.sigma_0, stream_seed(cfg.seed, "benchmark")))?;
    write("benchmark/train", &|p| bench.train.save(p))?;
    write("benchmark/test", &|p| bench.test.save(p))?;
    write("benchmark/metadata.json", &|p| write_json(p, &bench.metadata))?;
    let md = &bench.metadata;
    report.push("benchmark", "full_parts_oracle_accuracy", md.full_parts_oracle_accuracy, "accuracy");
    report.push("benchmark", "single_part_ceiling", md.single_part_ceiling, "accuracy");
    report.push("benchmark", "whole_image_linear_accuracy", md.whole_image_linear_accuracy, "accuracy");
    report.push("benchmark", "mean_part_cell_iou", md.mean_part_cell_iou, "iou");

    let res = timed(&mut report, "encoder", || benchmark_experiment(&bench, cfg))?;
    let seed = stream_seed(cfg.seed, "encoder");
    write("encoder/multi", &|p| save_checkpoint(p, &res.multi, &EncoderConfig { loss: LossConfig::Multi, ..cfg.encoder.clone() }, seed))?;
    write("encoder/single", &|p| save_checkpoint(p, &res.single, &EncoderConfig { loss: LossConfig::Single, ..cfg.encoder.clone() }, seed))?;
    write("encoder/multi_curve.json", &|p| write_json(p, &res.multi_report))?;
    write("encoder/single_curve.json", &|p| write_json(p, &res.single_report))?;
    report.push("encoder", "multi_loss_test_accuracy", res.multi_accuracy, "accuracy");
    report.push("encoder", "single_loss_test_accuracy", res.single_accuracy, "accuracy");
    report.push("encoder", "concat_baseline_test_accuracy", res.concat_accuracy, "accuracy");
    report.push("encoder", "average_baseline_test_accuracy", res.average_accuracy, "accuracy");
    report.push("encoder", "aggregation_agreement", res.aggregation_agreement, "fraction of test items");

    write("report.json", &|p| write_json(p, &report.without_timings()))?;
    write("timings.json", &|p| write_json(p, &report.timings))?;
    Ok(report)
}
