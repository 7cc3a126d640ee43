use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use partsmine::cam::{build_prob_stack, compute_cam, make_label_map, split_instances, LabelMap, ProbStack, DEFAULT_ACTIVATION_FLOOR};
use partsmine::crf::{infer, CrfParams};
use partsmine::detect::{SyntheticScene, NmsOutcome};
use partsmine::encoder::{evaluate, load_checkpoint, save_checkpoint, train, LossConfig, LstmObjective, SequenceDataset};
use partsmine::feature::FeatureVec;
use partsmine::image::Image;
use partsmine::parts::mine_all;
use partsmine::pipeline::{detect_scene, gen_benchmark, run_pipeline, write_json, PipelineConfig, PipelineInput};
use partsmine::rng::stream_seed;
use partsmine::tensor::Tensor3;
use partsmine::{Error, Result};

#[derive(Parser)]
#[command(name = "partsmine", version, about = "Complementary parts mining and part-sequence classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Small encoder and short schedule, minutes on one core.
    Desk,
    /// Full-size encoder (hidden size 256, 50 epochs).
    Full,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config; missing fields take the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Overrides the config seed (PARTSMINE_SEED does the same).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: detection with CRF refinement, mining, benchmark, encoder.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the report as JSON on stdout.
        #[arg(long)]
        json: bool,
    },
    /// Class activation map, instance split and seed labels from a feature map.
    Cam {
        /// Feature map tensor (channels x h x w).
        #[arg(long)]
        features: PathBuf,
        /// JSON array with one classifier weight per channel.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 0)]
        class: u32,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = DEFAULT_ACTIVATION_FLOOR)]
        activation_floor: f64,
        #[arg(long, default_value_t = partsmine::cam::DEFAULT_SIGMA_C)]
        sigma_c: f64,
        /// Writes cam.pmt, stack.pmt and labels.pmt here.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dense CRF refinement of a probability stack.
    Crf {
        /// Binary PPM image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        stack: PathBuf,
        /// Seed labels; derived from the stack when omitted.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = partsmine::cam::DEFAULT_SIGMA_C)]
        sigma_c: f64,
        /// JSON CRF parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Writes labels.pmt and marginals.pmt here.
        #[arg(long)]
        out: PathBuf,
    },
    /// Detection with CRF refinement on one synthetic scene.
    Detect {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Scene JSON; a seeded random scene is used when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parts search for every survivor of a stored NMS outcome.
    Mine {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        nms: PathBuf,
        /// Also run the exhaustive search where its size guard allows.
        #[arg(long)]
        oracle: bool,
        /// Output JSON; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the stacked LSTM on a stored sequence dataset.
    TrainEncoder {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset evaluated after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        /// `multi`, `single` or `weighted:<g1>,<g2>,...` (one weight per patch step).
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss and accuracy of a checkpoint on a sequence dataset.
    Eval {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Generates the parts-informative benchmark.
    GenBenchmark {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let preset = match args.preset {
        Preset::Desk => PipelineConfig::desk(),
        Preset::Full => PipelineConfig::default(),
    };
    let mut cfg = match &args.config {
        Some(path) => {
            let mut base = serde_json::to_value(&preset)?;
            merge(&mut base, serde_json::from_str(&fs::read_to_string(path)?)?);
            serde_json::from_value(base)?
        }
        None => preset,
    };
    if let Ok(s) = std::env::var("PARTSMINE_SEED") {
        cfg.seed = s.parse().map_err(|_| Error::InvalidArgument(format!("PARTSMINE_SEED={s} is not an integer")))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Overlays `patch` on `base`, recursing into objects.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_mode(s: &str) -> Result<LossConfig> {
    match s {
        "multi" => Ok(LossConfig::Multi),
        "single" => Ok(LossConfig::Single),
        _ => s
            .strip_prefix("weighted:")
            .and_then(|g| g.split(',').map(|x| x.trim().parse().ok()).collect::<Option<Vec<f64>>>())
            .map(|gamma| LossConfig::Weighted { gamma })
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss mode `{s}`"))),
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn save_in(dir: &Path, name: &str, t: &Tensor3) -> Result<()> {
    fs::create_dir_all(dir)?;
    t.save(dir.join(name))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { cfg, out, json } => {
            let cfg = load_config(&cfg)?;
            let report = run_pipeline(&cfg, PipelineInput::Synthetic, out.as_deref())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for m in &report.metrics {
                    println!("{:<10} {:<36} {:>12.6} {}", m.stage, m.name, m.value, m.unit);
                }
                for t in &report.timings {
                    println!("{:<10} {:<36} {:>12.3} s", t.stage, "wall time", t.seconds);
                }
            }
        }
        Command::Cam {
            features,
            weights,
            class,
            height,
            width,
            activation_floor,
            sigma_c,
            out,
        } => {
            let features = Tensor3::load(features)?;
            let w: Vec<f64> = serde_json::from_str(&fs::read_to_string(weights)?)?;
            let cam = compute_cam(&features, &FeatureVec::new(w)?, class, height, width)?;
            let instances = split_instances(&cam, activation_floor)?;
            if instances.is_empty() {
                return Err(Error::InvalidArgument("activation map has no positive evidence".into()));
            }
            let stack = build_prob_stack(&instances)?;
            let labels = make_label_map(&stack, sigma_c);
            save_in(&out, "cam.pmt", &Tensor3::from_channels(height, width, &[cam.values])?)?;
            save_in(&out, "stack.pmt", &stack.to_tensor())?;
            save_in(&out, "labels.pmt", &labels.to_tensor())?;
            print_json(&json!({ "instances": stack.n() }))?;
        }
        Command::Crf {
            image,
            stack,
            labels,
            sigma_c,
            params,
            out,
        } => {
            let image = Image::load(image)?;
            let stack = ProbStack::from_tensor(&Tensor3::load(stack)?)?;
            let seeds = match labels {
                Some(p) => LabelMap::from_tensor(&Tensor3::load(p)?, stack.n())?,
                None => make_label_map(&stack, sigma_c),
            };
            let params: CrfParams = match params {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => CrfParams::default(),
            };
            let (refined, marginals) = infer(&seeds, &stack, &image, &params)?;
            save_in(&out, "labels.pmt", &refined.to_tensor())?;
            save_in(&out, "marginals.pmt", &marginals.to_tensor())?;
            let changed = refined.labels.iter().zip(&seeds.labels).filter(|(a, b)| a != b).count();
            print_json(&json!({ "pixels": refined.labels.len(), "changed": changed }))?;
        }
        Command::Detect { cfg, scene, out } => {
            let cfg = load_config(&cfg)?;
            let scene: SyntheticScene = match scene {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => SyntheticScene::random(&cfg.detection.spec, stream_seed(cfg.seed, "detect/scene/0"))?,
            };
            let r = detect_scene(&scene, &cfg).map_err(|e| e.in_stage("detect"))?;
            write_json(out.join("scene.json"), &r.scene)?;
            write_json(out.join("nms.json"), &r.outcome.nms)?;
            write_json(out.join("history.json"), &r.outcome.history)?;
            save_in(&out, "labels.pmt", &r.outcome.labels.to_tensor())?;
            save_in(&out, "marginals.pmt", &r.outcome.marginals.to_tensor())?;
            print_json(&json!({ "survivors": r.outcome.nms.n(), "round_iou": r.round_iou }))?;
        }
        Command::Mine { cfg, nms, oracle, out } => {
            let cfg = load_config(&cfg)?;
            let nms: NmsOutcome = serde_json::from_str(&fs::read_to_string(nms)?)?;
            let mined = mine_all(&nms, &cfg.search(), oracle || cfg.oracle).map_err(|e| e.in_stage("mine"))?;
            match out {
                Some(p) => write_json(p, &mined)?,
                None => println!("{}", serde_json::to_string_pretty(&mined)?),
            }
        }
        Command::TrainEncoder {
            cfg,
            data,
            val,
            mode,
            lr,
            epochs,
            hidden,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            let mut enc = cfg.encoder.clone();
            if let Some(m) = mode {
                enc.loss = parse_mode(&m)?;
            }
            if let Some(lr) = lr {
                enc.optim.lr = lr;
            }
            if let Some(e) = epochs {
                enc.optim.epochs = e;
            }
            if let Some(h) = hidden {
                enc.hidden = h;
            }
            let data = SequenceDataset::load(data)?;
            let val = val.map(SequenceDataset::load).transpose()?;
            let seed = stream_seed(cfg.seed, "encoder");
            let (net, report) = train(&data, val.as_ref(), &enc, seed).map_err(|e| e.in_stage("encoder"))?;
            save_checkpoint(&out, &net, &enc, seed)?;
            write_json(out.join("curve.json"), &report.curve)?;
            print_json(&serde_json::to_value(report.last())?)?;
        }
        Command::Eval { net, data } => {
            let (net, manifest) = load_checkpoint(net)?;
            let data = SequenceDataset::load(data)?;
            let model = LstmObjective {
                net,
                loss: manifest.config.loss.clone(),
                aggregation: manifest.config.aggregation,
            };
            let (loss, accuracy) = evaluate(&model, &data)?;
            print_json(&json!({ "items": data.len(), "loss": loss, "accuracy": accuracy }))?;
        }
        Command::GenBenchmark { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let bench = gen_benchmark(&cfg.benchmark, cfg.sigma_0, stream_seed(cfg.seed, "benchmark")).map_err(|e| e.in_stage("benchmark"))?;
            bench.train.save(out.join("train"))?;
            bench.test.save(out.join("test"))?;
            write_json(out.join("metadata.json"), &bench.metadata)?;
            print_json(&serde_json::to_value(&bench.metadata)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(2)
        }
    }
}
