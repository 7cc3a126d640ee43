//! Configuration, synthetic benchmark generation and end-to-end runs.

mod benchmark;
mod config;
mod report;
mod run;

pub use benchmark::{gen_benchmark, item_sequence, label_from_bits, oracle_optim, BenchItem, Benchmark, BenchmarkMetadata, BenchmarkSpec, ItemTrace};
pub use config::{DetectionSuiteConfig, PipelineConfig};
pub use report::{Metric, RunReport, Timing};
pub use run::{benchmark_experiment, detect_scene, detection_scenes, run_pipeline, write_json, BenchmarkResults, PipelineInput, SceneResult};
