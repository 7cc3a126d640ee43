use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::BenchmarkSpec;
use crate::cam::DEFAULT_SIGMA_C;
use crate::crf::CrfParams;
use crate::detect::{RefineConfig, SceneSpec, DEFAULT_SIGMA_0, DEFAULT_TAU};
use crate::encoder::{EncoderConfig, OptimConfig};
use crate::error::{Error, Result};
use crate::parts::{SearchConfig, DEFAULT_BETA_0, DEFAULT_LAMBDA_0, DEFAULT_PARTS};

/// Seeded scenes for the detection and mining stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionSuiteConfig {
    pub scenes: usize,
    pub spec: SceneSpec,
    pub jitter: f64,
    pub count: usize,
}

impl Default for DetectionSuiteConfig {
    fn default() -> Self {
        DetectionSuiteConfig {
            scenes: 20,
            spec: SceneSpec::default(),
            jitter: 0.1,
            count: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub sigma_c: f64,
    pub sigma_0: f64,
    pub tau: f64,
    pub n: usize,
    pub s: usize,
    pub lambda_0: f64,
    pub beta_0: f64,
    pub crf: CrfParams,
    pub refine_rounds: usize,
    pub encoder: EncoderConfig,
    /// Optimizer for the concat and averaging baselines.
    pub baseline_optim: OptimConfig,
    /// Run the exhaustive parts search next to greedy where the guard allows.
    pub oracle: bool,
    pub detection: DetectionSuiteConfig,
    pub benchmark: BenchmarkSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            sigma_c: DEFAULT_SIGMA_C,
            sigma_0: DEFAULT_SIGMA_0,
            tau: DEFAULT_TAU,
            n: DEFAULT_PARTS,
            s: 3,
            lambda_0: DEFAULT_LAMBDA_0,
            beta_0: DEFAULT_BETA_0,
            crf: CrfParams::default(),
            refine_rounds: 3,
            encoder: EncoderConfig::default(),
            baseline_optim: super::oracle_optim(),
            oracle: true,
            detection: DetectionSuiteConfig::default(),
            benchmark: BenchmarkSpec::default(),
        }
    }
}

impl PipelineConfig {
    /// Default constants with an encoder sized for a single CPU core: hidden
    /// size 32 and a 12-epoch schedule at learning rate 0.01.
    pub fn desk() -> Self {
        PipelineConfig {
            encoder: EncoderConfig {
                hidden: 32,
                optim: OptimConfig {
                    lr: 0.01,
                    epochs: 12,
                    batch_size: 8,
                    step_epochs: 8,
                    ..OptimConfig::default()
                },
                ..EncoderConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            lambda_0: self.lambda_0,
            beta_0: self.beta_0,
            n: self.n,
            s: self.s,
            passes: 1,
        }
    }

    pub fn refine(&self) -> RefineConfig {
        RefineConfig {
            sigma_0: self.sigma_0,
            tau: self.tau,
            sigma_c: self.sigma_c,
            rounds: self.refine_rounds,
            crf: self.crf.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma_c) || !(0.0..=1.0).contains(&self.sigma_0) {
            return Err(Error::arg("sigma_c and sigma_0 must lie in [0, 1]"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::arg(format!("tau {} not in (0,1)", self.tau)));
        }
        if self.refine_rounds == 0 {
            return Err(Error::arg("refine_rounds must be at least 1"));
        }
        if self.detection.scenes == 0 || self.detection.count == 0 {
            return Err(Error::arg("the detection suite needs scenes and proposals"));
        }
        self.search().validate()?;
        self.crf.validate()?;
        self.encoder.optim.validate()?;
        self.baseline_optim.validate()?;
        self.benchmark.validate()?;
        if self.encoder.hidden == 0 {
            return Err(Error::arg("encoder hidden size must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
