use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub stage: String,
    pub name: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub timings: Vec<Timing>,
}

impl RunReport {
    pub fn new(seed: u64, config_hash: String) -> Self {
        RunReport {
            seed,
            config_hash,
            metrics: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn push(&mut self, stage: &str, name: &str, value: f64, unit: &str) {
        self.metrics.push(Metric {
            stage: stage.into(),
            name: name.into(),
            value,
            unit: unit.into(),
        });
    }

    pub fn metric(&self, stage: &str, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.stage == stage && m.name == name).map(|m| m.value)
    }

    /// The report with timings removed, for reproducibility comparisons.
    pub fn without_timings(&self) -> RunReport {
        RunReport {
            timings: Vec::new(),
            ..self.clone()
        }
    }
}
