use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-length appearance descriptor attached to a proposal or part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureRepr", into = "FeatureRepr")]
pub struct FeatureVec(Vec<f64>);

#[derive(Serialize, Deserialize)]
struct FeatureRepr {
    dim: usize,
    values: Vec<f64>,
}

impl TryFrom<FeatureRepr> for FeatureVec {
    type Error = Error;

    fn try_from(r: FeatureRepr) -> Result<Self> {
        if r.dim != r.values.len() {
            return Err(Error::dim(format!(
                "feature declares dim {} but has {} values",
                r.dim,
                r.values.len()
            )));
        }
        FeatureVec::new(r.values)
    }
}

impl From<FeatureVec> for FeatureRepr {
    fn from(f: FeatureVec) -> Self {
        FeatureRepr {
            dim: f.0.len(),
            values: f.0,
        }
    }
}

impl FeatureVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(FeatureVec(values))
    }

    pub fn zeros(dim: usize) -> Self {
        FeatureVec(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Squared Euclidean distance between two descriptors.
pub fn semantic_distance(p: &FeatureVec, q: &FeatureVec) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::dim(format!("feature dims {} vs {}", p.dim(), q.dim())));
    }
    Ok(p.0.iter().zip(&q.0).map(|(a, b)| (a - b) * (a - b)).sum())
}
