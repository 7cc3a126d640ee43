//! Linear ablation baselines: one softmax over the concatenated patch
//! features, and a shared per-patch softmax whose outputs are summed.

use serde::{Deserialize, Serialize};

use super::lstm::{softmax, Prediction, PROB_FLOOR};
use super::train::{fit, OptimConfig, TrainReport, Trainable};
use super::{PatchSequence, SequenceDataset};
use crate::error::{Error, Result};

/// Affine map followed by a softmax; `w` is `classes x inputs` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmax {
    pub inputs: usize,
    pub classes: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearSoftmax {
    pub fn zeros(inputs: usize, classes: usize) -> Self {
        LinearSoftmax {
            inputs,
            classes,
            w: vec![0.0; inputs * classes],
            b: vec![0.0; classes],
        }
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = (0..self.classes)
            .map(|k| self.b[k] + self.w[k * self.inputs..(k + 1) * self.inputs].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        softmax(&z)
    }

    /// Adds `scale` times the cross-entropy gradient at `x`; returns the
    /// probabilities.
    fn accumulate(&self, x: &[f64], y: usize, scale: f64, grad: &mut LinearSoftmax) -> Vec<f64> {
        let p = self.probs(x);
        for k in 0..self.classes {
            let d = scale * (p[k] - if k == y { 1.0 } else { 0.0 });
            grad.b[k] += d;
            grad.w[k * self.inputs..(k + 1) * self.inputs].iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
        }
        p
    }
}

fn nll(p: &[f64], y: usize) -> f64 {
    -p[y].max(PROB_FLOOR).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Concat,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub steps: usize,
    pub linear: LinearSoftmax,
}

impl Baseline {
    pub fn zeros(kind: BaselineKind, steps: usize, dim: usize, classes: usize) -> Self {
        let inputs = match kind {
            BaselineKind::Concat => steps * dim,
            BaselineKind::Average => dim,
        };
        Baseline {
            kind,
            steps,
            linear: LinearSoftmax::zeros(inputs, classes),
        }
    }

    fn check(&self, seq: &PatchSequence) -> Result<()> {
        let dim = match self.kind {
            BaselineKind::Concat => self.linear.inputs / self.steps,
            BaselineKind::Average => self.linear.inputs,
        };
        if seq.len() != self.steps || seq.dim() != dim {
            return Err(Error::dim(format!("sequence {}x{} vs baseline {}x{dim}", seq.len(), seq.dim(), self.steps)));
        }
        Ok(())
    }

    fn concat(seq: &PatchSequence) -> Vec<f64> {
        seq.features().iter().flat_map(|f| f.values().iter().copied()).collect()
    }

    pub fn predict(&self, seq: &PatchSequence) -> Result<Prediction> {
        self.check(seq)?;
        let probs = match self.kind {
            BaselineKind::Concat => self.linear.probs(&Self::concat(seq)),
            BaselineKind::Average => {
                let mut sum = vec![0.0; self.linear.classes];
                for f in seq.features() {
                    sum.iter_mut().zip(self.linear.probs(f.values())).for_each(|(a, b)| *a += b);
                }
                sum.iter_mut().for_each(|a| *a /= seq.len() as f64);
                sum
            }
        };
        Ok(Prediction::from_probs(probs))
    }

    /// Training loss: cross-entropy of the concatenated classifier, or the
    /// mean per-patch cross-entropy of the shared classifier.
    fn objective(&self, seq: &PatchSequence, y: usize, grad: Option<&mut Baseline>) -> Result<f64> {
        self.check(seq)?;
        let mut scratch;
        let grad = match grad {
            Some(g) => &mut g.linear,
            None => {
                scratch = LinearSoftmax::zeros(self.linear.inputs, self.linear.classes);
                &mut scratch
            }
        };
        Ok(match self.kind {
            BaselineKind::Concat => nll(&self.linear.accumulate(&Self::concat(seq), y, 1.0, grad), y),
            BaselineKind::Average => {
                let scale = 1.0 / seq.len() as f64;
                seq.features().iter().map(|f| nll(&self.linear.accumulate(f.values(), y, scale, grad), y) * scale).sum()
            }
        })
    }
}

impl Trainable for Baseline {
    fn zeros_like(&self) -> Self {
        Baseline {
            linear: LinearSoftmax::zeros(self.linear.inputs, self.linear.classes),
            ..*self
        }
    }

    fn buffers(&self) -> Vec<&[f64]> {
        vec![&self.linear.w, &self.linear.b]
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.linear.w, &mut self.linear.b]
    }

    fn accumulate(&self, data: &SequenceDataset, i: usize, grad: &mut Self) -> Result<(f64, u32)> {
        let l = self.objective(&data.items[i], data.labels[i] as usize, Some(grad))?;
        Ok((l, self.predict(&data.items[i])?.label))
    }

    fn evaluate(&self, data: &SequenceDataset, i: usize) -> Result<(f64, u32)> {
        let l = self.objective(&data.items[i], data.labels[i] as usize, None)?;
        Ok((l, self.predict(&data.items[i])?.label))
    }
}

/// Trains a baseline from zero weights.
pub fn train_baseline(
    kind: BaselineKind,
    train: &SequenceDataset,
    val: Option<&SequenceDataset>,
    opt: &OptimConfig,
    seed: u64,
) -> Result<(Baseline, TrainReport)> {
    let (steps, dim) = train.shape();
    if steps == 0 {
        return Err(Error::arg("empty training set"));
    }
    fit(Baseline::zeros(kind, steps, dim, train.classes), train, val, opt, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::FeatureVec;

    fn seq(rows: &[&[f64]]) -> PatchSequence {
        PatchSequence::new(rows.iter().map(|r| FeatureVec::new(r.to_vec()).unwrap()).collect()).unwrap()
    }

    fn with_weights(kind: BaselineKind, steps: usize, w: Vec<f64>, b: Vec<f64>) -> Baseline {
        let mut m = Baseline::zeros(kind, steps, w.len() / b.len() / if kind == BaselineKind::Concat { steps } else { 1 }, b.len());
        m.linear.w = w;
        m.linear.b = b;
        m
    }

    #[test]
    fn single_patch_baselines_agree() {
        let w = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2];
        let b = vec![0.1, 0.0, -0.1];
        let s = seq(&[&[1.0, 2.0]]);
        let c = with_weights(BaselineKind::Concat, 1, w.clone(), b.clone()).predict(&s).unwrap();
        let a = with_weights(BaselineKind::Average, 1, w, b).predict(&s).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn identical_patches_average_to_one_patch() {
        let m = with_weights(BaselineKind::Average, 3, vec![0.3, -0.2, 0.5, 0.1], vec![0.1, 0.0]);
        let one = m.linear.probs(&[1.0, -1.0]);
        let row: &[f64] = &[1.0, -1.0];
        let avg = m.predict(&seq(&[row; 3])).unwrap();
        for (a, b) in avg.probs.iter().zip(&one) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_gradient_matches_differences() {
        let m = with_weights(BaselineKind::Concat, 2, vec![0.3, -0.2, 0.5, 0.1, 0.2, 0.0, -0.3, 0.4], vec![0.1, -0.1]);
        let s = seq(&[&[1.0, 2.0], &[-0.5, 0.3]]);
        let mut g = m.zeros_like();
        m.objective(&s, 1, Some(&mut g)).unwrap();
        let eps = 1e-6;
        for j in 0..m.linear.w.len() {
            let mut p = m.clone();
            p.linear.w[j] += eps;
            let mut q = m.clone();
            q.linear.w[j] -= eps;
            let fd = (p.objective(&s, 1, None).unwrap() - q.objective(&s, 1, None).unwrap()) / (2.0 * eps);
            assert!((fd - g.linear.w[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = Baseline::zeros(BaselineKind::Concat, 2, 2, 2);
        assert!(m.predict(&seq(&[&[1.0, 2.0]])).is_err());
    }
}
