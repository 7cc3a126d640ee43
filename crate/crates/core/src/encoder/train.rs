use serde::{Deserialize, Serialize};

use super::{Aggregation, LossConfig, SequenceDataset, StackedLstm};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::stream;
use rand::seq::SliceRandom;

/// SGD with momentum and L2 weight decay, using the update
/// `v = mu * v + lr * (g + wd * theta); theta -= v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiply the learning rate by `lr_decay` every `step_epochs` epochs (0 disables).
    pub step_epochs: usize,
    pub lr_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0002,
            epochs: 50,
            batch_size: 1,
            step_epochs: 20,
            lr_decay: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.lr_decay > 0.0;
        if !ok {
            return Err(Error::arg(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.step_epochs {
            0 => self.lr,
            k => self.lr * self.lr_decay.powi((epoch / k) as i32),
        }
    }
}

/// Per-epoch training curve entry. Training figures are accumulated during
/// the epoch; validation figures use the parameters at its end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

/// A model trained by [`fit`]: parameter buffers plus a per-sample
/// objective.
pub trait Trainable: Clone + Send + Sync {
    fn zeros_like(&self) -> Self;
    fn buffers(&self) -> Vec<&[f64]>;
    fn buffers_mut(&mut self) -> Vec<&mut [f64]>;
    /// Adds the sample's loss gradient into `grad`; returns the loss and the
    /// predicted label.
    fn accumulate(&self, data: &SequenceDataset, i: usize, grad: &mut Self) -> Result<(f64, u32)>;
    fn evaluate(&self, data: &SequenceDataset, i: usize) -> Result<(f64, u32)>;
}

/// Stacked network trained under a loss configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmObjective {
    pub net: StackedLstm,
    pub loss: LossConfig,
    pub aggregation: Aggregation,
}

impl Trainable for LstmObjective {
    fn zeros_like(&self) -> Self {
        LstmObjective {
            net: StackedLstm::zeros(self.net.input_dim(), self.net.hidden(), self.net.classes),
            ..self.clone()
        }
    }

    fn buffers(&self) -> Vec<&[f64]> {
        self.net.tensors().into_iter().map(|(_, _, b)| b).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.buffers_mut()
    }

    fn accumulate(&self, data: &SequenceDataset, i: usize, grad: &mut Self) -> Result<(f64, u32)> {
        let (l, _, out) = self.net.backward_outputs(&data.items[i], data.labels[i], &self.loss, &mut grad.net)?;
        Ok((l, super::aggregate(&out, self.aggregation).label))
    }

    fn evaluate(&self, data: &SequenceDataset, i: usize) -> Result<(f64, u32)> {
        let out = self.net.forward(&data.items[i])?;
        Ok((super::loss(&out, data.labels[i], &self.loss)?, super::aggregate(&out, self.aggregation).label))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochStats>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochStats> {
        self.curve.last()
    }
}

fn mean_eval<M: Trainable>(model: &M, data: &SequenceDataset) -> Result<(f64, f64)> {
    let res = par::map_range(data.len(), |i| model.evaluate(data, i));
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (i, r) in res.into_iter().enumerate() {
        let (l, y) = r?;
        loss += l;
        correct += usize::from(y == data.labels[i]);
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Loss and accuracy of `model` on `data`.
pub fn evaluate<M: Trainable>(model: &M, data: &SequenceDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::arg("empty evaluation set"));
    }
    mean_eval(model, data)
}

/// Minibatch SGD over a seeded per-epoch shuffle. Per-sample gradients may be
/// computed in parallel; they are summed in sample order, so results do not
/// depend on the thread count.
pub fn fit<M: Trainable>(
    mut model: M,
    train: &SequenceDataset,
    val: Option<&SequenceDataset>,
    opt: &OptimConfig,
    seed: u64,
) -> Result<(M, TrainReport)> {
    opt.validate()?;
    if train.is_empty() {
        return Err(Error::arg("empty training set"));
    }
    let mut velocity = model.zeros_like();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(opt.epochs);
    for epoch in 0..opt.epochs {
        let lr = opt.lr_at(epoch);
        order.shuffle(&mut stream(seed, &format!("encoder/shuffle/{epoch}")));
        let mut total = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(opt.batch_size) {
            let grads = par::map(batch, |&i| {
                let mut g = model.zeros_like();
                model.accumulate(train, i, &mut g).map(|r| (r, g))
            });
            let mut sum = model.zeros_like();
            for (k, r) in grads.into_iter().enumerate() {
                let ((l, y), g) = r?;
                if !l.is_finite() {
                    return Err(Error::Diverged { epoch, loss: l });
                }
                total += l;
                correct += usize::from(y == train.labels[batch[k]]);
                for (s, gb) in sum.buffers_mut().into_iter().zip(g.buffers()) {
                    s.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((theta, v), g) in model.buffers_mut().into_iter().zip(velocity.buffers_mut()).zip(sum.buffers()) {
                for j in 0..theta.len() {
                    v[j] = opt.momentum * v[j] + lr * (g[j] * scale + opt.weight_decay * theta[j]);
                    theta[j] -= v[j];
                }
            }
        }
        if model.buffers().iter().any(|b| b.iter().any(|x| !x.is_finite())) {
            return Err(Error::Diverged { epoch, loss: f64::NAN });
        }
        let (val_loss, val_accuracy) = match val {
            Some(v) if !v.is_empty() => {
                let (l, a) = mean_eval(&model, v)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        curve.push(EpochStats {
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
        });
    }
    Ok((model, TrainReport { curve }))
}

/// Network-side settings of the encoder stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub loss: LossConfig,
    pub aggregation: Aggregation,
    pub optim: OptimConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: super::DEFAULT_HIDDEN,
            loss: LossConfig::Multi,
            aggregation: Aggregation::WholeImage,
            optim: OptimConfig::default(),
        }
    }
}

/// Initializes a network from `seed` and trains it.
pub fn train(train: &SequenceDataset, val: Option<&SequenceDataset>, cfg: &EncoderConfig, seed: u64) -> Result<(StackedLstm, TrainReport)> {
    let (steps, dim) = train.shape();
    cfg.loss.validate(steps)?;
    let net = StackedLstm::init(dim, cfg.hidden, train.classes, &mut stream(seed, "encoder/init"))?;
    let model = LstmObjective {
        net,
        loss: cfg.loss.clone(),
        aggregation: cfg.aggregation,
    };
    let (m, report) = fit(model, train, val, &cfg.optim, seed)?;
    Ok((m.net, report))
}
