//! Two-layer stacked bidirectional LSTM with a shared softmax classifier.
//!
//! Layer 1 reads the sequence in order. Layer 2 reads the layer-1 hidden
//! states in reverse order. Step `t`'s output is the classifier applied to
//! the layer-2 state computed at input element `t`, so every step sees the
//! whole sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PatchSequence;
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 256;

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// One LSTM layer. Gate blocks are stacked as `[input, forget, cell, output]`;
/// `w` is `4D x input`, `u` is `4D x D`, both row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub input: usize,
    pub hidden: usize,
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
}

struct LayerTrace {
    xs: Vec<Vec<f64>>,
    /// Activated gates per step, `[i, f, g, o]` blocks of `D`.
    gates: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
    hs: Vec<Vec<f64>>,
}

impl LstmLayer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmLayer {
            input,
            hidden,
            w: vec![0.0; 4 * hidden * input],
            u: vec![0.0; 4 * hidden * hidden],
            b: vec![0.0; 4 * hidden],
        }
    }

    fn run(&self, xs: Vec<Vec<f64>>) -> LayerTrace {
        let d = self.hidden;
        let mut tr = LayerTrace {
            gates: Vec::with_capacity(xs.len()),
            cs: Vec::with_capacity(xs.len()),
            hs: Vec::with_capacity(xs.len()),
            xs: Vec::new(),
        };
        let zeros = vec![0.0; d];
        for x in &xs {
            let h_prev = tr.hs.last().unwrap_or(&zeros);
            let c_prev = tr.cs.last().unwrap_or(&zeros);
            let mut a: Vec<f64> = (0..4 * d)
                .map(|r| {
                    self.b[r] + dot(&self.w[r * self.input..(r + 1) * self.input], x) + dot(&self.u[r * d..(r + 1) * d], h_prev)
                })
                .collect();
            for r in 0..4 * d {
                a[r] = if r / d == 2 { a[r].tanh() } else { sigmoid(a[r]) };
            }
            let c: Vec<f64> = (0..d).map(|k| a[d + k] * c_prev[k] + a[k] * a[2 * d + k]).collect();
            let h: Vec<f64> = (0..d).map(|k| a[3 * d + k] * c[k].tanh()).collect();
            tr.gates.push(a);
            tr.cs.push(c);
            tr.hs.push(h);
        }
        tr.xs = xs;
        tr
    }

    /// Backpropagates `dh[s]` (loss gradient on the hidden state emitted at
    /// processing step `s`), accumulating into `grad`; returns input gradients.
    fn backward(&self, tr: &LayerTrace, dh: &[Vec<f64>], grad: &mut LstmLayer) -> Vec<Vec<f64>> {
        let (d, n) = (self.hidden, self.input);
        let zeros = vec![0.0; d];
        let mut dh_next = vec![0.0; d];
        let mut dc_next = vec![0.0; d];
        let mut dxs = vec![Vec::new(); tr.xs.len()];
        let mut dz = vec![0.0; 4 * d];
        for s in (0..tr.xs.len()).rev() {
            let a = &tr.gates[s];
            let c = &tr.cs[s];
            let c_prev = if s > 0 { &tr.cs[s - 1] } else { &zeros };
            let h_prev = if s > 0 { &tr.hs[s - 1] } else { &zeros };
            for k in 0..d {
                let (i, f, g, o) = (a[k], a[d + k], a[2 * d + k], a[3 * d + k]);
                let tc = c[k].tanh();
                let dhk = dh[s][k] + dh_next[k];
                let dc = dc_next[k] + dhk * o * (1.0 - tc * tc);
                dz[k] = dc * g * i * (1.0 - i);
                dz[d + k] = dc * c_prev[k] * f * (1.0 - f);
                dz[2 * d + k] = dc * i * (1.0 - g * g);
                dz[3 * d + k] = dhk * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            let x = &tr.xs[s];
            let mut dx = vec![0.0; n];
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            for r in 0..4 * d {
                let z = dz[r];
                if z == 0.0 {
                    continue;
                }
                grad.b[r] += z;
                let wr = &self.w[r * n..(r + 1) * n];
                for (j, gw) in grad.w[r * n..(r + 1) * n].iter_mut().enumerate() {
                    *gw += z * x[j];
                    dx[j] += z * wr[j];
                }
                let ur = &self.u[r * d..(r + 1) * d];
                for (j, gu) in grad.u[r * d..(r + 1) * d].iter_mut().enumerate() {
                    *gu += z * h_prev[j];
                    dh_next[j] += z * ur[j];
                }
            }
            dxs[s] = dx;
        }
        dxs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedLstm {
    pub classes: usize,
    pub layer1: LstmLayer,
    pub layer2: LstmLayer,
    /// Classifier weights, `classes x D` row-major, shared by every step.
    pub v: Vec<f64>,
    pub c: Vec<f64>,
}

impl StackedLstm {
    pub fn zeros(input: usize, hidden: usize, classes: usize) -> Self {
        StackedLstm {
            classes,
            layer1: LstmLayer::zeros(input, hidden),
            layer2: LstmLayer::zeros(hidden, hidden),
            v: vec![0.0; classes * hidden],
            c: vec![0.0; classes],
        }
    }

    /// Uniform `[-1/sqrt(D), 1/sqrt(D)]` weights, zero biases except a unit
    /// forget-gate bias.
    pub fn init<R: Rng>(input: usize, hidden: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if input == 0 || hidden == 0 || classes < 2 {
            return Err(Error::arg(format!("network dims input {input} hidden {hidden} classes {classes}")));
        }
        let mut net = StackedLstm::zeros(input, hidden, classes);
        let a = 1.0 / (hidden as f64).sqrt();
        for buf in [&mut net.layer1.w, &mut net.layer1.u, &mut net.layer2.w, &mut net.layer2.u, &mut net.v] {
            buf.iter_mut().for_each(|x| *x = rng.random_range(-a..a));
        }
        for layer in [&mut net.layer1, &mut net.layer2] {
            layer.b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.layer1.input
    }

    pub fn hidden(&self) -> usize {
        self.layer1.hidden
    }

    /// Checks shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        let (n, d, k) = (self.input_dim(), self.hidden(), self.classes);
        let expected = [4 * d * n, 4 * d * d, 4 * d, 4 * d * d, 4 * d * d, 4 * d, k * d, k];
        for ((name, _, buf), len) in self.tensors().into_iter().zip(expected) {
            if buf.len() != len {
                return Err(Error::CorruptModel(format!("{name} has {} values, expected {len}", buf.len())));
            }
            if let Some(i) = buf.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index: i });
            }
        }
        if self.layer2.input != d || self.layer2.hidden != d {
            return Err(Error::CorruptModel("layer 2 must map D to D".into()));
        }
        Ok(())
    }

    /// Named parameter tensors with `[rows, cols]` shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, [usize; 2], &[f64])> {
        let (n, d, k) = (self.input_dim(), self.hidden(), self.classes);
        vec![
            ("layer1.w", [4 * d, n], &self.layer1.w),
            ("layer1.u", [4 * d, d], &self.layer1.u),
            ("layer1.b", [1, 4 * d], &self.layer1.b),
            ("layer2.w", [4 * d, d], &self.layer2.w),
            ("layer2.u", [4 * d, d], &self.layer2.u),
            ("layer2.b", [1, 4 * d], &self.layer2.b),
            ("classifier.w", [k, d], &self.v),
            ("classifier.b", [1, k], &self.c),
        ]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.layer1.w,
            &mut self.layer1.u,
            &mut self.layer1.b,
            &mut self.layer2.w,
            &mut self.layer2.u,
            &mut self.layer2.b,
            &mut self.v,
            &mut self.c,
        ]
    }

    fn check_input(&self, seq: &PatchSequence) -> Result<()> {
        if seq.dim() != self.input_dim() {
            return Err(Error::dim(format!("sequence dim {} vs network input {}", seq.dim(), self.input_dim())));
        }
        Ok(())
    }

    fn run(&self, seq: &PatchSequence) -> (LayerTrace, LayerTrace, Vec<Vec<f64>>) {
        let steps = seq.len();
        let t1 = self.layer1.run((0..steps).map(|t| seq.step(t).to_vec()).collect());
        let t2 = self.layer2.run(t1.hs.iter().rev().cloned().collect());
        let d = self.hidden();
        let probs = (0..steps)
            .map(|t| {
                let h = &t2.hs[steps - 1 - t];
                let z: Vec<f64> = (0..self.classes).map(|k| self.c[k] + dot(&self.v[k * d..(k + 1) * d], h)).collect();
                softmax(&z)
            })
            .collect();
        (t1, t2, probs)
    }

    /// Per-step class probabilities, aligned with the input steps.
    pub fn forward(&self, seq: &PatchSequence) -> Result<Vec<Vec<f64>>> {
        self.check_input(seq)?;
        Ok(self.run(seq).2)
    }

    /// Loss and exact gradients with respect to every parameter and every
    /// input feature.
    pub fn backward(&self, seq: &PatchSequence, label: u32, cfg: &LossConfig) -> Result<Backward> {
        let mut grads = StackedLstm::zeros(self.input_dim(), self.hidden(), self.classes);
        let (loss, inputs) = self.backward_into(seq, label, cfg, &mut grads)?;
        Ok(Backward { loss, grads, inputs })
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(&self, seq: &PatchSequence, label: u32, cfg: &LossConfig, grads: &mut StackedLstm) -> Result<(f64, Vec<Vec<f64>>)> {
        self.backward_outputs(seq, label, cfg, grads).map(|(l, dx, _)| (l, dx))
    }

    pub(crate) fn backward_outputs(
        &self,
        seq: &PatchSequence,
        label: u32,
        cfg: &LossConfig,
        grads: &mut StackedLstm,
    ) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check_input(seq)?;
        let y = label as usize;
        if y >= self.classes {
            return Err(Error::arg(format!("label {label} outside {} classes", self.classes)));
        }
        let (t1, t2, probs) = self.run(seq);
        let loss = loss(&probs, label, cfg)?;
        let weights = cfg.weights(probs.len());
        let (steps, d) = (probs.len(), self.hidden());
        let mut dh2 = vec![vec![0.0; d]; steps];
        for (t, p) in probs.iter().enumerate() {
            // derivative of the clamped log is zero where the clamp is active
            if weights[t] == 0.0 || p[y] < PROB_FLOOR {
                continue;
            }
            let s = steps - 1 - t;
            let h = &t2.hs[s];
            for k in 0..self.classes {
                let dl = weights[t] * (p[k] - if k == y { 1.0 } else { 0.0 });
                grads.c[k] += dl;
                let vk = &self.v[k * d..(k + 1) * d];
                for j in 0..d {
                    grads.v[k * d + j] += dl * h[j];
                    dh2[s][j] += dl * vk[j];
                }
            }
        }
        let dx2 = self.layer2.backward(&t2, &dh2, &mut grads.layer2);
        let dh1: Vec<Vec<f64>> = dx2.into_iter().rev().collect();
        let inputs = self.layer1.backward(&t1, &dh1, &mut grads.layer1);
        Ok((loss, inputs, probs))
    }
}

/// Output of [`StackedLstm::backward`].
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub grads: StackedLstm,
    /// Gradient with respect to each input step's feature vector.
    pub inputs: Vec<Vec<f64>>,
}

/// Weighting of the per-step loss terms. The whole-image step always has
/// weight 1; `gamma` weights every later step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LossConfig {
    /// Whole-image term only.
    Single,
    /// Every patch term with weight 1.
    #[default]
    Multi,
    /// Explicit non-negative weights for steps `1..`.
    Weighted { gamma: Vec<f64> },
}

impl LossConfig {
    /// Per-step weights for a sequence of `steps` outputs.
    pub fn weights(&self, steps: usize) -> Vec<f64> {
        let mut w = vec![0.0; steps];
        if steps > 0 {
            w[0] = 1.0;
        }
        for (t, wt) in w.iter_mut().enumerate().skip(1) {
            *wt = match self {
                LossConfig::Single => 0.0,
                LossConfig::Multi => 1.0,
                LossConfig::Weighted { gamma } => gamma.get(t - 1).copied().unwrap_or(0.0),
            };
        }
        w
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if let LossConfig::Weighted { gamma } = self {
            if gamma.len() + 1 != steps {
                return Err(Error::dim(format!("{} weights for {steps} steps", gamma.len())));
            }
            if gamma.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
                return Err(Error::arg("loss weights must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// `-log p_0(y) - sum_{t >= 1} gamma_t log p_t(y)` with probabilities floored
/// at [`PROB_FLOOR`].
pub fn loss(outputs: &[Vec<f64>], label: u32, cfg: &LossConfig) -> Result<f64> {
    cfg.validate(outputs.len())?;
    let y = label as usize;
    let mut total = 0.0;
    for (p, w) in outputs.iter().zip(cfg.weights(outputs.len())) {
        let py = *p.get(y).ok_or_else(|| Error::arg(format!("label {label} outside {} classes", p.len())))?;
        if w != 0.0 {
            total -= w * py.max(PROB_FLOOR).ln();
        }
    }
    Ok(total)
}

/// How a class is read off the per-step outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// The whole-image step's output.
    #[default]
    WholeImage,
    /// Mean of all step outputs.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u32,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn from_probs(probs: Vec<f64>) -> Prediction {
        Prediction {
            label: argmax(&probs) as u32,
            probs,
        }
    }
}

pub fn aggregate(outputs: &[Vec<f64>], how: Aggregation) -> Prediction {
    let probs = match how {
        Aggregation::WholeImage => outputs[0].clone(),
        Aggregation::Mean => {
            let mut m = vec![0.0; outputs[0].len()];
            for p in outputs {
                m.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|a| *a /= outputs.len() as f64);
            m
        }
    };
    Prediction::from_probs(probs)
}

pub fn predict(seq: &PatchSequence, net: &StackedLstm, how: Aggregation) -> Result<Prediction> {
    Ok(aggregate(&net.forward(seq)?, how))
}
