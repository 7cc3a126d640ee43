//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use partsmine::encoder::{LossConfig, PatchSequence, StackedLstm};
use partsmine::geometry::iou;
use partsmine::proposal::Proposal;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain LSTM pass written against the documented parameter layout:
/// gate rows `[i; f; g; o]`, each block `hidden` rows.
fn reference_layer(w: &[f64], u: &[f64], b: &[f64], input: usize, hidden: usize, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let row = |m: &[f64], r: usize, cols: usize, v: &[f64]| -> f64 {
        let mut acc = 0.0;
        for j in 0..cols {
            acc += m[r * cols + j] * v[j];
        }
        acc
    };
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut out = Vec::new();
    for x in xs {
        let pre = |gate: usize, k: usize| b[gate * hidden + k] + row(w, gate * hidden + k, input, x) + row(u, gate * hidden + k, hidden, &h);
        let mut nh = vec![0.0; hidden];
        let mut nc = vec![0.0; hidden];
        for k in 0..hidden {
            let i = sig(pre(0, k));
            let f = sig(pre(1, k));
            let g = pre(2, k).tanh();
            let o = sig(pre(3, k));
            nc[k] = f * c[k] + i * g;
            nh[k] = o * nc[k].tanh();
        }
        h = nh;
        c = nc;
        out.push(h.clone());
    }
    out
}

pub fn reference_forward(net: &StackedLstm, seq: &PatchSequence) -> Vec<Vec<f64>> {
    let (n, d, k) = (net.input_dim(), net.hidden(), net.classes);
    let xs: Vec<Vec<f64>> = seq.features().iter().map(|f| f.values().to_vec()).collect();
    let h1 = reference_layer(&net.layer1.w, &net.layer1.u, &net.layer1.b, n, d, &xs);
    let mut rev = h1.clone();
    rev.reverse();
    let mut h2 = reference_layer(&net.layer2.w, &net.layer2.u, &net.layer2.b, d, d, &rev);
    h2.reverse();
    h2.iter()
        .map(|h| {
            let z: Vec<f64> = (0..k).map(|c| net.c[c] + (0..d).map(|j| net.v[c * d + j] * h[j]).sum::<f64>()).collect();
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn reference_loss(net: &StackedLstm, seq: &PatchSequence, label: u32, cfg: &LossConfig) -> f64 {
    partsmine::encoder::loss(&reference_forward(net, seq), label, cfg).unwrap()
}

/// Relative error with a small absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Largest relative error between analytic gradients and central
/// differences, over every parameter and every input feature.
pub fn gradient_check(net: &StackedLstm, seq: &PatchSequence, label: u32, cfg: &LossConfig, eps: f64) -> f64 {
    let analytic = net.backward(seq, label, cfg).unwrap();
    let mut worst: f64 = 0.0;
    let n_buffers = net.tensors().len();
    for b in 0..n_buffers {
        let len = net.tensors()[b].2.len();
        for j in 0..len {
            let mut plus = net.clone();
            plus.buffers_mut()[b][j] += eps;
            let mut minus = net.clone();
            minus.buffers_mut()[b][j] -= eps;
            let fd = (reference_loss(&plus, seq, label, cfg) - reference_loss(&minus, seq, label, cfg)) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.grads.tensors()[b].2[j], fd));
        }
    }
    for t in 0..seq.len() {
        for j in 0..seq.dim() {
            let shift = |delta: f64| {
                let mut fs = seq.features().to_vec();
                let mut v = fs[t].values().to_vec();
                v[j] += delta;
                fs[t] = partsmine::feature::FeatureVec::new(v).unwrap();
                PatchSequence::new(fs).unwrap()
            };
            let fd = (reference_loss(net, &shift(eps), label, cfg) - reference_loss(net, &shift(-eps), label, cfg)) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.inputs[t][j], fd));
        }
    }
    worst
}

/// Scores `parts` (root last) term by term.
fn naive_score(parts: &[&Proposal], lambda_0: f64, beta_0: f64) -> f64 {
    let mut f = 0.0;
    for p in parts {
        f += p.score;
    }
    let mut pen = 0.0;
    for a in 0..parts.len() - 1 {
        for b in a + 1..parts.len() {
            let (x, y) = (parts[a].feature.values(), parts[b].feature.values());
            let mut ds = 0.0;
            for i in 0..x.len() {
                ds += (x[i] - y[i]) * (x[i] - y[i]);
            }
            pen += ds + beta_0 * iou(&parts[a].bbox, &parts[b].bbox);
        }
    }
    f - lambda_0 * pen
}

/// Recursive enumeration of every `n`-subset; the first maximum in
/// lexicographic order wins. Returns (subset, score).
pub fn naive_best_subset(root: &Proposal, cands: &[Proposal], n: usize, lambda_0: f64, beta_0: f64) -> (Vec<usize>, f64) {
    fn rec(
        start: usize,
        chosen: &mut Vec<usize>,
        n: usize,
        root: &Proposal,
        cands: &[Proposal],
        l: f64,
        b: f64,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        if chosen.len() == n {
            let mut parts: Vec<&Proposal> = chosen.iter().map(|&i| &cands[i]).collect();
            parts.push(root);
            let s = naive_score(&parts, l, b);
            if best.as_ref().is_none_or(|(_, bs)| s > *bs) {
                *best = Some((chosen.clone(), s));
            }
            return;
        }
        for i in start..cands.len() {
            chosen.push(i);
            rec(i + 1, chosen, n, root, cands, l, b, best);
            chosen.pop();
        }
    }
    let mut best = None;
    rec(0, &mut Vec::new(), n, root, cands, lambda_0, beta_0, &mut best);
    best.expect("at least one subset")
}
