//! Fully connected CRF with Gaussian pairwise kernels and Potts
//! compatibility, solved by mean-field iteration.
//!
//! Two message paths exist. The exact path sums over every other pixel and
//! is used up to [`EXACT_PIXEL_LIMIT`] pixels; above that a truncated window
//! of radius `3 * max(spatial sigma)` is used. Both accumulate each pixel's
//! message sequentially in raster order, so parallel and sequential builds
//! agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::cam::{LabelMap, ProbStack};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;

/// Images with at most this many pixels (64 x 64) use the exact path.
pub const EXACT_PIXEL_LIMIT: usize = 64 * 64;

/// Unary probabilities are floored here before entering the update so a zero
/// never becomes an absorbing state.
const UNARY_FLOOR: f64 = 1e-8;

const ROWS_PER_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfParams {
    pub appearance_weight: f64,
    pub appearance_spatial_sigma: f64,
    pub appearance_color_sigma: f64,
    pub smoothness_weight: f64,
    pub smoothness_sigma: f64,
    pub iterations: usize,
    pub hard_seed_confidence: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            appearance_weight: 10.0,
            appearance_spatial_sigma: 60.0,
            appearance_color_sigma: 20.0,
            smoothness_weight: 3.0,
            smoothness_sigma: 3.0,
            iterations: 10,
            hard_seed_confidence: 0.9,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if self.appearance_weight < 0.0 || self.smoothness_weight < 0.0 {
            return Err(Error::arg("CRF kernel weights must be non-negative"));
        }
        if !(self.appearance_spatial_sigma > 0.0 && self.appearance_color_sigma > 0.0 && self.smoothness_sigma > 0.0) {
            return Err(Error::arg("CRF kernel bandwidths must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::arg("CRF needs at least one iteration"));
        }
        if !(self.hard_seed_confidence > 0.5 && self.hard_seed_confidence < 1.0) {
            return Err(Error::arg(format!(
                "hard seed confidence {} not in (0.5, 1)",
                self.hard_seed_confidence
            )));
        }
        Ok(())
    }

    pub fn window_radius(&self) -> usize {
        (3.0 * self.appearance_spatial_sigma.max(self.smoothness_sigma)).ceil() as usize
    }
}

/// How pairwise messages are gathered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessagePath {
    Exact,
    Windowed { radius: usize },
}

impl MessagePath {
    pub fn auto(height: usize, width: usize, params: &CrfParams) -> Self {
        if height * width <= EXACT_PIXEL_LIMIT {
            MessagePath::Exact
        } else {
            MessagePath::Windowed {
                radius: params.window_radius(),
            }
        }
    }
}

/// Per-pixel label distributions, stored pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalStack {
    labels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl MarginalStack {
    /// `data[i * labels + l]` is the probability of label `l` at pixel `i`.
    pub fn new(labels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if labels == 0 || data.len() != labels * height * width {
            return Err(Error::dim(format!(
                "marginals {labels}x{height}x{width} with {} values",
                data.len()
            )));
        }
        let m = MarginalStack {
            labels,
            height,
            width,
            data,
        };
        for i in 0..height * width {
            let d = m.pixel(i);
            if d.iter().any(|v| !(0.0..=1.0).contains(v)) || (d.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::arg(format!("pixel {i} is not a distribution: {d:?}")));
            }
        }
        Ok(m)
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.labels..(i + 1) * self.labels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Per-pixel most likely label index; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.height * self.width)
            .map(|i| {
                let d = self.pixel(i);
                (1..d.len()).fold(0, |b, l| if d[l] > d[b] { l } else { b })
            })
            .collect()
    }

    /// Converts the argmax to a label map; the last label is background (0).
    pub fn to_label_map(&self) -> LabelMap {
        let n = self.labels - 1;
        let labels = self
            .argmax()
            .into_iter()
            .map(|c| if c == n { 0 } else { c as u32 + 1 })
            .collect();
        LabelMap {
            n,
            height: self.height,
            width: self.width,
            labels,
        }
    }

    /// Label-major tensor (channel `l` holds label `l`), matching the
    /// probability stack channel order.
    pub fn to_tensor(&self) -> crate::tensor::Tensor3 {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.labels * plane];
        for i in 0..plane {
            for l in 0..self.labels {
                out[l * plane + i] = self.data[i * self.labels + l];
            }
        }
        crate::tensor::Tensor3::new(self.labels, self.height, self.width, out).expect("finite marginals")
    }
}

fn check_dims(labels: &LabelMap, stack: &ProbStack) -> Result<()> {
    if labels.height != stack.height() || labels.width != stack.width() || labels.n != stack.n() {
        return Err(Error::dim(format!(
            "label map {}x{} (n={}) vs stack {}x{} (n={})",
            labels.height,
            labels.width,
            labels.n,
            stack.height(),
            stack.width(),
            stack.n()
        )));
    }
    Ok(())
}

/// Unary distributions: seeded pixels put `hard_seed_confidence` on their
/// label and spread the rest uniformly; other pixels use the renormalized stack.
pub fn unary_from_labels(label_map: &LabelMap, stack: &ProbStack, params: &CrfParams) -> Result<MarginalStack> {
    check_dims(label_map, stack)?;
    let l_count = stack.labels();
    let plane = stack.height() * stack.width();
    let rest = if l_count > 1 {
        (1.0 - params.hard_seed_confidence) / (l_count - 1) as f64
    } else {
        0.0
    };
    let mut data = Vec::with_capacity(plane * l_count);
    for i in 0..plane {
        match label_map.labels[i] {
            0 => {
                let total: f64 = (0..l_count).map(|k| stack.at(k, i)).sum();
                data.extend((0..l_count).map(|k| stack.at(k, i) / total));
            }
            lab => {
                let c = lab as usize - 1;
                data.extend((0..l_count).map(|k| if k == c { params.hard_seed_confidence } else { rest }));
            }
        }
    }
    MarginalStack::new(l_count, stack.height(), stack.width(), data)
}

struct Kernel {
    w_app: f64,
    inv_pos_app: f64,
    inv_col: f64,
    w_smooth: f64,
    inv_pos_smooth: f64,
}

impl Kernel {
    fn new(p: &CrfParams) -> Self {
        Kernel {
            w_app: p.appearance_weight,
            inv_pos_app: 1.0 / (2.0 * p.appearance_spatial_sigma.powi(2)),
            inv_col: 1.0 / (2.0 * p.appearance_color_sigma.powi(2)),
            w_smooth: p.smoothness_weight,
            inv_pos_smooth: 1.0 / (2.0 * p.smoothness_sigma.powi(2)),
        }
    }

    #[inline]
    fn eval(&self, d2: f64, c2: f64) -> f64 {
        let mut k = 0.0;
        if self.w_app != 0.0 {
            k += self.w_app * (-d2 * self.inv_pos_app - c2 * self.inv_col).exp();
        }
        if self.w_smooth != 0.0 {
            k += self.w_smooth * (-d2 * self.inv_pos_smooth).exp();
        }
        k
    }
}

/// One mean-field update with the path chosen by image size.
pub fn mean_field_step(
    unary: &MarginalStack,
    q: &MarginalStack,
    image: &Image,
    params: &CrfParams,
) -> Result<MarginalStack> {
    let path = MessagePath::auto(q.height, q.width, params);
    mean_field_step_with(unary, q, image, params, path)
}

/// One mean-field update: `q_i(l) ∝ u_i(l) * exp(sum_{j≠i} k(i,j) q_j(l))`,
/// the Potts form of `softmax(log u - pairwise energy)`.
pub fn mean_field_step_with(
    unary: &MarginalStack,
    q: &MarginalStack,
    image: &Image,
    params: &CrfParams,
    path: MessagePath,
) -> Result<MarginalStack> {
    let (h, w, l_count) = (q.height, q.width, q.labels);
    if unary.height != h || unary.width != w || unary.labels != l_count {
        return Err(Error::dim("unary and current marginals differ in shape"));
    }
    if image.height() != h || image.width() != w {
        return Err(Error::dim(format!(
            "image {}x{} vs marginals {h}x{w}",
            image.height(),
            image.width()
        )));
    }
    let kernel = Kernel::new(params);
    let colors: Vec<[f64; 3]> = (0..h * w).map(|i| image.rgb(i / w, i % w)).collect();
    let radius = match path {
        MessagePath::Exact => h.max(w),
        MessagePath::Windowed { radius } => radius,
    };

    let mut out = vec![0.0; h * w * l_count];
    par::for_each_chunk_mut(&mut out, ROWS_PER_CHUNK * w * l_count, |chunk_idx, chunk| {
        let mut msg = vec![0.0; l_count];
        let first = chunk_idx * ROWS_PER_CHUNK * w;
        for (off, dst) in chunk.chunks_mut(l_count).enumerate() {
            let i = first + off;
            let (y, x) = (i / w, i % w);
            msg.iter_mut().for_each(|m| *m = 0.0);
            let ci = colors[i];
            let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            for yj in y0..y1 {
                let dy = yj as f64 - y as f64;
                for xj in x0..x1 {
                    let j = yj * w + xj;
                    if j == i {
                        continue;
                    }
                    let dx = xj as f64 - x as f64;
                    let cj = colors[j];
                    let c2 = (ci[0] - cj[0]).powi(2) + (ci[1] - cj[1]).powi(2) + (ci[2] - cj[2]).powi(2);
                    let k = kernel.eval(dy * dy + dx * dx, c2);
                    if k == 0.0 {
                        continue;
                    }
                    for (m, qj) in msg.iter_mut().zip(q.pixel(j)) {
                        *m += k * qj;
                    }
                }
            }
            let top = msg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let u = unary.pixel(i);
            let mut total = 0.0;
            for l in 0..l_count {
                let v = u[l].max(UNARY_FLOOR) * (msg[l] - top).exp();
                dst[l] = v;
                total += v;
            }
            dst.iter_mut().for_each(|v| *v /= total);
        }
    });
    Ok(MarginalStack {
        labels: l_count,
        height: h,
        width: w,
        data: out,
    })
}

/// Runs `params.iterations` mean-field steps from the unaries and returns
/// the refined labels with the final marginals.
pub fn infer(
    label_map: &LabelMap,
    stack: &ProbStack,
    image: &Image,
    params: &CrfParams,
) -> Result<(LabelMap, MarginalStack)> {
    let path = MessagePath::auto(stack.height(), stack.width(), params);
    infer_with(label_map, stack, image, params, path)
}

pub fn infer_with(
    label_map: &LabelMap,
    stack: &ProbStack,
    image: &Image,
    params: &CrfParams,
    path: MessagePath,
) -> Result<(LabelMap, MarginalStack)> {
    params.validate()?;
    let unary = unary_from_labels(label_map, stack, params)?;
    let mut q = unary.clone();
    for _ in 0..params.iterations {
        q = mean_field_step_with(&unary, &q, image, params, path)?;
    }
    Ok((q.to_label_map(), q))
}
