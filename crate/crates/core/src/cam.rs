//! Class activation maps and the instance probability stack that seeds CRF
//! refinement.
//!
//! Instance channels of a [`ProbStack`] are indexed `0..n`; channel `n` is
//! background. In a [`LabelMap`], label `λ > 0` refers to instance channel
//! `λ - 1` and `0` means "background or undecided".

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureVec;
use crate::geometry::BBox;
use crate::tensor::{bilinear_resize, Tensor3};

pub const DEFAULT_SIGMA_C: f64 = 0.8;
pub const DEFAULT_ACTIVATION_FLOOR: f64 = 0.3;

/// Unnormalized activation map for one class at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub class_id: u32,
}

impl CamMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `n` instance probability channels plus one background channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbStack {
    n: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbStack {
    /// Builds a stack from instance channels in `[0,1]`; the background is
    /// `max(1 - sum, 0)` per pixel.
    pub fn from_instances(height: usize, width: usize, instances: Vec<Vec<f64>>) -> Result<Self> {
        let n = instances.len();
        let plane = height * width;
        let mut data = Vec::with_capacity((n + 1) * plane);
        for (k, ch) in instances.iter().enumerate() {
            if ch.len() != plane {
                return Err(Error::dim(format!("instance {k} has {} values, expected {plane}", ch.len())));
            }
            if let Some(i) = ch.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::arg(format!("instance {k} value {} at {i} outside [0,1]", ch[i])));
            }
            data.extend_from_slice(ch);
        }
        for i in 0..plane {
            let s: f64 = instances.iter().map(|c| c[i]).sum();
            data.push((1.0 - s).max(0.0));
        }
        Ok(ProbStack {
            n,
            height,
            width,
            data,
        })
    }

    /// Reads a stack back from `n + 1` channels, checking the background rule.
    pub fn from_tensor(t: &Tensor3) -> Result<Self> {
        if t.channels() < 2 {
            return Err(Error::dim("a probability stack needs at least one instance channel"));
        }
        let n = t.channels() - 1;
        let instances = (0..n).map(|k| t.channel(k).to_vec()).collect();
        let s = ProbStack::from_instances(t.height(), t.width(), instances)?;
        // the container stores f32, so compare at single precision
        let bg = t.channel(n);
        if let Some(i) = (0..bg.len()).find(|&i| (bg[i] - s.background()[i]).abs() > 1e-6) {
            return Err(Error::Format(format!("background channel violates max(1-sum,0) at {i}")));
        }
        Ok(s)
    }

    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::new(self.n + 1, self.height, self.width, self.data.clone()).expect("stack is finite")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> usize {
        self.n + 1
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[k * p..(k + 1) * p]
    }

    pub fn instance(&self, k: usize) -> &[f64] {
        assert!(k < self.n, "instance {k} out of range");
        self.channel(k)
    }

    pub fn background(&self) -> &[f64] {
        self.channel(self.n)
    }

    /// Value of channel `k` at pixel index `i`.
    pub fn at(&self, k: usize, i: usize) -> f64 {
        self.data[k * self.height * self.width + i]
    }
}

/// Per-pixel seed labels: `0` for background/undecided, `λ` for instance `λ - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(n: usize, height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim(format!("label map {height}x{width} with {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize > n) {
            return Err(Error::arg(format!("label {l} exceeds instance count {n}")));
        }
        Ok(LabelMap {
            n,
            height,
            width,
            labels,
        })
    }

    pub fn to_tensor(&self) -> Tensor3 {
        let data = self.labels.iter().map(|&l| l as f64).collect();
        Tensor3::new(1, self.height, self.width, data).expect("labels are finite")
    }

    /// Reads labels from a one-channel tensor; `n` is the instance count.
    pub fn from_tensor(t: &Tensor3, n: usize) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::dim(format!("label tensor has {} channels", t.channels())));
        }
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as u32)
                } else {
                    Err(Error::Format(format!("label value {v} is not a non-negative integer")))
                }
            })
            .collect::<Result<_>>()?;
        LabelMap::new(n, t.height(), t.width(), labels)
    }

    /// Tight box around every pixel carrying label `λ`, if any.
    pub fn segment_box(&self, label: u32) -> Option<BBox> {
        let pixels: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect();
        self.pixels_box(&pixels)
    }

    /// Tight box around the largest 8-connected region whose labels are all
    /// in `labels` (the first such region in raster order on ties).
    pub fn main_segment_box(&self, labels: &[u32]) -> Option<BBox> {
        let regions = components(self.height, self.width, |i| labels.contains(&self.labels[i]));
        let mut best: Option<&Vec<usize>> = None;
        for r in &regions {
            if best.is_none_or(|b| r.len() > b.len()) {
                best = Some(r);
            }
        }
        best.and_then(|r| self.pixels_box(r))
    }

    fn pixels_box(&self, pixels: &[usize]) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &i in pixels {
            let (y, x) = (i / self.width, i % self.width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        (x0 != usize::MAX).then(|| {
            BBox::new(
                (x0 + x1) as f64 / 2.0,
                (y0 + y1) as f64 / 2.0,
                (x1 - x0) as f64,
                (y1 - y0) as f64,
            )
            .expect("non-empty segment")
        })
    }
}

/// Weighted channel sum of a feature map, upsampled to `out_h x out_w`.
pub fn compute_cam(
    features: &Tensor3,
    class_weights: &FeatureVec,
    class_id: u32,
    out_h: usize,
    out_w: usize,
) -> Result<CamMap> {
    if class_weights.dim() != features.channels() {
        return Err(Error::dim(format!(
            "{} class weights for {} feature channels",
            class_weights.dim(),
            features.channels()
        )));
    }
    let mut low = vec![0.0; features.plane()];
    for (k, &w) in class_weights.values().iter().enumerate() {
        for (acc, &v) in low.iter_mut().zip(features.channel(k)) {
            *acc += w * v;
        }
    }
    let values = bilinear_resize(&low, features.height(), features.width(), out_h, out_w)?;
    Ok(CamMap {
        height: out_h,
        width: out_w,
        values,
        class_id,
    })
}

/// 8-connected components of the pixels selected by `inside`, in raster
/// order of their first pixel.
pub(crate) fn components(h: usize, w: usize, inside: impl Fn(usize) -> bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut found = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || !inside(start) {
            continue;
        }
        let mut pixels = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (ny, nx) = (y + dy, x + dx);
                    if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && inside(j) {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        found.push(pixels);
    }
    found
}

/// Splits a CAM into candidate instances: one map per 8-connected component
/// of `{v >= floor * max}`, holding the CAM inside the component and zero
/// outside, ordered by descending peak.
pub fn split_instances(cam: &CamMap, activation_floor: f64) -> Result<Vec<CamMap>> {
    if !(activation_floor > 0.0 && activation_floor < 1.0) {
        return Err(Error::arg(format!("activation floor {activation_floor} not in (0,1)")));
    }
    let (h, w) = (cam.height, cam.width);
    let peak = cam.max();
    if !(peak > 0.0) {
        return Ok(Vec::new());
    }
    let cut = activation_floor * peak;
    let mut found: Vec<(f64, Vec<usize>)> = components(h, w, |i| cam.values[i] >= cut)
        .into_iter()
        .map(|pixels| (pixels.iter().map(|&i| cam.values[i]).fold(f64::NEG_INFINITY, f64::max), pixels))
        .collect();
    // stable sort keeps raster discovery order among equal peaks
    found.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(found
        .into_iter()
        .map(|(_, pixels)| {
            let mut values = vec![0.0; h * w];
            for i in pixels {
                values[i] = cam.values[i];
            }
            CamMap {
                height: h,
                width: w,
                values,
                class_id: cam.class_id,
            }
        })
        .collect())
}

/// Normalizes each instance map by its own maximum and appends the
/// clamp-complement background channel.
pub fn build_prob_stack(instance_maps: &[CamMap]) -> Result<ProbStack> {
    let first = instance_maps
        .first()
        .ok_or_else(|| Error::arg("cannot build a probability stack from zero instances"))?;
    let (h, w) = (first.height, first.width);
    let mut channels = Vec::with_capacity(instance_maps.len());
    for (k, m) in instance_maps.iter().enumerate() {
        if m.height != h || m.width != w || m.values.len() != h * w {
            return Err(Error::dim(format!("instance {k} is {}x{}, expected {h}x{w}", m.height, m.width)));
        }
        let peak = m.max();
        if !(peak > 0.0) {
            return Err(Error::arg(format!("instance {k} has no positive activation")));
        }
        channels.push(m.values.iter().map(|v| (v / peak).clamp(0.0, 1.0)).collect());
    }
    ProbStack::from_instances(h, w, channels)
}

/// Seeds labels where the winning channel is an instance above `sigma_c`.
/// Ties go to the lowest channel index.
pub fn make_label_map(stack: &ProbStack, sigma_c: f64) -> LabelMap {
    let plane = stack.height * stack.width;
    let labels = (0..plane)
        .map(|i| {
            let mut best = 0;
            for k in 1..stack.labels() {
                if stack.at(k, i) > stack.at(best, i) {
                    best = k;
                }
            }
            if best < stack.n && stack.at(best, i) > sigma_c {
                best as u32 + 1
            } else {
                0
            }
        })
        .collect();
    LabelMap {
        n: stack.n,
        height: stack.height,
        width: stack.width,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam(h: usize, w: usize, values: Vec<f64>) -> CamMap {
        CamMap {
            height: h,
            width: w,
            values,
            class_id: 0,
        }
    }

    fn blob(h: usize, w: usize, centers: &[(f64, f64, f64)]) -> CamMap {
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                for &(cy, cx, amp) in centers {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    v[y * w + x] += amp * (-d2 / 8.0).exp();
                }
            }
        }
        cam(h, w, v)
    }

    #[test]
    fn cam_examples() {
        let f = Tensor3::from_channels(2, 2, &[vec![1.0; 4], vec![2.0; 4]]).unwrap();
        let zero = compute_cam(&f, &FeatureVec::zeros(2), 0, 5, 5).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        let c = compute_cam(&f, &FeatureVec::new(vec![1.0, 3.0]).unwrap(), 1, 4, 3).unwrap();
        assert!(c.values.iter().all(|&v| v == 7.0));
        assert_eq!(c.values.len(), 12);
        assert!(compute_cam(&f, &FeatureVec::zeros(3), 0, 2, 2).is_err());

        let single = Tensor3::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let c = compute_cam(&single, &FeatureVec::new(vec![1.0]).unwrap(), 0, 1, 3).unwrap();
        assert_eq!(c.values, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_instances(&blob(20, 20, &[(10.0, 10.0, 1.0)]), 0.3).unwrap().len(), 1);
        let two = split_instances(&blob(20, 30, &[(10.0, 6.0, 1.0), (10.0, 23.0, 2.0)]), 0.3).unwrap();
        assert_eq!(two.len(), 2);
        // stronger blob first
        assert!(two[0].max() > two[1].max());
        assert!(two[0].values[10 * 30 + 23] > 0.0 && two[1].values[10 * 30 + 6] > 0.0);
        assert!(split_instances(&cam(3, 3, vec![0.0; 9]), 0.3).unwrap().is_empty());
        assert!(split_instances(&cam(1, 1, vec![1.0]), 1.0).is_err());
    }

    #[test]
    fn split_uses_eight_connectivity() {
        let v = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(split_instances(&cam(2, 2, v), 0.5).unwrap().len(), 1);
    }

    #[test]
    fn prob_stack_examples() {
        let s = build_prob_stack(&[cam(1, 3, vec![0.0, 2.0, 4.0])]).unwrap();
        assert_eq!(s.instance(0), &[0.0, 0.5, 1.0]);
        assert_eq!(s.background(), &[1.0, 0.5, 0.0]);

        let s = ProbStack::from_instances(1, 1, vec![vec![0.7], vec![0.6]]).unwrap();
        assert_eq!(s.background(), &[0.0]);
        assert!(build_prob_stack(&[]).is_err());
        assert!(build_prob_stack(&[cam(1, 2, vec![0.0, 0.0])]).is_err());
    }

    #[test]
    fn label_map_examples() {
        let s = ProbStack::from_instances(1, 4, vec![vec![0.9, 0.5, 0.85, 0.05], vec![0.0, 0.4, 0.85, 0.0]]).unwrap();
        let l = make_label_map(&s, DEFAULT_SIGMA_C);
        // pixel 3 is confident background, which stays 0
        assert_eq!(l.labels, vec![1, 0, 1, 0]);
    }

    #[test]
    fn label_tensor_round_trip() {
        let l = LabelMap::new(2, 1, 3, vec![0, 2, 1]).unwrap();
        assert_eq!(LabelMap::from_tensor(&l.to_tensor(), 2).unwrap(), l);
        assert!(LabelMap::new(1, 1, 1, vec![2]).is_err());
        assert_eq!(l.segment_box(2).unwrap(), BBox::new(1.5, 0.5, 1.0, 1.0).unwrap());
        assert!(l.segment_box(3).is_none());
    }

    #[test]
    fn main_segment_ignores_stray_pixels() {
        #[rustfmt::skip]
        let labels = vec![
            1, 1, 0, 0, 0,
            1, 2, 0, 0, 0,
            0, 0, 0, 0, 2,
        ];
        let l = LabelMap::new(2, 3, 5, labels).unwrap();
        assert_eq!(l.main_segment_box(&[1, 2]).unwrap(), BBox::new(1.0, 1.0, 2.0, 2.0).unwrap());
        assert_eq!(l.segment_box(2).unwrap(), BBox::new(3.0, 2.0, 4.0, 2.0).unwrap());
        assert!(l.main_segment_box(&[]).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn stacks_from_random_maps_are_valid(
            n in 1usize..4,
            values in proptest::collection::vec(-1.0f64..5.0, 48),
            sigma_c in 0.05f64..0.95,
        ) {
            let maps: Vec<CamMap> = (0..n)
                .map(|k| {
                    let mut v: Vec<f64> = values.iter().map(|x| (x * (k + 1) as f64) % 5.0).collect();
                    v[k] = 6.0;
                    cam(4, 12, v)
                })
                .collect();
            let s = build_prob_stack(&maps).unwrap();
            for i in 0..48 {
                let sum: f64 = (0..n).map(|k| s.instance(k)[i]).sum();
                prop_assert!((s.background()[i] - (1.0 - sum).max(0.0)).abs() <= 1e-6);
                for k in 0..=n {
                    prop_assert!((0.0..=1.0).contains(&s.channel(k)[i]));
                }
            }
            let l = make_label_map(&s, sigma_c);
            for (i, &lab) in l.labels.iter().enumerate() {
                if lab > 0 {
                    let c = lab as usize - 1;
                    prop_assert!(s.at(c, i) > sigma_c);
                    prop_assert!((0..=n).all(|k| s.at(k, i) <= s.at(c, i)));
                    prop_assert!((0..c).all(|k| s.at(k, i) < s.at(c, i)));
                }
            }
        }

        #[test]
        fn cam_is_linear_in_weights(
            feats in proptest::collection::vec(-3.0f64..3.0, 3 * 2 * 3),
            w1 in proptest::collection::vec(-2.0f64..2.0, 3),
            w2 in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let f = Tensor3::new(3, 2, 3, feats).unwrap();
            let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
            let c = |w: &[f64]| compute_cam(&f, &FeatureVec::new(w.to_vec()).unwrap(), 0, 5, 7).unwrap().values;
            let (a, b, ab) = (c(&w1), c(&w2), c(&sum));
            for i in 0..ab.len() {
                prop_assert!((ab[i] - a[i] - b[i]).abs() <= 1e-5);
            }
        }
    }
}
