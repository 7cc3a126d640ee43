//! Seeded synthetic scenes and a detector stand-in that emits jittered
//! copies of (prior-informed) object boxes and optional part boxes.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureVec;
use crate::geometry::{iou, BBox};
use crate::image::Image;
use crate::proposal::{Proposal, SoftMask};
use crate::rng::stream;

use super::provider::{DetectionProvider, RefinementPrior};

/// Elliptical object inscribed in `bbox`, optionally textured with stripes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub bbox: BBox,
    pub class_id: u32,
    pub color: [f64; 3],
    /// Stripe orientation per texture cell, row-major over a `g x g` grid
    /// of the box (`true` = vertical stripes). Empty means untextured.
    #[serde(default)]
    pub pattern: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneNoise {
    /// Per-channel Gaussian pixel noise.
    pub pixel_sigma: f64,
    /// Box jitter as a fraction of box size.
    pub jitter: f64,
    /// Jittered copies emitted per instance.
    pub count: usize,
    pub feature_noise: f64,
    pub feature_dim: usize,
    /// Offset of the first-round anchor from the true box, as a fraction of its size.
    pub anchor_bias: f64,
    /// Side of the part grid; 0 disables part proposals.
    pub part_grid: usize,
    /// Part proposals per instance, assigned to grid cells round-robin.
    pub part_count: usize,
    pub part_jitter: f64,
    pub stripe_amplitude: f64,
}

impl Default for SceneNoise {
    fn default() -> Self {
        SceneNoise {
            pixel_sigma: 8.0,
            jitter: 0.1,
            count: 20,
            feature_noise: 0.1,
            feature_dim: super::DEFAULT_FEATURE_DIM,
            anchor_bias: 0.0,
            part_grid: 0,
            part_count: 0,
            part_jitter: 0.05,
            stripe_amplitude: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    pub background: [f64; 3],
    pub instances: Vec<SceneInstance>,
    #[serde(default)]
    pub noise: SceneNoise,
    pub seed: u64,
}

/// Recipe for random scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub classes: u32,
    pub noise: SceneNoise,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 40,
            width: 40,
            min_instances: 1,
            max_instances: 2,
            min_size: 12.0,
            max_size: 20.0,
            classes: 3,
            noise: SceneNoise {
                anchor_bias: 0.2,
                ..SceneNoise::default()
            },
        }
    }
}

fn inside_ellipse(b: &BBox, px: f64, py: f64) -> bool {
    let (dx, dy) = ((px - b.cx) / (b.w / 2.0), (py - b.cy) / (b.h / 2.0));
    dx * dx + dy * dy <= 1.0
}

impl SyntheticScene {
    pub fn random(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
        if spec.min_instances == 0 || spec.max_instances < spec.min_instances {
            return Err(Error::arg("scene spec needs 1 <= min_instances <= max_instances"));
        }
        if !(spec.min_size > 0.0 && spec.max_size >= spec.min_size) {
            return Err(Error::arg("scene spec needs 0 < min_size <= max_size"));
        }
        if spec.max_size > spec.width.min(spec.height) as f64 || spec.classes == 0 {
            return Err(Error::arg("scene spec objects do not fit the image"));
        }
        let mut rng = stream(seed, "scene/layout");
        let count = rng.random_range(spec.min_instances..=spec.max_instances);
        let mut instances: Vec<SceneInstance> = Vec::new();
        for _ in 0..count {
            for _attempt in 0..100 {
                let w = rng.random_range(spec.min_size..=spec.max_size);
                let h = rng.random_range(spec.min_size..=spec.max_size);
                let cx = rng.random_range(w / 2.0..=spec.width as f64 - w / 2.0);
                let cy = rng.random_range(h / 2.0..=spec.height as f64 - h / 2.0);
                let bbox = BBox::new(cx, cy, w, h)?;
                if instances.iter().any(|o| iou(&o.bbox, &bbox) > 0.05) {
                    continue;
                }
                let color = [
                    rng.random_range(120.0..230.0),
                    rng.random_range(120.0..230.0),
                    rng.random_range(120.0..230.0),
                ];
                instances.push(SceneInstance {
                    bbox,
                    class_id: rng.random_range(0..spec.classes),
                    color,
                    pattern: Vec::new(),
                });
                break;
            }
        }
        Ok(SyntheticScene {
            height: spec.height,
            width: spec.width,
            background: [40.0, 40.0, 40.0],
            instances,
            noise: spec.noise.clone(),
            seed,
        })
    }

    pub fn ground_truth(&self) -> Vec<(BBox, u32)> {
        self.instances.iter().map(|i| (i.bbox, i.class_id)).collect()
    }

    /// Visible support of instance `k` (later instances occlude earlier ones).
    pub fn instance_mask(&self, k: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.height * self.width];
        for y in 0..self.height {
            for x in 0..self.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mine = inside_ellipse(&self.instances[k].bbox, px, py);
                let hidden = self.instances[k + 1..].iter().any(|o| inside_ellipse(&o.bbox, px, py));
                if mine && !hidden {
                    m[y * self.width + x] = 1.0;
                }
            }
        }
        m
    }

    pub fn render(&self) -> Image {
        let mut img = Image::filled(self.height, self.width, self.background);
        for inst in &self.instances {
            let g = (inst.pattern.len() as f64).sqrt() as usize;
            let c = inst.bbox.corners();
            for y in 0..self.height {
                for x in 0..self.width {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if !inside_ellipse(&inst.bbox, px, py) {
                        continue;
                    }
                    let mut shade = 0.0;
                    if g > 0 {
                        let gx = (((px - c.x0) / inst.bbox.w * g as f64) as usize).min(g - 1);
                        let gy = (((py - c.y0) / inst.bbox.h * g as f64) as usize).min(g - 1);
                        let vertical = inst.pattern[gy * g + gx];
                        let phase = if vertical { x } else { y };
                        shade = if (phase / 2) % 2 == 0 { 0.5 } else { -0.5 } * self.noise.stripe_amplitude;
                    }
                    img.pixel_mut(y, x).iter_mut().zip(inst.color).for_each(|(p, c)| *p = c + shade);
                }
            }
        }
        if self.noise.pixel_sigma > 0.0 {
            let mut rng = stream(self.seed, "scene/pixels");
            let normal = Normal::new(0.0, self.noise.pixel_sigma).expect("positive sigma");
            for y in 0..self.height {
                for x in 0..self.width {
                    for p in img.pixel_mut(y, x) {
                        *p = (*p + normal.sample(&mut rng)).clamp(0.0, 255.0);
                    }
                }
            }
        }
        img
    }
}

/// Detector stand-in for a [`SyntheticScene`].
///
/// Every round it emits, per instance, its current anchor box plus `count`
/// jittered copies (and optionally part boxes). Scores are the IoU with the
/// true box decayed by the feature noise; features are a class embedding
/// plus an encoding of the box offset plus Gaussian noise. After a round,
/// anchors move to the bounding box of the CRF-refined segment.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    scene: SyntheticScene,
    jitter: f64,
    count: usize,
    masks: Vec<Vec<f64>>,
    embeddings: Vec<Vec<f64>>,
    anchors: Vec<BBox>,
}

pub fn synthetic_provider(scene: &SyntheticScene, jitter: f64, count: usize) -> Result<SyntheticProvider> {
    if count == 0 {
        return Err(Error::arg("synthetic provider needs at least one copy per instance"));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::arg(format!("jitter {jitter} must be non-negative")));
    }
    let dim = scene.noise.feature_dim;
    let masks = (0..scene.instances.len()).map(|k| scene.instance_mask(k)).collect();
    let embeddings = scene
        .instances
        .iter()
        .map(|inst| {
            // class semantics are shared by every scene
            let mut rng = stream(0, &format!("class-embedding/{}", inst.class_id));
            (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    let mut rng = stream(scene.seed, "provider/anchor-bias");
    let anchors = scene
        .instances
        .iter()
        .map(|inst| {
            let b = inst.bbox;
            if scene.noise.anchor_bias <= 0.0 {
                return b;
            }
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            BBox {
                cx: b.cx + angle.cos() * scene.noise.anchor_bias * b.w,
                cy: b.cy + angle.sin() * scene.noise.anchor_bias * b.h,
                ..b
            }
        })
        .collect();
    Ok(SyntheticProvider {
        scene: scene.clone(),
        jitter,
        count,
        masks,
        embeddings,
        anchors,
    })
}

impl SyntheticProvider {
    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    fn jittered<R: Rng>(rng: &mut R, b: &BBox, jitter: f64) -> BBox {
        if jitter == 0.0 {
            return *b;
        }
        let z = |rng: &mut R| rng.sample::<f64, _>(StandardNormal) * jitter;
        BBox {
            cx: b.cx + z(rng) * b.w,
            cy: b.cy + z(rng) * b.h,
            w: b.w * z(rng).exp(),
            h: b.h * z(rng).exp(),
        }
    }

    fn make<R: Rng>(&self, rng: &mut R, k: usize, bbox: BBox, reference: &BBox) -> Result<Proposal> {
        let inst = &self.scene.instances[k];
        let noise = self.scene.noise.feature_noise;
        let overlap = iou(&bbox, reference);
        let score = (overlap * (-noise * (1.0 - overlap)).exp()).clamp(0.0, 1.0);
        let gt = &inst.bbox;
        let offset = [
            (bbox.cx - gt.cx) / gt.w,
            (bbox.cy - gt.cy) / gt.h,
            (bbox.w / gt.w).ln(),
            (bbox.h / gt.h).ln(),
        ];
        let values = self.embeddings[k]
            .iter()
            .enumerate()
            .map(|(d, e)| e + 0.5 * offset[d % 4] + noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let r = bbox.raster();
        let (w, h) = (self.scene.width as i64, self.scene.height as i64);
        let mut mask = Vec::with_capacity(r.width() * r.height());
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let inside = (0..w).contains(&x) && (0..h).contains(&y);
                mask.push(if inside { self.masks[k][(y * w + x) as usize] } else { 0.0 });
            }
        }
        Proposal::new(bbox, score, inst.class_id, FeatureVec::new(values)?)?
            .with_mask(SoftMask::new(r.height(), r.width(), mask)?)
    }
}

impl DetectionProvider for SyntheticProvider {
    fn propose(&mut self, round: usize, _image: &crate::image::Image) -> Result<Vec<Proposal>> {
        let mut rng = stream(self.scene.seed, &format!("provider/round{round}"));
        let noise = self.scene.noise.clone();
        let mut out = Vec::new();
        for k in 0..self.scene.instances.len() {
            let gt = self.scene.instances[k].bbox;
            let anchor = self.anchors[k];
            out.push(self.make(&mut rng, k, anchor, &gt)?);
            for _ in 0..self.count {
                let b = Self::jittered(&mut rng, &anchor, self.jitter);
                out.push(self.make(&mut rng, k, b, &gt)?);
            }
            let g = noise.part_grid;
            for i in 0..if g > 0 { noise.part_count } else { 0 } {
                let cell = i % (g * g);
                let b = Self::jittered(&mut rng, &anchor.grid_cell(g, cell), noise.part_jitter);
                out.push(self.make(&mut rng, k, b, &gt.grid_cell(g, cell))?);
            }
        }
        Ok(out)
    }

    /// Each survivor is attributed to the same-class anchor it overlaps most;
    /// an anchor moves to the box around the refined segments of all its
    /// survivors.
    fn observe(&mut self, prior: &RefinementPrior<'_>) {
        let mut owned: Vec<Vec<u32>> = vec![Vec::new(); self.anchors.len()];
        for j in 0..prior.nms.n() {
            let s = prior.nms.survivor(j);
            let mut best: Option<(usize, f64)> = None;
            for (k, anchor) in self.anchors.iter().enumerate() {
                let o = iou(&s.bbox, anchor);
                if self.scene.instances[k].class_id == s.class_id && o > 0.0 && best.is_none_or(|(_, b)| o > b) {
                    best = Some((k, o));
                }
            }
            if let Some((k, _)) = best {
                owned[k].push(j as u32 + 1);
            }
        }
        for (anchor, labels) in self.anchors.iter_mut().zip(&owned) {
            if let Some(refined) = prior.labels.main_segment_box(labels) {
                *anchor = refined;
            }
        }
    }
}
