//! Parts-informative synthetic classification benchmark.
//!
//! Every image holds one textured object whose box is split into a
//! `grid x grid` array of cells; each cell carries vertical or horizontal
//! stripes (one bit). Cells are paired in row-major order and bit `m` of the
//! class label is the XOR of pair `m`, so a single cell says nothing about
//! the label and no linear function of the cell bits recovers it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{filter_by_score, nms_with_records, synthetic_provider, DetectionProvider, SceneInstance, SceneNoise, SyntheticScene};
use crate::encoder::{
    build_sequence, train_baseline, BaselineKind, FeatureExtractor, FeatureScaler, GridExtractor, OptimConfig, PatchSequence, SequenceDataset,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::par;
use crate::parts::{mine_object, SearchConfig};
use crate::rng::{stream, stream_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Texture grid side; also the side of the parts grid.
    pub grid: usize,
    pub pixel_sigma: f64,
    pub stripe_amplitude: f64,
    /// Box jitter of the whole-object proposals.
    pub jitter: f64,
    /// Whole-object proposals per image besides the anchor.
    pub count: usize,
    /// Part proposals per image, spread over the cells round-robin.
    pub part_count: usize,
    pub part_jitter: f64,
    pub feature_noise: f64,
    pub feature_dim: usize,
    /// NMS threshold used to fold the cell proposals under the object.
    pub tau: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            classes: 4,
            train: 800,
            test: 200,
            height: 48,
            width: 48,
            min_size: 28.0,
            max_size: 36.0,
            grid: 2,
            pixel_sigma: 25.0,
            stripe_amplitude: 40.0,
            jitter: 0.1,
            count: 8,
            part_count: 4,
            part_jitter: 0.05,
            feature_noise: 0.1,
            feature_dim: 16,
            tau: 0.2,
        }
    }
}

impl BenchmarkSpec {
    /// Number of label bits.
    pub fn label_bits(&self) -> usize {
        self.classes.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || !self.classes.is_power_of_two() {
            return Err(Error::arg(format!("{} classes; need a power of two >= 2", self.classes)));
        }
        if self.grid == 0 || 2 * self.label_bits() > self.grid * self.grid {
            return Err(Error::arg(format!(
                "{} label bits need {} texture cells; a {}x{} grid has {}",
                self.label_bits(),
                2 * self.label_bits(),
                self.grid,
                self.grid,
                self.grid * self.grid
            )));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::arg("benchmark splits must be non-empty"));
        }
        if !(self.min_size > 0.0 && self.max_size >= self.min_size && self.max_size <= self.width.min(self.height) as f64) {
            return Err(Error::arg("benchmark object sizes do not fit the image"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::arg(format!("benchmark tau {} not in (0,1)", self.tau)));
        }
        Ok(())
    }
}

/// Class label encoded by the cell bits.
pub fn label_from_bits(bits: &[bool], label_bits: usize) -> u32 {
    (0..label_bits).map(|m| u32::from(bits[2 * m] ^ bits[2 * m + 1]) << m).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchItem {
    pub label: u32,
    pub scene: SyntheticScene,
}

impl BenchItem {
    pub fn bits(&self) -> &[bool] {
        &self.scene.instances[0].pattern
    }
}

fn make_item(spec: &BenchmarkSpec, seed: u64, split: &str, i: usize) -> Result<BenchItem> {
    let name = format!("benchmark/{split}/{i}");
    let mut rng = stream(seed, &name);
    let label = (i % spec.classes) as u32;
    let cells = spec.grid * spec.grid;
    let mut bits: Vec<bool> = (0..cells).map(|_| rng.random_bool(0.5)).collect();
    for m in 0..spec.label_bits() {
        bits[2 * m + 1] = bits[2 * m] ^ (label >> m & 1 == 1);
    }
    let w = rng.random_range(spec.min_size..=spec.max_size);
    let h = rng.random_range(spec.min_size..=spec.max_size);
    let cx = rng.random_range(w / 2.0..=spec.width as f64 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=spec.height as f64 - h / 2.0);
    let gray = rng.random_range(110.0..150.0);
    let scene = SyntheticScene {
        height: spec.height,
        width: spec.width,
        background: [40.0; 3],
        instances: vec![SceneInstance {
            bbox: BBox::new(cx, cy, w, h)?,
            class_id: 0,
            color: [gray; 3],
            pattern: bits,
        }],
        noise: SceneNoise {
            pixel_sigma: spec.pixel_sigma,
            jitter: spec.jitter,
            count: spec.count,
            feature_noise: spec.feature_noise,
            feature_dim: spec.feature_dim,
            anchor_bias: 0.0,
            part_grid: spec.grid,
            part_count: spec.part_count,
            part_jitter: spec.part_jitter,
            stripe_amplitude: spec.stripe_amplitude,
        },
        seed: stream_seed(seed, &format!("{name}/scene")),
    };
    debug_assert_eq!(label_from_bits(scene.instances[0].pattern.as_slice(), spec.label_bits()), label);
    Ok(BenchItem { label, scene })
}

/// Per-item detection and mining summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemTrace {
    pub proposals: usize,
    pub survivors: usize,
    pub candidates: usize,
    pub root_iou: f64,
    /// Mean IoU between each non-root part and its own texture cell.
    pub part_cell_iou: f64,
}

/// Detects the object, mines its parts and builds the patch sequence.
pub fn item_sequence<E: FeatureExtractor + ?Sized>(
    item: &BenchItem,
    spec: &BenchmarkSpec,
    sigma_0: f64,
    extractor: &E,
) -> Result<(PatchSequence, ItemTrace)> {
    let image = item.scene.render();
    let mut provider = synthetic_provider(&item.scene, spec.jitter, spec.count)?;
    let proposals = provider.propose(1, &image)?;
    let n_props = proposals.len();
    let kept = filter_by_score(&proposals, sigma_0);
    if kept.is_empty() {
        return Err(Error::NoProposals { round: 1 });
    }
    let nms = nms_with_records(kept, spec.tau)?;
    let cfg = SearchConfig::with_parts(spec.grid * spec.grid)?;
    let mined = mine_object(&nms, 0, &cfg, false)?;
    let gt = item.scene.instances[0].bbox;
    let order = cfg.cell_order();
    let part_cell_iou = order
        .iter()
        .enumerate()
        .map(|(slot, &cell)| iou(&mined.model.parts()[slot].geometry, &gt.grid_cell(spec.grid, cell)))
        .sum::<f64>()
        / order.len() as f64;
    let seq = build_sequence(&image, &mined.model, extractor, &mut stream(item.scene.seed, "benchmark/crop"))?;
    let trace = ItemTrace {
        proposals: n_props,
        survivors: nms.n(),
        candidates: mined.candidates,
        root_iou: iou(&nms.survivor(0).bbox, &gt),
        part_cell_iou,
    };
    Ok((seq, trace))
}

/// Stripe orientation read directly off a ground-truth cell crop.
fn decode_cell(item: &BenchItem, cell: usize, grid: usize) -> Result<bool> {
    let image = item.scene.render();
    let b = item.scene.instances[0].bbox.grid_cell(grid, cell);
    let f = GridExtractor { grid: 1 }.extract(&image.crop(b.raster())?);
    // vertical stripes vary along x
    Ok(f.values()[1] > f.values()[2])
}

/// Reference accuracies measured when the dataset is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkMetadata {
    pub classes: usize,
    pub train_items: usize,
    pub test_items: usize,
    pub steps: usize,
    pub feature_dim: usize,
    /// Test accuracy when every cell's stripe bit is decoded from its
    /// ground-truth crop and combined by the labelling rule.
    pub full_parts_oracle_accuracy: f64,
    /// Best test accuracy of a lookup classifier that sees one decoded cell bit.
    pub single_part_ceiling: f64,
    /// Test accuracy of a linear softmax trained on whole-image features only.
    pub whole_image_linear_accuracy: f64,
    pub mean_root_iou: f64,
    pub mean_part_cell_iou: f64,
    pub mean_candidates: f64,
    /// Standardization fitted on the raw training features and applied to both splits.
    pub scaler: FeatureScaler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub train: SequenceDataset,
    pub test: SequenceDataset,
    pub metadata: BenchmarkMetadata,
}

fn whole_image_only(data: &SequenceDataset) -> Result<SequenceDataset> {
    let items = data
        .items
        .iter()
        .map(|s| PatchSequence::new(vec![s.features()[0].clone()]))
        .collect::<Result<_>>()?;
    SequenceDataset::new(data.classes, items, data.labels.clone())
}

/// Optimizer for the reference linear classifier stored in the metadata.
pub fn oracle_optim() -> OptimConfig {
    OptimConfig {
        lr: 0.1,
        epochs: 60,
        batch_size: 8,
        step_epochs: 40,
        ..OptimConfig::default()
    }
}

/// Generates the train and test splits and measures the oracle classifiers.
pub fn gen_benchmark(spec: &BenchmarkSpec, sigma_0: f64, seed: u64) -> Result<Benchmark> {
    spec.validate()?;
    let extractor = GridExtractor { grid: spec.grid };
    let split = |name: &str, len: usize| -> Result<(Vec<BenchItem>, SequenceDataset, Vec<ItemTrace>)> {
        let items: Vec<BenchItem> = (0..len).map(|i| make_item(spec, seed, name, i)).collect::<Result<_>>()?;
        let built = par::map(&items, |it| item_sequence(it, spec, sigma_0, &extractor));
        let mut seqs = Vec::with_capacity(len);
        let mut traces = Vec::with_capacity(len);
        for r in built {
            let (s, t) = r?;
            seqs.push(s);
            traces.push(t);
        }
        let labels = items.iter().map(|it| it.label).collect();
        Ok((items, SequenceDataset::new(spec.classes, seqs, labels)?, traces))
    };
    let (train_items, raw_train, train_traces) = split("train", spec.train)?;
    let (test_items, raw_test, test_traces) = split("test", spec.test)?;
    let scaler = FeatureScaler::fit(&raw_train)?;
    let train = scaler.apply(&raw_train)?;
    let test = scaler.apply(&raw_test)?;

    let cells = spec.grid * spec.grid;
    let decode = |items: &[BenchItem]| -> Result<Vec<Vec<bool>>> {
        par::map(items, |it| (0..cells).map(|c| decode_cell(it, c, spec.grid)).collect::<Result<Vec<bool>>>())
            .into_iter()
            .collect()
    };
    let train_bits = decode(&train_items)?;
    let test_bits = decode(&test_items)?;
    let full = test_bits
        .iter()
        .zip(&test_items)
        .filter(|(b, it)| label_from_bits(b, spec.label_bits()) == it.label)
        .count() as f64
        / spec.test as f64;
    let mut ceiling: f64 = 0.0;
    for c in 0..cells {
        let mut counts = vec![vec![0usize; spec.classes]; 2];
        for (b, it) in train_bits.iter().zip(&train_items) {
            counts[usize::from(b[c])][it.label as usize] += 1;
        }
        let rule: Vec<usize> = counts.iter().map(|row| crate::encoder::argmax(&row.iter().map(|&v| v as f64).collect::<Vec<_>>())).collect();
        let acc = test_bits
            .iter()
            .zip(&test_items)
            .filter(|(b, it)| rule[usize::from(b[c])] == it.label as usize)
            .count() as f64
            / spec.test as f64;
        ceiling = ceiling.max(acc);
    }
    let (whole, _) = train_baseline(BaselineKind::Concat, &whole_image_only(&train)?, None, &oracle_optim(), seed)?;
    let whole_test = whole_image_only(&test)?;
    let whole_acc = crate::encoder::evaluate(&whole, &whole_test)?.1;

    let traces: Vec<&ItemTrace> = train_traces.iter().chain(&test_traces).collect();
    let mean = |f: fn(&ItemTrace) -> f64| traces.iter().map(|t| f(t)).sum::<f64>() / traces.len() as f64;
    let (steps, dim) = train.shape();
    let metadata = BenchmarkMetadata {
        classes: spec.classes,
        train_items: spec.train,
        test_items: spec.test,
        steps,
        feature_dim: dim,
        full_parts_oracle_accuracy: full,
        single_part_ceiling: ceiling,
        whole_image_linear_accuracy: whole_acc,
        mean_root_iou: mean(|t| t.root_iou),
        mean_part_cell_iou: mean(|t| t.part_cell_iou),
        mean_candidates: mean(|t| t.candidates as f64),
        scaler,
    };
    Ok(Benchmark {
        spec: spec.clone(),
        train,
        test,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labelling_rule() {
        assert_eq!(label_from_bits(&[true, true, false, true], 2), 2);
        assert_eq!(label_from_bits(&[true, false, false, false], 2), 1);
        assert_eq!(label_from_bits(&[false, true, true, false], 1), 1);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let spec = BenchmarkSpec { classes: 8, ..BenchmarkSpec::default() };
        assert!(spec.validate().is_err());
        assert!(BenchmarkSpec { classes: 3, ..BenchmarkSpec::default() }.validate().is_err());
        assert!(BenchmarkSpec { classes: 8, grid: 3, ..BenchmarkSpec::default() }.validate().is_ok());
    }

    #[test]
    fn items_carry_their_label() {
        let spec = BenchmarkSpec::default();
        for i in 0..40 {
            let it = make_item(&spec, 3, "train", i).unwrap();
            assert_eq!(label_from_bits(it.bits(), 2), it.label);
            assert_eq!(it, make_item(&spec, 3, "train", i).unwrap());
        }
    }

    #[test]
    fn noiseless_two_class_oracles() {
        let spec = BenchmarkSpec {
            classes: 2,
            train: 60,
            test: 40,
            pixel_sigma: 0.0,
            ..BenchmarkSpec::default()
        };
        let b = gen_benchmark(&spec, 0.05, 1).unwrap();
        assert_eq!(b.metadata.full_parts_oracle_accuracy, 1.0);
        assert!(b.metadata.single_part_ceiling <= 0.75, "{:?}", b.metadata);
        assert_eq!(b.train.shape(), (7, 15));
    }
}
