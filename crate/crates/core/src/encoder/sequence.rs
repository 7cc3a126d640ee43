use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FeatureExtractor;
use crate::error::{Error, Result};
use crate::feature::FeatureVec;
use crate::geometry::PixelRect;
use crate::image::Image;
use crate::parts::PartsModel;
use crate::tensor::Tensor3;

/// Ordered patch features: the whole image, then the parts (center part
/// first, root last), then a random crop. Any length of at least one step
/// is accepted so the network can be exercised on short sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSequence {
    features: Vec<FeatureVec>,
}

impl PatchSequence {
    pub fn new(features: Vec<FeatureVec>) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(Error::arg("empty patch sequence"));
        };
        let dim = first.dim();
        if let Some(i) = features.iter().position(|f| f.dim() != dim) {
            return Err(Error::dim(format!("step {i} has dim {} vs {dim}", features[i].dim())));
        }
        Ok(PatchSequence { features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].dim()
    }

    pub fn features(&self) -> &[FeatureVec] {
        &self.features
    }

    pub fn step(&self, t: usize) -> &[f64] {
        self.features[t].values()
    }
}

/// Random crop covering a uniform `[0.7, 1.0]` fraction of each side.
pub fn random_crop<R: Rng>(height: usize, width: usize, rng: &mut R) -> PixelRect {
    let side = |n: usize, rng: &mut R| {
        let len = ((n as f64 * rng.random_range(0.7..=1.0)).round() as usize).clamp(1, n);
        let start = rng.random_range(0..=n - len);
        (start as i64, (start + len) as i64)
    };
    let (x0, x1) = side(width, rng);
    let (y0, y1) = side(height, rng);
    PixelRect { x0, y0, x1, y1 }
}

/// Builds `[whole image, part_0 .. part_n, random crop]`, `n + 3` vectors.
pub fn build_sequence<E, R>(image: &Image, model: &PartsModel, extractor: &E, rng: &mut R) -> Result<PatchSequence>
where
    E: FeatureExtractor + ?Sized,
    R: Rng,
{
    let mut features = Vec::with_capacity(model.n() + 3);
    features.push(extractor.extract(image));
    for (i, part) in model.parts().iter().enumerate() {
        let rect = part.geometry.raster().clip(image.width(), image.height());
        if rect.is_empty() {
            return Err(Error::CorruptModel(format!("part {i} box {:?} lies outside the image", part.geometry)));
        }
        features.push(extractor.extract(&image.crop(rect)?));
    }
    let crop = random_crop(image.height(), image.width(), rng);
    features.push(extractor.extract(&image.crop(crop)?));
    PatchSequence::new(features)
}

/// Per-dimension affine normalization fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    /// Mean and standard deviation over every step of every sequence;
    /// constant dimensions get unit scale.
    pub fn fit(data: &SequenceDataset) -> Result<Self> {
        let (_, dim) = data.shape();
        if data.is_empty() {
            return Err(Error::arg("cannot fit a scaler on an empty dataset"));
        }
        let rows = || data.items.iter().flat_map(|s| s.features().iter().map(|f| f.values()));
        let count = rows().count() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows() {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; dim];
        for r in rows() {
            var.iter_mut().zip(r).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m));
        }
        let std = var.into_iter().map(|s| (s / count).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Ok(FeatureScaler { mean, std })
    }

    pub fn apply(&self, data: &SequenceDataset) -> Result<SequenceDataset> {
        let (_, dim) = data.shape();
        if !data.is_empty() && dim != self.mean.len() {
            return Err(Error::dim(format!("scaler dim {} vs data dim {dim}", self.mean.len())));
        }
        let items = data
            .items
            .iter()
            .map(|s| {
                let steps = s
                    .features()
                    .iter()
                    .map(|f| FeatureVec::new(f.values().iter().zip(&self.mean).zip(&self.std).map(|((v, m), d)| (v - m) / d).collect()))
                    .collect::<Result<_>>()?;
                PatchSequence::new(steps)
            })
            .collect::<Result<_>>()?;
        SequenceDataset::new(data.classes, items, data.labels.clone())
    }
}

/// Labelled sequences of a common shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub classes: usize,
    pub items: Vec<PatchSequence>,
    pub labels: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    classes: usize,
    items: usize,
    steps: usize,
    dim: usize,
    labels: Vec<u32>,
}

const DATASET_FORMAT: &str = "partsmine-sequences/1";

impl SequenceDataset {
    pub fn new(classes: usize, items: Vec<PatchSequence>, labels: Vec<u32>) -> Result<Self> {
        if items.len() != labels.len() {
            return Err(Error::dim(format!("{} sequences but {} labels", items.len(), labels.len())));
        }
        if classes < 2 {
            return Err(Error::arg("a dataset needs at least two classes"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y as usize >= classes) {
            return Err(Error::arg(format!("label {y} outside {classes} classes")));
        }
        if let Some(first) = items.first() {
            let shape = (first.len(), first.dim());
            if let Some(i) = items.iter().position(|s| (s.len(), s.dim()) != shape) {
                return Err(Error::dim(format!("sequence {i} shape differs from {shape:?}")));
            }
        }
        Ok(SequenceDataset { classes, items, labels })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `(steps, dim)` of every sequence.
    pub fn shape(&self) -> (usize, usize) {
        self.items.first().map_or((0, 0), |s| (s.len(), s.dim()))
    }

    /// Writes `manifest.json` and `features.pmt` (items x steps x dim).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let (steps, dim) = self.shape();
        let data = self.items.iter().flat_map(|s| s.features().iter().flat_map(|f| f.values().iter().copied())).collect();
        Tensor3::new(self.len(), steps, dim, data)?.save(dir.join("features.pmt"))?;
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            classes: self.classes,
            items: self.len(),
            steps,
            dim,
            labels: self.labels.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if m.format != DATASET_FORMAT {
            return Err(Error::Format(format!("unknown dataset format {:?}", m.format)));
        }
        if m.items == 0 {
            return SequenceDataset::new(m.classes, Vec::new(), m.labels);
        }
        let t = Tensor3::load(dir.join("features.pmt"))?;
        if (t.channels(), t.height(), t.width()) != (m.items, m.steps, m.dim) {
            return Err(Error::Format("feature tensor shape disagrees with manifest".into()));
        }
        let items = t
            .data()
            .chunks(m.steps * m.dim)
            .map(|s| PatchSequence::new(s.chunks(m.dim).map(|f| FeatureVec::new(f.to_vec())).collect::<Result<_>>()?))
            .collect::<Result<_>>()?;
        SequenceDataset::new(m.classes, items, m.labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::GridExtractor;
    use crate::geometry::BBox;
    use crate::parts::{Part, PartSource};
    use crate::rng::stream;

    fn model(boxes: &[BBox]) -> PartsModel {
        let parts = boxes
            .iter()
            .enumerate()
            .map(|(i, &b)| Part {
                feature: FeatureVec::zeros(2),
                geometry: b,
                det_score: 0.5,
                source: if i + 1 == boxes.len() { PartSource::Root } else { PartSource::GridCell { cell: i } },
            })
            .collect();
        PartsModel::new(parts).unwrap()
    }

    fn image() -> Image {
        let mut img = Image::filled(20, 30, [0.0; 3]);
        for y in 0..20 {
            for x in 0..30 {
                img.pixel_mut(y, x)[0] = ((x * 7 + y * 3) % 255) as f64;
            }
        }
        img
    }

    #[test]
    fn sequence_layout() {
        let img = image();
        let whole = BBox::new(15.0, 10.0, 30.0, 20.0).unwrap();
        let mut boxes: Vec<BBox> = (0..9).map(|c| whole.grid_cell(3, c)).collect();
        boxes.push(whole);
        let m = model(&boxes);
        let ex = GridExtractor::default();
        let seq = build_sequence(&img, &m, &ex, &mut stream(1, "crop")).unwrap();
        assert_eq!(seq.len(), 12);
        // the root box equals the image, so its patch equals the whole image
        assert_eq!(seq.features()[10], seq.features()[0]);
        let again = build_sequence(&img, &m, &ex, &mut stream(1, "crop")).unwrap();
        assert_eq!(seq, again);
    }

    #[test]
    fn part_outside_image_is_corrupt() {
        let img = image();
        let m = model(&[BBox::new(100.0, 100.0, 4.0, 4.0).unwrap(), BBox::new(5.0, 5.0, 4.0, 4.0).unwrap()]);
        let err = build_sequence(&img, &m, &GridExtractor::default(), &mut stream(1, "crop")).unwrap_err();
        assert!(matches!(err, Error::CorruptModel(_)));
    }

    #[test]
    fn random_crop_bounds() {
        let mut rng = stream(5, "crop");
        for _ in 0..500 {
            let r = random_crop(20, 30, &mut rng);
            assert!(r.x0 >= 0 && r.x1 <= 30 && r.y0 >= 0 && r.y1 <= 20);
            assert!(r.width() >= 21 && r.height() >= 14, "{r:?}");
        }
    }

    #[test]
    fn dataset_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let seqs: Vec<PatchSequence> = (0..3)
            .map(|i| PatchSequence::new((0..4).map(|t| FeatureVec::new(vec![i as f64 * 0.25, t as f64]).unwrap()).collect()).unwrap())
            .collect();
        let ds = SequenceDataset::new(2, seqs, vec![0, 1, 1]).unwrap();
        ds.save(dir.path().join("a")).unwrap();
        let back = SequenceDataset::load(dir.path().join("a")).unwrap();
        assert_eq!(back, ds);
        back.save(dir.path().join("b")).unwrap();
        for f in ["manifest.json", "features.pmt"] {
            assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
        }
    }

    #[test]
    fn scaler_standardizes() {
        let seqs: Vec<PatchSequence> = (0..4)
            .map(|i| PatchSequence::new(vec![FeatureVec::new(vec![i as f64, 3.0]).unwrap(); 2]).unwrap())
            .collect();
        let ds = SequenceDataset::new(2, seqs, vec![0, 1, 0, 1]).unwrap();
        let sc = FeatureScaler::fit(&ds).unwrap();
        assert_eq!(sc.mean, vec![1.5, 3.0]);
        assert_eq!(sc.std[1], 1.0);
        let z = sc.apply(&ds).unwrap();
        let col: Vec<f64> = z.items.iter().map(|s| s.step(0)[0]).collect();
        assert!((col.iter().sum::<f64>()).abs() < 1e-12);
        assert!((col.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        assert!(z.items.iter().all(|s| s.step(1)[1] == 0.0));
    }

    #[test]
    fn dataset_validation() {
        let s = PatchSequence::new(vec![FeatureVec::zeros(2)]).unwrap();
        assert!(SequenceDataset::new(2, vec![s.clone()], vec![2]).is_err());
        assert!(SequenceDataset::new(2, vec![s.clone()], vec![]).is_err());
        let t = PatchSequence::new(vec![FeatureVec::zeros(2); 2]).unwrap();
        assert!(SequenceDataset::new(2, vec![s, t], vec![0, 1]).is_err());
        assert!(PatchSequence::new(vec![]).is_err());
    }
}
