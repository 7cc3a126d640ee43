use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureVec;
use crate::geometry::BBox;

/// Per-pixel foreground probabilities covering a proposal's rasterized box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let m = SoftMask {
            height,
            width,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        SoftMask {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.height * self.width {
            return Err(Error::dim(format!(
                "mask {}x{} with {} values",
                self.height,
                self.width,
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg(format!("mask value {} at {i} outside [0,1]", self.values[i])));
        }
        Ok(())
    }
}

/// A scored, class-labeled detection with its appearance feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: u32,
    pub feature: FeatureVec,
    #[serde(default)]
    pub mask: Option<SoftMask>,
}

impl Proposal {
    pub fn new(bbox: BBox, score: f64, class_id: u32, feature: FeatureVec) -> Result<Self> {
        let p = Proposal {
            bbox,
            score,
            class_id,
            feature,
            mask: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_mask(mut self, mask: SoftMask) -> Result<Self> {
        self.mask = Some(mask);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::arg(format!("proposal score {} outside [0,1]", self.score)));
        }
        if let Some(m) = &self.mask {
            m.validate()?;
            let r = self.bbox.raster();
            if m.height != r.height() || m.width != r.width() {
                return Err(Error::dim(format!(
                    "mask {}x{} does not match box extent {}x{}",
                    m.height,
                    m.width,
                    r.height(),
                    r.width()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_must_match_box_extent() {
        let b = BBox::new(5.5, 5.0, 3.0, 2.0).unwrap();
        let p = Proposal::new(b, 0.5, 0, FeatureVec::zeros(2)).unwrap();
        assert!(p.clone().with_mask(SoftMask::filled(2, 3, 1.0)).is_ok());
        assert!(p.clone().with_mask(SoftMask::filled(3, 3, 1.0)).is_err());
        assert!(p.with_mask(SoftMask::filled(2, 3, 1.5)).is_err());
        assert!(Proposal::new(b, 1.2, 0, FeatureVec::zeros(2)).is_err());
    }

    #[test]
    fn json_round_trip() {
        let b = BBox::new(1.5, 2.5, 1.0, 1.0).unwrap();
        let p = Proposal::new(b, 0.25, 3, FeatureVec::new(vec![0.5]).unwrap())
            .unwrap()
            .with_mask(SoftMask::filled(1, 1, 0.75))
            .unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains(r#""bbox":{"cx":1.5,"cy":2.5,"w":1.0,"h":1.0}"#));
        let back: Proposal = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }
}
