//! Boxes in center + size form and the overlap measures built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box stored as center and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner view of a box: `(x0, y0)` top-left, `(x1, y1)` bottom-right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Half-open integer pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        (self.x1 - self.x0).max(0) as usize
    }

    pub fn height(&self) -> usize {
        (self.y1 - self.y0).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    /// Intersection with the image plane `[0, width) x [0, height)`.
    pub fn clip(&self, width: usize, height: usize) -> PixelRect {
        PixelRect {
            x0: self.x0.clamp(0, width as i64),
            y0: self.y0.clamp(0, height as i64),
            x1: self.x1.clamp(0, width as i64),
            y1: self.y1.clamp(0, height as i64),
        }
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite())
        {
            return Err(Error::arg(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::arg(format!("box must have positive size, got {self:?}")));
        }
        Ok(())
    }

    pub fn from_corners(c: Corners) -> Result<Self> {
        BBox::new((c.x0 + c.x1) / 2.0, (c.y0 + c.y1) / 2.0, c.x1 - c.x0, c.y1 - c.y0)
    }

    pub fn corners(&self) -> Corners {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        Corners {
            x0: self.cx - hw,
            y0: self.cy - hh,
            x1: self.cx + hw,
            y1: self.cy + hh,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let (a, b) = (self.corners(), other.corners());
        let iw = a.x1.min(b.x1) - a.x0.max(b.x0);
        let ih = a.y1.min(b.y1) - a.y0.max(b.y0);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Rasterized footprint: floor for the top-left corner, ceil for the
    /// bottom-right, so no covered pixel is dropped.
    pub fn raster(&self) -> PixelRect {
        let c = self.corners();
        PixelRect {
            x0: c.x0.floor() as i64,
            y0: c.y0.floor() as i64,
            x1: c.x1.ceil() as i64,
            y1: c.y1.ceil() as i64,
        }
    }

    /// Cell `cell` (row-major) of a `g x g` grid laid over this box.
    pub fn grid_cell(&self, g: usize, cell: usize) -> BBox {
        let c = self.corners();
        let (cw, ch) = (self.w / g as f64, self.h / g as f64);
        let (gx, gy) = ((cell % g) as f64, (cell / g) as f64);
        BBox {
            cx: c.x0 + (gx + 0.5) * cw,
            cy: c.y0 + (gy + 0.5) * ch,
            w: cw,
            h: ch,
        }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }
}

/// Intersection over union; zero when the boxes do not overlap.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}
