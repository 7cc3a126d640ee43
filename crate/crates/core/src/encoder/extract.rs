use crate::feature::FeatureVec;
use crate::image::Image;

/// Maps an image patch to a fixed-dimension feature vector.
pub trait FeatureExtractor: Sync {
    fn dim(&self) -> usize;
    fn extract(&self, patch: &Image) -> FeatureVec;
}

/// Hand-built texture statistics: for each cell of a `grid x grid` split of
/// the patch, the mean luminance and the mean absolute horizontal and
/// vertical luminance differences, followed by the same three statistics
/// over the whole patch. All values are scaled to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridExtractor {
    pub grid: usize,
}

impl Default for GridExtractor {
    fn default() -> Self {
        GridExtractor { grid: 2 }
    }
}

#[derive(Default, Clone, Copy)]
struct Stats {
    gray: f64,
    dx: f64,
    dy: f64,
    n: usize,
    ndx: usize,
    ndy: usize,
}

impl Stats {
    fn push(&mut self) -> [f64; 3] {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 / 255.0 };
        [mean(self.gray, self.n), mean(self.dx, self.ndx), mean(self.dy, self.ndy)]
    }
}

impl FeatureExtractor for GridExtractor {
    fn dim(&self) -> usize {
        3 * self.grid * self.grid + 3
    }

    fn extract(&self, patch: &Image) -> FeatureVec {
        let (h, w, g) = (patch.height(), patch.width(), self.grid);
        let lum: Vec<f64> = (0..h * w).map(|i| patch.luminance(i / w, i % w)).collect();
        let cell_of = |y: usize, x: usize| (y * g / h) * g + x * g / w;
        let mut cells = vec![Stats::default(); g * g];
        let mut whole = Stats::default();
        for y in 0..h {
            for x in 0..w {
                let v = lum[y * w + x];
                let c = &mut cells[cell_of(y, x)];
                c.gray += v;
                c.n += 1;
                whole.gray += v;
                whole.n += 1;
                // differences are attributed to the cell of their left/top pixel
                if x + 1 < w && cell_of(y, x + 1) == cell_of(y, x) {
                    let d = (lum[y * w + x + 1] - v).abs();
                    c.dx += d;
                    c.ndx += 1;
                }
                if y + 1 < h && cell_of(y + 1, x) == cell_of(y, x) {
                    let d = (lum[(y + 1) * w + x] - v).abs();
                    c.dy += d;
                    c.ndy += 1;
                }
                if x + 1 < w {
                    whole.dx += (lum[y * w + x + 1] - v).abs();
                    whole.ndx += 1;
                }
                if y + 1 < h {
                    whole.dy += (lum[(y + 1) * w + x] - v).abs();
                    whole.ndy += 1;
                }
            }
        }
        let values: Vec<f64> = cells.iter_mut().chain(std::iter::once(&mut whole)).flat_map(|s| s.push()).collect();
        FeatureVec::new(values).expect("finite statistics")
    }
}
