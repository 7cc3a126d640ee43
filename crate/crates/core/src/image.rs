//! In-memory images plus binary/ASCII PGM and PPM codecs.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PixelRect;

/// Interleaved image with 1 (gray) or 3 (RGB) channels, intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::arg(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 || data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "image {height}x{width}x{channels} with {} values",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image {
            height,
            width,
            channels: 3,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Color of a pixel as RGB; gray images replicate their one channel.
    pub fn rgb(&self, y: usize, x: usize) -> [f64; 3] {
        let p = self.pixel(y, x);
        if self.channels == 1 {
            [p[0]; 3]
        } else {
            [p[0], p[1], p[2]]
        }
    }

    pub fn luminance(&self, y: usize, x: usize) -> f64 {
        let [r, g, b] = self.rgb(y, x);
        (r + g + b) / 3.0
    }

    /// Crops the part of `rect` that lies inside the image.
    pub fn crop(&self, rect: PixelRect) -> Result<Image> {
        let r = rect.clip(self.width, self.height);
        if r.is_empty() {
            return Err(Error::arg(format!("crop {rect:?} lies outside the image")));
        }
        let mut data = Vec::with_capacity(r.width() * r.height() * self.channels);
        for y in r.y0 as usize..r.y1 as usize {
            let start = (y * self.width + r.x0 as usize) * self.channels;
            data.extend_from_slice(&self.data[start..start + r.width() * self.channels]);
        }
        Image::new(r.height(), r.width(), self.channels, data)
    }

    /// Writes binary PGM (`P5`) or PPM (`P6`), clamping to `[0, 255]`.
    pub fn write_pnm<W: Write>(&self, mut out: W) -> Result<()> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut buf = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pnm<R: Read>(mut input: R) -> Result<Image> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        parse_pnm(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_pnm(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        Image::read_pnm(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&[u8]> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad PNM number {:?}", String::from_utf8_lossy(t))))
    }
}

fn parse_pnm(bytes: &[u8]) -> Result<Image> {
    let mut h = Header { bytes, pos: 0 };
    let magic = h.token()?.to_vec();
    let (channels, binary) = match magic.as_slice() {
        b"P2" => (1, false),
        b"P3" => (3, false),
        b"P5" => (1, true),
        b"P6" => (3, true),
        m => return Err(Error::Format(format!("unsupported PNM magic {:?}", String::from_utf8_lossy(m)))),
    };
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    let scale = 255.0 / maxval as f64;
    let n = width * height * channels;
    let data: Vec<f64> = if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = h.pos + 1;
        let raster = bytes
            .get(start..start + n)
            .ok_or_else(|| Error::Format("truncated PNM raster".into()))?;
        raster.iter().map(|&b| b as f64 * scale).collect()
    } else {
        (0..n).map(|_| h.number().map(|v| v as f64 * scale)).collect::<Result<_>>()?
    };
    Image::new(height, width, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip() {
        let mut img = Image::filled(2, 3, [10.0, 20.0, 30.0]);
        img.pixel_mut(1, 2).copy_from_slice(&[255.0, 0.0, 7.0]);
        let mut buf = Vec::new();
        img.write_pnm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(Image::read_pnm(&buf[..]).unwrap(), img);
    }

    #[test]
    fn ascii_gray_with_comment() {
        let src = b"P2\n# tiny\n2 1\n255\n0 128\n";
        let img = Image::read_pnm(&src[..]).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.rgb(0, 1), [128.0; 3]);
    }

    #[test]
    fn crop_clips_to_bounds() {
        let img = Image::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = img.crop(PixelRect { x0: 1, y0: -3, x1: 9, y1: 1 }).unwrap();
        assert_eq!(c.data(), &[2.0]);
        assert!(img.crop(PixelRect { x0: 5, y0: 5, x1: 9, y1: 9 }).is_err());
    }
}
