//! Dense `K x h x w` real tensors, bilinear resampling and the `PMT1`
//! binary container.
//!
//! Container layout: the magic bytes `PMT1`, three little-endian `u32`
//! dims `(K, h, w)`, then `K*h*w` little-endian `f32` values, channel-major
//! and row-major within a channel.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PMT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "tensor {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor3 {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Stacks equally sized single-channel maps.
    pub fn from_channels(height: usize, width: usize, maps: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(maps.len() * height * width);
        for m in maps {
            if m.len() != height * width {
                return Err(Error::dim(format!(
                    "channel has {} values, expected {}",
                    m.len(),
                    height * width
                )));
            }
            data.extend_from_slice(m);
        }
        Tensor3::new(maps.len(), height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let p = self.plane();
        &self.data[k * p..(k + 1) * p]
    }

    pub fn get(&self, k: usize, y: usize, x: usize) -> f64 {
        self.data[(k * self.height + y) * self.width + x]
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.data.len());
        buf.extend_from_slice(MAGIC);
        for d in [self.channels, self.height, self.width] {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut header = [0u8; 16];
        input
            .read_exact(&mut header)
            .map_err(|e| Error::Format(format!("short header: {e}")))?;
        if &header[..4] != MAGIC {
            return Err(Error::Format("bad magic, expected PMT1".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (k, h, w) = (dim(0), dim(1), dim(2));
        let n = k
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Format("dims overflow".into()))?;
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() != 4 * n {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {}",
                bytes.len(),
                4 * n
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Tensor3::new(k, h, w, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Tensor3::read_from(std::io::BufReader::new(f))
    }
}

fn source_coord(i: usize, out: usize, input: usize) -> f64 {
    if out == 1 {
        (input - 1) as f64 / 2.0
    } else {
        i as f64 * (input - 1) as f64 / (out - 1) as f64
    }
}

/// Corner-aligned bilinear resampling of one `in_h x in_w` map.
pub fn bilinear_resize(
    map: &[f64],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if in_h == 0 || in_w == 0 || map.len() != in_h * in_w {
        return Err(Error::dim(format!(
            "resize input {in_h}x{in_w} with {} values",
            map.len()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg(format!("resize output {out_h}x{out_w} is empty")));
    }
    if in_h == out_h && in_w == out_w {
        return Ok(map.to_vec());
    }
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|x| {
            let s = source_coord(x, out_w, in_w);
            let x0 = (s.floor() as usize).min(in_w - 1);
            let x1 = (x0 + 1).min(in_w - 1);
            (x0, x1, s - x0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let s = source_coord(y, out_h, in_h);
        let y0 = (s.floor() as usize).min(in_h - 1);
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = s - y0 as f64;
        let (r0, r1) = (&map[y0 * in_w..(y0 + 1) * in_w], &map[y1 * in_w..(y1 + 1) * in_w]);
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + fx * (r0[x1] - r0[x0]);
            let bottom = r1[x0] + fx * (r1[x1] - r1[x0]);
            out.push(top + fy * (bottom - top));
        }
    }
    Ok(out)
}
