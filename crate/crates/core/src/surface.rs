//! Dense `N × H × W × C` surfaces and their on-disk forms.
//!
//! `SRF1` (little-endian): magic `SRF1`, `u16` H, `u16` W, `u16` channels,
//! then `H·W·C` `f32` values in `(y, x, channel)` row-major order. One file
//! holds one sample.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SRF1_MAGIC: &[u8; 4] = b"SRF1";

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceTensor {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SurfaceTensor {
    pub fn zeros(samples: usize, height: usize, width: usize, channels: usize) -> Self {
        SurfaceTensor {
            samples,
            height,
            width,
            channels,
            data: vec![0.0; samples * height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(n, y, x, c)]
    }

    /// All channels of one cell.
    pub fn cell(&self, n: usize, y: usize, x: usize) -> &[f64] {
        let i = self.index(n, y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn cell_mut(&mut self, n: usize, y: usize, x: usize) -> &mut [f64] {
        let i = self.index(n, y, x, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.height * self.width * self.channels;
        &self.data[n * len..(n + 1) * len]
    }

    /// Copies one sample into a single-sample surface.
    pub fn extract_sample(&self, n: usize) -> SurfaceTensor {
        SurfaceTensor {
            samples: 1,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.sample(n).to_vec(),
        }
    }

    /// Channels `[start, end)` of every cell.
    pub fn channel_slice(&self, start: usize, end: usize) -> SurfaceTensor {
        assert!(start <= end && end <= self.channels);
        let mut out = SurfaceTensor::zeros(self.samples, self.height, self.width, end - start);
        for (dst, src) in out
            .data
            .chunks_exact_mut(end - start)
            .zip(self.data.chunks_exact(self.channels))
        {
            dst.copy_from_slice(&src[start..end]);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &SurfaceTensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "surface shapes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn encode_srf1(surface: &SurfaceTensor, sample: usize) -> Result<Vec<u8>> {
    if sample >= surface.samples {
        return Err(Error::arg(format!("sample {sample} out of range")));
    }
    let dims = [surface.height, surface.width, surface.channels];
    if dims.iter().any(|&d| d > u16::MAX as usize) {
        return Err(Error::arg(format!("surface dimensions {dims:?} exceed SRF1 limits")));
    }
    let mut buf = Vec::with_capacity(10 + 4 * surface.sample(sample).len());
    buf.extend_from_slice(SRF1_MAGIC);
    for d in dims {
        buf.extend_from_slice(&(d as u16).to_le_bytes());
    }
    for &v in surface.sample(sample) {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_srf1(bytes: &[u8]) -> Result<SurfaceTensor> {
    if bytes.len() < 10 || &bytes[..4] != SRF1_MAGIC {
        return Err(Error::format("missing SRF1 header"));
    }
    let rd = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    let (h, w, c) = (rd(4), rd(6), rd(8));
    let body = &bytes[10..];
    if body.len() != 4 * h * w * c {
        return Err(Error::format(format!(
            "SRF1 {h}x{w}x{c} needs {} data bytes, found {}",
            4 * h * w * c,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    Ok(SurfaceTensor { samples: 1, height: h, width: w, channels: c, data })
}

pub fn write_srf1(surface: &SurfaceTensor, sample: usize, path: &Path) -> Result<()> {
    fs::write(path, encode_srf1(surface, sample)?)?;
    Ok(())
}

pub fn read_srf1(path: &Path) -> Result<SurfaceTensor> {
    decode_srf1(&fs::read(path)?)
}

/// Binary PGM (`P5`) of channel 0 of one sample, min-max scaled to 0..=255.
/// A constant channel maps to all zeros.
pub fn encode_pgm(surface: &SurfaceTensor, sample: usize) -> Result<Vec<u8>> {
    if sample >= surface.samples || surface.channels == 0 {
        return Err(Error::arg("nothing to export"));
    }
    let values: Vec<f64> = (0..surface.height)
        .flat_map(|y| (0..surface.width).map(move |x| (y, x)))
        .map(|(y, x)| surface.at(sample, y, x, 0))
        .collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut buf = format!("P5\n{} {}\n255\n", surface.width, surface.height).into_bytes();
    buf.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(buf)
}
