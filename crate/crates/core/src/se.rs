//! Squeeze-and-excitation channel recalibration with reduction factor 1.
//!
//! Per sample: `s = mean_{y,x} X[y, x, :]`, `a = relu(W1·s + b1)`,
//! `e = σ(W2·a + b2)`, `Y[y, x, d] = X[y, x, d] · e[d]`. The mean runs over
//! every cell, including cells that received no events.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lstm::sigmoid;
use crate::surface::SurfaceTensor;

/// Two square `D × D` channel maps (row-major, `out × in`) and their biases.
#[derive(Debug, Clone, PartialEq)]
pub struct SeParams {
    channels: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl SeParams {
    pub fn zeros(channels: usize) -> Self {
        SeParams {
            channels,
            w1: vec![0.0; channels * channels],
            b1: vec![0.0; channels],
            w2: vec![0.0; channels * channels],
            b2: vec![0.0; channels],
        }
    }

    /// Maps uniform in `(−1/√D, 1/√D)`, zero biases.
    pub fn init(channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::arg("SE needs at least one channel"));
        }
        let mut p = Self::zeros(channels);
        let k = 1.0 / (channels as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in p.w1.iter_mut().chain(p.w2.iter_mut()) {
            *w = rng.gen_range(-k..k);
        }
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels * (self.channels + 1)
    }

    /// `w1 ‖ b1 ‖ w2 ‖ b2`.
    pub fn flatten(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::arg(format!("{} values for {} SE parameters", flat.len(), self.num_params())));
        }
        let d = self.channels;
        let (w1, rest) = flat.split_at(d * d);
        let (b1, rest) = rest.split_at(d);
        let (w2, b2) = rest.split_at(d * d);
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2.copy_from_slice(b2);
        Ok(())
    }

    /// `SEP1` file: magic, `u32` channels, then `w1, b1, w2, b2` as
    /// little-endian `f64`.
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = b"SEP1".to_vec();
        buf.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for v in self.flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != b"SEP1" {
            return Err(Error::format("missing SEP1 header"));
        }
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut p = Self::zeros(d);
        let flat: Vec<f64> = bytes[8..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if bytes.len() != 8 + 8 * p.num_params() {
            return Err(Error::format("SEP1 body has the wrong length"));
        }
        p.assign_flat(&flat)?;
        Ok(p)
    }
}

/// Values saved by [`se_forward`] for [`se_backward`].
#[derive(Debug, Clone)]
pub struct SeTape {
    params: SeParams,
    input: SurfaceTensor,
    squeeze: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    scale: Vec<f64>,
}

impl SeTape {
    /// Per-sample channel scales `e` (`N × D`).
    pub fn scales(&self) -> &[f64] {
        &self.scale
    }
}

fn matvec(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = b.len();
    for o in 0..d {
        let row = &w[o * d..(o + 1) * d];
        out[o] = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub fn se_forward(surface: &SurfaceTensor, se: &SeParams) -> Result<(SurfaceTensor, SeTape)> {
    let d = surface.channels;
    if d != se.channels {
        return Err(Error::config(format!("SE expects {} channels, surface has {d}", se.channels)));
    }
    let n = surface.samples;
    let cells = surface.height * surface.width;
    let mut squeeze = vec![0.0; n * d];
    let mut hidden_pre = vec![0.0; n * d];
    let mut hidden = vec![0.0; n * d];
    let mut scale = vec![0.0; n * d];
    let mut out = surface.clone();
    for s in 0..n {
        let sq = &mut squeeze[s * d..(s + 1) * d];
        for cell in surface.sample(s).chunks_exact(d.max(1)) {
            for (acc, v) in sq.iter_mut().zip(cell) {
                *acc += v;
            }
        }
        if cells > 0 {
            sq.iter_mut().for_each(|v| *v /= cells as f64);
        }
        let pre = &mut hidden_pre[s * d..(s + 1) * d];
        matvec(&se.w1, &se.b1, sq, pre);
        let a = &mut hidden[s * d..(s + 1) * d];
        for (ai, &zi) in a.iter_mut().zip(pre.iter()) {
            *ai = zi.max(0.0);
        }
        let e = &mut scale[s * d..(s + 1) * d];
        matvec(&se.w2, &se.b2, a, e);
        e.iter_mut().for_each(|v| *v = sigmoid(*v));
        let len = cells * d;
        for cell in out.data[s * len..(s + 1) * len].chunks_exact_mut(d.max(1)) {
            for (v, &k) in cell.iter_mut().zip(e.iter()) {
                *v *= k;
            }
        }
    }
    let tape = SeTape { params: se.clone(), input: surface.clone(), squeeze, hidden_pre, hidden, scale };
    Ok((out, tape))
}

/// Gradients of the SE parameters and of the input surface.
pub fn se_backward(tape: &SeTape, d_out: &SurfaceTensor) -> Result<(SeParams, SurfaceTensor)> {
    let x = &tape.input;
    if d_out.data.len() != x.data.len() || d_out.channels != x.channels {
        return Err(Error::arg("SE output gradient does not match the recorded surface"));
    }
    let d = x.channels;
    let cells = x.height * x.width;
    let p = &tape.params;
    let mut grads = SeParams::zeros(d);
    let mut d_in = SurfaceTensor::zeros(x.samples, x.height, x.width, d);
    let mut d_e = vec![0.0; d];
    let mut d_z2 = vec![0.0; d];
    let mut d_z1 = vec![0.0; d];
    let mut d_s = vec![0.0; d];
    for s in 0..x.samples {
        let e = &tape.scale[s * d..(s + 1) * d];
        let a = &tape.hidden[s * d..(s + 1) * d];
        let pre = &tape.hidden_pre[s * d..(s + 1) * d];
        let sq = &tape.squeeze[s * d..(s + 1) * d];
        d_e.fill(0.0);
        for (go, xi) in d_out.sample(s).chunks_exact(d).zip(x.sample(s).chunks_exact(d)) {
            for k in 0..d {
                d_e[k] += go[k] * xi[k];
            }
        }
        for k in 0..d {
            d_z2[k] = d_e[k] * e[k] * (1.0 - e[k]);
            grads.b2[k] += d_z2[k];
        }
        for o in 0..d {
            for i in 0..d {
                grads.w2[o * d + i] += d_z2[o] * a[i];
            }
        }
        for i in 0..d {
            let da: f64 = (0..d).map(|o| p.w2[o * d + i] * d_z2[o]).sum();
            d_z1[i] = if pre[i] > 0.0 { da } else { 0.0 };
            grads.b1[i] += d_z1[i];
        }
        for o in 0..d {
            for i in 0..d {
                grads.w1[o * d + i] += d_z1[o] * sq[i];
            }
        }
        for i in 0..d {
            d_s[i] = (0..d).map(|o| p.w1[o * d + i] * d_z1[o]).sum::<f64>();
            if cells > 0 {
                d_s[i] /= cells as f64;
            }
        }
        let len = cells * d;
        for (gi, go) in d_in.data[s * len..(s + 1) * len]
            .chunks_exact_mut(d)
            .zip(d_out.sample(s).chunks_exact(d))
        {
            for k in 0..d {
                gi[k] = go[k] * e[k] + d_s[k];
            }
        }
    }
    Ok((grads, d_in))
}
