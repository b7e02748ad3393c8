//! Dense reference implementations.
//!
//! These are deliberately straightforward and single-threaded. They serve as
//! correctness references for the grouped path and as the dense baseline in
//! benchmarks. All are forward-only.

use crate::encoding::{encode_features, FeatureRows};
use crate::error::{Error, Result};
use crate::events::{EventBatch, EventStream};
use crate::layer::LayerConfig;
use crate::lstm::{cell_step_into, lstm_cell_step, LstmParams, LstmState, GATES};
use crate::surface::SurfaceTensor;

/// Events stacked per pixel by arrival order: `N × T_max × H × W × F`, with
/// `valid_len[(n·H + y)·W + x]` events at each pixel and zeros beyond.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseEventVolume {
    pub samples: usize,
    pub t_max: usize,
    pub height: usize,
    pub width: usize,
    pub features: usize,
    pub data: Vec<f64>,
    pub valid_len: Vec<usize>,
}

impl DenseEventVolume {
    #[inline]
    pub fn slot_index(&self, n: usize, i: usize, y: usize, x: usize) -> usize {
        (((n * self.t_max + i) * self.height + y) * self.width + x) * self.features
    }

    pub fn slot(&self, n: usize, i: usize, y: usize, x: usize) -> &[f64] {
        let k = self.slot_index(n, i, y, x);
        &self.data[k..k + self.features]
    }

    pub fn len_at(&self, n: usize, y: usize, x: usize) -> usize {
        self.valid_len[(n * self.height + y) * self.width + x]
    }

    pub fn data_elements(&self) -> usize {
        self.data.len()
    }

    pub fn element_count(&self) -> usize {
        self.data.len() + self.valid_len.len()
    }
}

pub fn densify_events(batch: &EventBatch, features: &[FeatureRows]) -> Result<DenseEventVolume> {
    if features.len() != batch.len() {
        return Err(Error::arg("one feature block per sample is required"));
    }
    let f = features.first().map_or(0, |r| r.width);
    let (h, w) = (batch.height() as usize, batch.width() as usize);
    let n = batch.len();
    let mut valid_len = vec![0usize; n * h * w];
    for (s, (stream, rows)) in batch.streams().iter().zip(features).enumerate() {
        if rows.width != f || rows.data.len() != stream.len() * f {
            return Err(Error::arg(format!("sample {s}: features misaligned with events")));
        }
        for e in &stream.events {
            valid_len[(s * h + e.y as usize) * w + e.x as usize] += 1;
        }
    }
    let t_max = valid_len.iter().copied().max().unwrap_or(0);
    let mut vol = DenseEventVolume {
        samples: n,
        t_max,
        height: h,
        width: w,
        features: f,
        data: vec![0.0; n * t_max * h * w * f],
        valid_len: vec![0; n * h * w],
    };
    for (s, (stream, rows)) in batch.streams().iter().zip(features).enumerate() {
        for (i, e) in stream.events.iter().enumerate() {
            let (y, x) = (e.y as usize, e.x as usize);
            let pix = (s * h + y) * w + x;
            let k = vol.valid_len[pix];
            vol.valid_len[pix] += 1;
            let at = vol.slot_index(s, k, y, x);
            vol.data[at..at + f].copy_from_slice(rows.row(i));
        }
    }
    Ok(vol)
}

fn check_volume(volume: &DenseEventVolume, params: &LstmParams) -> Result<()> {
    if volume.t_max > 0 && volume.features != params.input_size() {
        return Err(Error::config(format!(
            "volume feature width {} differs from LSTM input width {}",
            volume.features,
            params.input_size()
        )));
    }
    Ok(())
}

/// A 1×1 ConvLSTM on the dense volume: for every pixel, the shared cell runs
/// over its valid steps from the zero state; silent pixels stay zero.
pub fn convlstm_1x1_forward(volume: &DenseEventVolume, params: &LstmParams) -> Result<SurfaceTensor> {
    check_volume(volume, params)?;
    let c = params.hidden_size();
    let mut out = SurfaceTensor::zeros(volume.samples, volume.height, volume.width, c);
    for n in 0..volume.samples {
        for y in 0..volume.height {
            for x in 0..volume.width {
                let len = volume.len_at(n, y, x);
                if len == 0 {
                    continue;
                }
                let mut state = LstmState::zeros(c);
                for i in 0..len {
                    state = lstm_cell_step(params, volume.slot(n, i, y, x), &state);
                }
                out.cell_mut(n, y, x).copy_from_slice(&state.h);
            }
        }
    }
    Ok(out)
}

/// Time-major masked 1×1 ConvLSTM: every pixel is evaluated at every one of
/// the `T_max` steps, and the update is kept only where the step is valid.
/// This is the work a dense recurrent layer performs on a sparse volume.
pub fn convlstm_1x1_forward_masked(volume: &DenseEventVolume, params: &LstmParams) -> Result<SurfaceTensor> {
    check_volume(volume, params)?;
    let c = params.hidden_size();
    let g4 = GATES * c;
    let cells = volume.samples * volume.height * volume.width;
    let mut h = vec![0.0; cells * c];
    let mut cs = vec![0.0; cells * c];
    let mut gates = vec![0.0; g4];
    let mut h_new = vec![0.0; c];
    let mut c_new = vec![0.0; c];
    for t in 0..volume.t_max {
        for n in 0..volume.samples {
            for y in 0..volume.height {
                for x in 0..volume.width {
                    let pix = (n * volume.height + y) * volume.width + x;
                    let hp = &h[pix * c..(pix + 1) * c];
                    let cp = &cs[pix * c..(pix + 1) * c];
                    cell_step_into(params, volume.slot(n, t, y, x), hp, cp, &mut gates, &mut c_new, &mut h_new);
                    if t < volume.valid_len[pix] {
                        h[pix * c..(pix + 1) * c].copy_from_slice(&h_new);
                        cs[pix * c..(pix + 1) * c].copy_from_slice(&c_new);
                    }
                }
            }
        }
    }
    Ok(SurfaceTensor {
        samples: volume.samples,
        height: volume.height,
        width: volume.width,
        channels: c,
        data: h,
    })
}

/// Scalar LSTM step written out gate by gate, independent of the library
/// cell implementation.
fn scalar_step(p: &LstmParams, x: &[f64], h: &mut [f64], c: &mut [f64]) {
    let n = p.hidden_size();
    let h_old = h.to_vec();
    for j in 0..n {
        let pre = |gate: usize| -> f64 {
            let col = gate * n + j;
            let mut z = p.biases[col];
            for (fi, xv) in x.iter().enumerate() {
                z += xv * p.input_weights[fi * GATES * n + col];
            }
            for (m, hv) in h_old.iter().enumerate() {
                z += hv * p.recurrent_weights[m * GATES * n + col];
            }
            z
        };
        let logistic = |z: f64| 1.0 / (1.0 + (-z).exp());
        let i = logistic(pre(0));
        let f = logistic(pre(1));
        let g = pre(2).tanh();
        let o = logistic(pre(3));
        c[j] = f * c[j] + i * g;
        h[j] = o * c[j].tanh();
    }
}

/// Per-pixel scalar reconstruction of a single stream without any batching:
/// the same contract as the layer with one sample, 1×1 fields and SE off.
pub fn naive_pixel_forward(stream: &EventStream, config: &LayerConfig, params: &LstmParams) -> Result<SurfaceTensor> {
    if config.kernel != (1, 1) || config.stride != (1, 1) {
        return Err(Error::config("the per-pixel oracle supports 1x1 fields with stride 1 only"));
    }
    if params.input_size() != config.input_width() || params.hidden_size() != config.channels {
        return Err(Error::config("LSTM shape does not match the layer configuration"));
    }
    let (h, w) = (stream.height as usize, stream.width as usize);
    let c = config.channels;
    let bins = config.bins;
    let mut out = SurfaceTensor::zeros(1, h, w, bins * c);
    let Some((t0, t1)) = stream.time_span() else {
        return Ok(out);
    };
    for b in 0..bins {
        let lo = t0 + (t1 - t0) * (b as f64) / (bins as f64);
        let hi = if b + 1 == bins { t1 } else { t0 + (t1 - t0) * ((b + 1) as f64) / (bins as f64) };
        let members: Vec<_> = stream
            .events
            .iter()
            .filter(|e| {
                let above = b == 0 || e.t >= lo;
                let below = if b + 1 == bins { true } else { e.t < hi };
                above && below
            })
            .copied()
            .collect();
        let base = encode_features(&members, &config.features, (t0, t1));
        for y in 0..h {
            for x in 0..w {
                let mut hs = vec![0.0; c];
                let mut cs = vec![0.0; c];
                let mut any = false;
                for (i, e) in members.iter().enumerate() {
                    if e.x as usize != x || e.y as usize != y {
                        continue;
                    }
                    let mut input = base.row(i).to_vec();
                    if config.features.with_coords() {
                        input.extend([0.0, 0.0]);
                    }
                    scalar_step(params, &input, &mut hs, &mut cs);
                    any = true;
                }
                if any {
                    out.cell_mut(0, y, x)[b * c..(b + 1) * c].copy_from_slice(&hs);
                }
            }
        }
    }
    Ok(out)
}
