//! The full event-to-surface layer and its exact backward pass.
//!
//! Forward, per batch of `N` samples:
//!
//! 1. split every sample into `B` time bins ([`group_by_time`]);
//! 2. encode per-event features inside each bin;
//! 3. treat the `N·B` bin streams as one virtual batch (sample-major, bin-minor),
//!    optionally replicated into receptive fields;
//! 4. [`group_by_pixel`] and run the shared LSTM over every row from the zero state;
//! 5. scatter the last outputs to an `N·B × H' × W' × C` block (zeros where no
//!    events arrived) and interleave it into `N × H' × W' × B·C`;
//! 6. optionally apply squeeze-and-excitation to the concatenated surface.
//!
//! [`group_by_time`]: crate::grouping::group_by_time

use crate::encoding::{encode_features, FeatureConfig, FeatureRows};
use crate::error::{Error, Result};
use crate::events::{EventBatch, EventStream};
use crate::grouping::{
    gather_last_outputs, group_by_pixel, group_by_time_with_spans, sample_spans, scatter_last_outputs,
    unfold_receptive_fields, FieldGeometry, GroupedEvents,
};
use crate::lstm::{backward_grouped, forward_grouped, infer_grouped, LstmParams, LstmTape};
use crate::se::{se_backward, se_forward, SeParams, SeTape};
use crate::surface::SurfaceTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    /// Output channels per bin (the LSTM hidden size).
    pub channels: usize,
    pub bins: usize,
    pub features: FeatureConfig,
    /// `(K_H, K_W)`, odd.
    pub kernel: (usize, usize),
    /// `(s_y, s_x)`.
    pub stride: (usize, usize),
    pub se_enabled: bool,
}

impl LayerConfig {
    /// Per-pixel layer (1×1 fields, stride 1) without SE.
    pub fn new(channels: usize, bins: usize, features: FeatureConfig) -> Self {
        LayerConfig { channels, bins, features, kernel: (1, 1), stride: (1, 1), se_enabled: false }
    }

    pub fn with_fields(mut self, kernel: (usize, usize), stride: (usize, usize)) -> Self {
        self.kernel = kernel;
        self.stride = stride;
        self
    }

    pub fn with_se(mut self, enabled: bool) -> Self {
        self.se_enabled = enabled;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.bins == 0 {
            return Err(Error::config("channels and bins must be at least 1"));
        }
        FieldGeometry::new(1, 1, self.kernel, self.stride)?;
        Ok(())
    }

    /// LSTM input width.
    pub fn input_width(&self) -> usize {
        self.features.width()
    }

    pub fn total_channels(&self) -> usize {
        self.bins * self.channels
    }

    /// `(H', W')` of the surface for a `height × width` sensor.
    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let g = FieldGeometry::new(height, width, self.kernel, self.stride)?;
        Ok((g.out_h, g.out_w))
    }

    fn needs_unfold(&self) -> bool {
        self.kernel != (1, 1) || self.stride != (1, 1) || self.features.with_coords()
    }
}

/// Encodes every sample's events bin by bin. Rows are aligned with the
/// original sample events; `spans[n]` is the sample span used for binning and
/// `ts_global`.
pub fn encode_batch(batch: &EventBatch, config: &LayerConfig, spans: &[(f64, f64)]) -> Result<Vec<FeatureRows>> {
    let binned = group_by_time_with_spans(batch, config.bins, spans)?;
    let width = config.features.base_width();
    Ok(batch
        .streams()
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let mut rows = FeatureRows::zeros(s.len(), width);
            for ranges in &binned.bin_ranges {
                let r = ranges[n].clone();
                let enc = encode_features(&s.events[r.clone()], &config.features, spans[n]);
                rows.data[r.start * width..r.end * width].copy_from_slice(&enc.data);
            }
            rows
        })
        .collect())
}

/// Everything [`layer_backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTape {
    config: LayerConfig,
    samples: usize,
    out_h: usize,
    out_w: usize,
    sample_lengths: Vec<usize>,
    /// Row bookkeeping of the grouped block; `data` is dropped after the forward.
    grouped: GroupedEvents,
    /// `origin[v][j]`: index in the original sample of event `j` of virtual stream `v`.
    origin: Vec<Vec<usize>>,
    lstm: LstmTape,
    se: Option<SeTape>,
}

impl LayerTape {
    pub fn rows(&self) -> usize {
        self.grouped.rows()
    }

    pub fn element_count(&self) -> usize {
        self.grouped.element_count() + self.lstm.element_count()
    }
}

/// Gradients produced by [`layer_backward`].
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub lstm: LstmParams,
    pub se: Option<SeParams>,
    /// Per sample, aligned with its events; width is the base feature width
    /// (receptive-field coordinates are constants and get no gradient).
    pub features: Vec<FeatureRows>,
}

struct Prepared {
    grouped: GroupedEvents,
    origin: Vec<Vec<usize>>,
    out_h: usize,
    out_w: usize,
}

fn prepare(
    batch: &EventBatch,
    features: &[FeatureRows],
    spans: &[(f64, f64)],
    config: &LayerConfig,
    lstm: &LstmParams,
) -> Result<Prepared> {
    config.validate()?;
    if lstm.input_size() != config.input_width() {
        return Err(Error::config(format!(
            "LSTM input width {} does not match feature width {} ({})",
            lstm.input_size(),
            config.input_width(),
            config.features
        )));
    }
    if lstm.hidden_size() != config.channels {
        return Err(Error::config(format!(
            "LSTM hidden size {} does not match {} channels",
            lstm.hidden_size(),
            config.channels
        )));
    }
    let width = config.features.base_width();
    if features.len() != batch.len() {
        return Err(Error::arg("one feature block per sample is required"));
    }
    for (n, (f, s)) in features.iter().zip(batch.streams()).enumerate() {
        if f.width != width || f.data.len() != s.len() * width {
            return Err(Error::arg(format!("sample {n}: feature block does not match its events")));
        }
    }

    let binned = group_by_time_with_spans(batch, config.bins, spans)?;
    let b_count = config.bins;
    let mut streams = Vec::with_capacity(batch.len() * b_count);
    let mut vfeat = Vec::with_capacity(batch.len() * b_count);
    let mut origin = Vec::with_capacity(batch.len() * b_count);
    for (n, s) in batch.streams().iter().enumerate() {
        for ranges in &binned.bin_ranges {
            let r = ranges[n].clone();
            streams.push(EventStream { width: s.width, height: s.height, events: s.events[r.clone()].to_vec() });
            vfeat.push(FeatureRows { width, data: features[n].data[r.start * width..r.end * width].to_vec() });
            origin.push(r.collect::<Vec<_>>());
        }
    }
    let vbatch = EventBatch::new(batch.width(), batch.height(), streams)?;

    let (gbatch, gfeat, origin, out_h, out_w) = if config.needs_unfold() {
        let u = unfold_receptive_fields(&vbatch, config.kernel, config.stride)?;
        let f = u.gather_features(&vfeat, config.features.with_coords())?;
        let origin = u
            .source
            .iter()
            .zip(&origin)
            .map(|(src, orig)| src.iter().map(|&j| orig[j]).collect())
            .collect();
        let (h, w) = (u.geometry.out_h, u.geometry.out_w);
        (u.batch, f, origin, h, w)
    } else {
        let (h, w) = (batch.height() as usize, batch.width() as usize);
        (vbatch, vfeat, origin, h, w)
    };
    let grouped = group_by_pixel(&gbatch, &gfeat)?;
    Ok(Prepared { grouped, origin, out_h, out_w })
}

/// `N·B × H × W × C` → `N × H × W × B·C` with bin `b` in channels `[bC, (b+1)C)`.
fn merge_bins(v: &SurfaceTensor, samples: usize, bins: usize) -> SurfaceTensor {
    let c = v.channels;
    let mut out = SurfaceTensor::zeros(samples, v.height, v.width, bins * c);
    for n in 0..samples {
        for b in 0..bins {
            for y in 0..v.height {
                for x in 0..v.width {
                    let src = v.cell(n * bins + b, y, x);
                    out.cell_mut(n, y, x)[b * c..(b + 1) * c].copy_from_slice(src);
                }
            }
        }
    }
    out
}

fn split_bins(s: &SurfaceTensor, bins: usize) -> SurfaceTensor {
    let c = s.channels / bins;
    let mut out = SurfaceTensor::zeros(s.samples * bins, s.height, s.width, c);
    for n in 0..s.samples {
        for b in 0..bins {
            for y in 0..s.height {
                for x in 0..s.width {
                    let src = &s.cell(n, y, x)[b * c..(b + 1) * c];
                    out.cell_mut(n * bins + b, y, x).copy_from_slice(src);
                }
            }
        }
    }
    out
}

fn check_se<'a>(config: &LayerConfig, se: Option<&'a SeParams>) -> Result<Option<&'a SeParams>> {
    match (config.se_enabled, se) {
        (false, _) => Ok(None),
        (true, None) => Err(Error::config("SE is enabled but no SE parameters were given")),
        (true, Some(p)) if p.channels() != config.total_channels() => Err(Error::config(format!(
            "SE has {} channels, the surface has {}",
            p.channels(),
            config.total_channels()
        ))),
        (true, Some(p)) => Ok(Some(p)),
    }
}

/// Forward pass on precomputed per-sample features (see [`encode_batch`]).
pub fn layer_forward_features(
    batch: &EventBatch,
    features: &[FeatureRows],
    spans: &[(f64, f64)],
    config: &LayerConfig,
    lstm: &LstmParams,
    se: Option<&SeParams>,
) -> Result<(SurfaceTensor, LayerTape)> {
    let se = check_se(config, se)?;
    let Prepared { mut grouped, origin, out_h, out_w } = prepare(batch, features, spans, config, lstm)?;
    let (outputs, lstm_tape) = forward_grouped(lstm, &grouped)?;
    let virt = scatter_last_outputs(&outputs, &grouped, config.channels)?;
    let mut surface = merge_bins(&virt, batch.len(), config.bins);
    let se_tape = match se {
        Some(p) => {
            let (out, tape) = se_forward(&surface, p)?;
            surface = out;
            Some(tape)
        }
        None => None,
    };
    grouped.data = Vec::new();
    let tape = LayerTape {
        config: config.clone(),
        samples: batch.len(),
        out_h,
        out_w,
        sample_lengths: batch.streams().iter().map(EventStream::len).collect(),
        grouped,
        origin,
        lstm: lstm_tape,
        se: se_tape,
    };
    Ok((surface, tape))
}

/// Forward pass with explicit per-sample spans for binning and `ts_global`.
pub fn layer_forward_with_spans(
    batch: &EventBatch,
    spans: &[(f64, f64)],
    config: &LayerConfig,
    lstm: &LstmParams,
    se: Option<&SeParams>,
) -> Result<(SurfaceTensor, LayerTape)> {
    let features = encode_batch(batch, config, spans)?;
    layer_forward_features(batch, &features, spans, config, lstm, se)
}

/// Forward pass; each sample's span is its own `[t_first, t_last]`.
pub fn layer_forward(
    batch: &EventBatch,
    config: &LayerConfig,
    lstm: &LstmParams,
    se: Option<&SeParams>,
) -> Result<(SurfaceTensor, LayerTape)> {
    layer_forward_with_spans(batch, &sample_spans(batch), config, lstm, se)
}

/// Forward pass without recording anything for backward.
pub fn reconstruct(
    batch: &EventBatch,
    config: &LayerConfig,
    lstm: &LstmParams,
    se: Option<&SeParams>,
) -> Result<SurfaceTensor> {
    let se = check_se(config, se)?;
    let spans = sample_spans(batch);
    let features = encode_batch(batch, config, &spans)?;
    let prepared = prepare(batch, &features, &spans, config, lstm)?;
    let outputs = infer_grouped(lstm, &prepared.grouped)?;
    let virt = scatter_last_outputs(&outputs, &prepared.grouped, config.channels)?;
    let surface = merge_bins(&virt, batch.len(), config.bins);
    match se {
        Some(p) => Ok(se_forward(&surface, p)?.0),
        None => Ok(surface),
    }
}

/// Exact gradients of a scalar loss given `∂L/∂surface`.
pub fn layer_backward(tape: &LayerTape, d_surface: &SurfaceTensor) -> Result<LayerGrads> {
    let cfg = &tape.config;
    let expected = (tape.samples, tape.out_h, tape.out_w, cfg.total_channels());
    let got = (d_surface.samples, d_surface.height, d_surface.width, d_surface.channels);
    if got != expected {
        return Err(Error::arg(format!("surface gradient has shape {got:?}, tape expects {expected:?}")));
    }
    let (d_se, d_pre) = match &tape.se {
        Some(st) => {
            let (g, d) = se_backward(st, d_surface)?;
            (Some(g), d)
        }
        None => (None, d_surface.clone()),
    };
    let d_virtual = split_bins(&d_pre, cfg.bins);
    let d_last = gather_last_outputs(&d_virtual, &tape.grouped)?;
    let (d_lstm, d_block) = backward_grouped(&tape.lstm, &d_last)?;

    let width = cfg.features.base_width();
    let f = tape.grouped.features;
    let g = &tape.grouped;
    let mut features: Vec<FeatureRows> =
        tape.sample_lengths.iter().map(|&len| FeatureRows::zeros(len, width)).collect();
    for r in 0..g.rows() {
        let v = g.row_sample[r];
        let n = v / cfg.bins;
        for k in 0..g.row_len[r] {
            let j = g.source[g.row_offset[r] + k];
            let dst = features[n].row_mut(tape.origin[v][j]);
            let src = &d_block[(r * g.t_max + k) * f..(r * g.t_max + k) * f + width];
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    Ok(LayerGrads { lstm: d_lstm, se: d_se, features })
}

/// Configuration plus learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixLstm {
    pub config: LayerConfig,
    pub lstm: LstmParams,
    pub se: Option<SeParams>,
}

impl MatrixLstm {
    /// Freshly initialized parameters; SE parameters are created only when enabled.
    pub fn new(config: LayerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let lstm = LstmParams::init(config.input_width(), config.channels, seed)?;
        let se = if config.se_enabled {
            Some(SeParams::init(config.total_channels(), seed ^ 0x5e5e_5e5e)?)
        } else {
            None
        };
        Ok(MatrixLstm { config, lstm, se })
    }

    pub fn forward(&self, batch: &EventBatch) -> Result<(SurfaceTensor, LayerTape)> {
        layer_forward(batch, &self.config, &self.lstm, self.se.as_ref())
    }

    pub fn reconstruct(&self, batch: &EventBatch) -> Result<SurfaceTensor> {
        reconstruct(batch, &self.config, &self.lstm, self.se.as_ref())
    }
}
