//! Randomized self-checks shared by the command line and the test suites.
//!
//! * [`grad_check`] compares full-layer analytic gradients with central
//!   finite differences.
//! * [`equiv_check`] compares the grouped layer with both dense oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoding::{FeatureConfig, FeatureRows, TimeFeature};
use crate::error::Result;
use crate::events::{Event, EventBatch, EventStream};
use crate::grouping::{group_by_time_with_spans, sample_spans};
use crate::layer::{encode_batch, layer_backward, layer_forward, layer_forward_features, LayerConfig};
use crate::lstm::LstmParams;
use crate::oracle::{convlstm_1x1_forward, densify_events, naive_pixel_forward};
use crate::se::SeParams;
use crate::surface::SurfaceTensor;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding are compared absolutely.
pub const GRAD_REL_FLOOR: f64 = 1e-4;
pub const DENSE_TOLERANCE: f64 = 1e-9;
pub const NAIVE_TOLERANCE: f64 = 1e-12;

const ALL_TIME_FEATURES: [TimeFeature; 5] = [
    TimeFeature::TsAbsolute,
    TimeFeature::TsRelative,
    TimeFeature::DelayRelative,
    TimeFeature::TsGlobal,
    TimeFeature::TsLocal,
];

/// `|a − n| / max(|a|, |n|, GRAD_REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR)
}

pub fn random_features<R: Rng>(rng: &mut R, allow_coords: bool) -> FeatureConfig {
    loop {
        let time: Vec<TimeFeature> = ALL_TIME_FEATURES.iter().copied().filter(|_| rng.gen_bool(0.4)).collect();
        let coords = allow_coords && rng.gen_bool(0.3);
        if let Ok(f) = FeatureConfig::new(rng.gen_bool(0.7), &time, coords) {
            return f;
        }
    }
}

/// A random valid stream; timestamps are small integers, so ties occur.
pub fn random_stream<R: Rng>(rng: &mut R, width: u16, height: u16, max_events: usize) -> EventStream {
    let n = rng.gen_range(0..=max_events);
    let events = (0..n)
        .map(|_| {
            Event::new(
                rng.gen_range(0..width),
                rng.gen_range(0..height),
                rng.gen_range(0..400) as f64,
                if rng.gen_bool(0.5) { 1 } else { -1 },
            )
        })
        .collect();
    EventStream::from_unsorted(width, height, events).expect("generated events are in range")
}

pub fn random_batch<R: Rng>(rng: &mut R, max_side: u16, max_samples: usize, max_events: usize) -> EventBatch {
    let (w, h) = (rng.gen_range(1..=max_side), rng.gen_range(1..=max_side));
    let n = rng.gen_range(1..=max_samples);
    let per_sample = max_events / n;
    EventBatch::new(w, h, (0..n).map(|_| random_stream(rng, w, h, per_sample)).collect()).expect("uniform geometry")
}

fn weighted_sum(a: &SurfaceTensor, r: &SurfaceTensor) -> f64 {
    a.data.iter().zip(&r.data).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    pub instances: usize,
    pub compared: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

/// Central differences of a scalar function along every coordinate of `x`.
fn numeric_gradient<F>(x: &mut [f64], mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let keep = x[i];
        x[i] = keep + FD_STEP;
        let up = f(x)?;
        x[i] = keep - FD_STEP;
        let down = f(x)?;
        x[i] = keep;
        g.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(g)
}

fn compare(report: &mut GradCheckReport, analytic: &[f64], numeric: &[f64]) {
    for (&a, &n) in analytic.iter().zip(numeric) {
        report.compared += 1;
        report.max_rel_error = report.max_rel_error.max(relative_error(a, n));
        report.max_abs_error = report.max_abs_error.max((a - n).abs());
    }
}

/// Finite-difference check of one random instance; the loss is a random
/// weighted sum of the surface.
fn grad_check_instance<R: Rng>(rng: &mut R, report: &mut GradCheckReport) -> Result<()> {
    let batch = random_batch(rng, 4, 2, 16);
    let mut config = LayerConfig::new(rng.gen_range(1..=3), rng.gen_range(1..=2), random_features(rng, true))
        .with_se(rng.gen_bool(0.5));
    if rng.gen_bool(0.4) {
        config = config.with_fields((3, 3), (rng.gen_range(1..=2), rng.gen_range(1..=2)));
    }
    let lstm = LstmParams::init(config.input_width(), config.channels, rng.gen())?;
    let se = if config.se_enabled {
        let mut se = SeParams::init(config.total_channels(), rng.gen())?;
        se.b1.iter_mut().chain(se.b2.iter_mut()).for_each(|b| *b = rng.gen_range(-0.5..0.5));
        Some(se)
    } else {
        None
    };
    let spans = sample_spans(&batch);
    let features = encode_batch(&batch, &config, &spans)?;
    let (surface, tape) = layer_forward_features(&batch, &features, &spans, &config, &lstm, se.as_ref())?;
    let mut r = surface.clone();
    r.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    let grads = layer_backward(&tape, &r)?;

    let loss = |f: &[FeatureRows], l: &LstmParams, s: Option<&SeParams>| -> Result<f64> {
        let (out, _) = layer_forward_features(&batch, f, &spans, &config, l, s)?;
        Ok(weighted_sum(&out, &r))
    };

    let mut flat = lstm.flatten();
    let numeric = numeric_gradient(&mut flat, |v| {
        let mut p = lstm.clone();
        p.assign_flat(v)?;
        loss(&features, &p, se.as_ref())
    })?;
    compare(report, &grads.lstm.flatten(), &numeric);

    if let (Some(se), Some(g)) = (&se, &grads.se) {
        let mut flat = se.flatten();
        let numeric = numeric_gradient(&mut flat, |v| {
            let mut p = se.clone();
            p.assign_flat(v)?;
            loss(&features, &lstm, Some(&p))
        })?;
        compare(report, &g.flatten(), &numeric);
    }

    for n in 0..features.len() {
        let mut flat = features[n].data.clone();
        let numeric = numeric_gradient(&mut flat, |v| {
            let mut f = features.clone();
            f[n].data.copy_from_slice(v);
            loss(&f, &lstm, se.as_ref())
        })?;
        compare(report, &grads.features[n].data, &numeric);
    }
    report.instances += 1;
    Ok(())
}

/// Runs `instances` random gradient checks derived from `seed`.
pub fn grad_check(seed: u64, instances: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for _ in 0..instances {
        grad_check_instance(&mut rng, &mut report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EquivReport {
    pub instances: usize,
    pub events: usize,
    /// Max |grouped − dense 1×1 ConvLSTM|.
    pub max_diff_dense: f64,
    /// Max |grouped − per-pixel scalar loop|.
    pub max_diff_naive: f64,
}

impl EquivReport {
    pub fn passed(&self) -> bool {
        self.max_diff_dense <= DENSE_TOLERANCE && self.max_diff_naive <= NAIVE_TOLERANCE
    }
}

/// Dense 1×1 ConvLSTM over every `(sample, bin)` stream, merged into the
/// layer's `N × H × W × B·C` layout.
pub fn dense_layer_forward(batch: &EventBatch, config: &LayerConfig, lstm: &LstmParams) -> Result<SurfaceTensor> {
    let spans = sample_spans(batch);
    let features = encode_batch(batch, config, &spans)?;
    let binned = group_by_time_with_spans(batch, config.bins, &spans)?;
    let base = config.features.base_width();
    let width = config.input_width();
    let mut streams = Vec::new();
    let mut vfeat = Vec::new();
    for (n, s) in batch.streams().iter().enumerate() {
        for ranges in &binned.bin_ranges {
            let r = ranges[n].clone();
            let mut rows = FeatureRows::zeros(r.len(), width);
            for (k, i) in r.clone().enumerate() {
                rows.row_mut(k)[..base].copy_from_slice(features[n].row(i));
            }
            streams.push(EventStream { width: s.width, height: s.height, events: s.events[r].to_vec() });
            vfeat.push(rows);
        }
    }
    let vbatch = EventBatch::new(batch.width(), batch.height(), streams)?;
    let volume = densify_events(&vbatch, &vfeat)?;
    let virt = convlstm_1x1_forward(&volume, lstm)?;
    let c = config.channels;
    let b = config.bins;
    let mut out = SurfaceTensor::zeros(batch.len(), virt.height, virt.width, b * c);
    for n in 0..batch.len() {
        for k in 0..b {
            for y in 0..virt.height {
                for x in 0..virt.width {
                    out.cell_mut(n, y, x)[k * c..(k + 1) * c].copy_from_slice(virt.cell(n * b + k, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Runs `instances` random comparisons of the grouped layer (1×1 fields,
/// SE off) with both oracles.
pub fn equiv_check(seed: u64, instances: usize) -> Result<EquivReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = EquivReport::default();
    for _ in 0..instances {
        let batch = random_batch(&mut rng, 8, 4, 200);
        let config = LayerConfig::new(rng.gen_range(1..=8), rng.gen_range(1..=3), random_features(&mut rng, true));
        let lstm = LstmParams::init(config.input_width(), config.channels, rng.gen())?;
        let (grouped, _) = layer_forward(&batch, &config, &lstm, None)?;
        let dense = dense_layer_forward(&batch, &config, &lstm)?;
        report.max_diff_dense = report.max_diff_dense.max(grouped.max_abs_diff(&dense));
        for (n, s) in batch.streams().iter().enumerate() {
            let naive = naive_pixel_forward(s, &config, &lstm)?;
            report.max_diff_naive = report.max_diff_naive.max(grouped.extract_sample(n).max_abs_diff(&naive));
        }
        report.instances += 1;
        report.events += batch.total_events();
    }
    Ok(report)
}
