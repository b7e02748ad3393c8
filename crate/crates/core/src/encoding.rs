//! Per-event input features.
//!
//! Every time feature is range-normalized into `[0, 1]`; what differs is the
//! scope of the normalization:
//!
//! | feature          | value                     | normalized over                       |
//! |------------------|---------------------------|---------------------------------------|
//! | `ts_abs`         | timestamp                 | first..last event of the sequence     |
//! | `ts_rel`         | timestamp                 | first..last event of the pixel        |
//! | `delay_rel`      | gap to the previous event of the same pixel (first gap = 0) | min..max gap of the pixel |
//! | `ts_global`      | timestamp                 | the uncut sample span                 |
//! | `ts_local`       | timestamp                 | same as `ts_abs`                      |
//!
//! When a sample is split into temporal bins, the "sequence" is the bin, so
//! `ts_local` is the in-bin position and `ts_global` the position in the
//! whole sample. A scope whose range is empty (one event, or equal times)
//! yields 0.
//!
//! Columns are laid out as the enabled time features in the order above,
//! then polarity (`±1`). Receptive-field coordinates, when enabled, are
//! appended later by the unfolding step.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::events::Event;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TimeFeature {
    TsAbsolute,
    TsRelative,
    DelayRelative,
    TsGlobal,
    TsLocal,
}

impl TimeFeature {
    pub fn name(self) -> &'static str {
        match self {
            TimeFeature::TsAbsolute => "ts_abs",
            TimeFeature::TsRelative => "ts_rel",
            TimeFeature::DelayRelative => "delay_rel",
            TimeFeature::TsGlobal => "ts_global",
            TimeFeature::TsLocal => "ts_local",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureConfig {
    use_polarity: bool,
    time_features: Vec<TimeFeature>,
    with_coords: bool,
}

impl FeatureConfig {
    pub fn new(use_polarity: bool, time_features: &[TimeFeature], with_coords: bool) -> Result<Self> {
        let mut time_features = time_features.to_vec();
        time_features.sort();
        time_features.dedup();
        if !use_polarity && time_features.is_empty() {
            return Err(Error::arg("polarity or at least one time feature must be enabled"));
        }
        Ok(FeatureConfig { use_polarity, time_features, with_coords })
    }

    pub fn use_polarity(&self) -> bool {
        self.use_polarity
    }

    pub fn time_features(&self) -> &[TimeFeature] {
        &self.time_features
    }

    pub fn with_coords(&self) -> bool {
        self.with_coords
    }

    /// Columns produced by [`encode_features`] (no coordinates).
    pub fn base_width(&self) -> usize {
        self.time_features.len() + usize::from(self.use_polarity)
    }

    /// Full LSTM input width, coordinates included.
    pub fn width(&self) -> usize {
        self.base_width() + if self.with_coords { 2 } else { 0 }
    }
}

impl Default for FeatureConfig {
    /// Polarity plus per-pixel delay.
    fn default() -> Self {
        FeatureConfig::new(true, &[TimeFeature::DelayRelative], false).unwrap()
    }
}

impl FromStr for FeatureConfig {
    type Err = Error;

    /// Parses lists such as `polarity,delay_rel` or `polarity,ts_global+ts_local,coords`.
    fn from_str(s: &str) -> Result<Self> {
        let mut polarity = false;
        let mut coords = false;
        let mut time = Vec::new();
        for tok in s.split([',', '+']).map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "polarity" | "pol" => polarity = true,
                "coords" => coords = true,
                "ts_abs" | "ts_absolute" => time.push(TimeFeature::TsAbsolute),
                "ts_rel" | "ts_relative" => time.push(TimeFeature::TsRelative),
                "delay_rel" | "delay_relative" => time.push(TimeFeature::DelayRelative),
                "ts_global" => time.push(TimeFeature::TsGlobal),
                "ts_local" => time.push(TimeFeature::TsLocal),
                other => return Err(Error::arg(format!("unknown feature `{other}`"))),
            }
        }
        FeatureConfig::new(polarity, &time, coords)
    }
}

impl fmt::Display for FeatureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<&str> = Vec::new();
        if self.use_polarity {
            names.push("polarity");
        }
        names.extend(self.time_features.iter().map(|t| t.name()));
        if self.with_coords {
            names.push("coords");
        }
        write!(f, "{}", names.join(","))
    }
}

/// Row-major `len × width` feature block aligned 1:1 with a slice of events.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRows {
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureRows {
    pub fn zeros(len: usize, width: usize) -> Self {
        FeatureRows { width, data: vec![0.0; len * width] }
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.width..(i + 1) * self.width]
    }
}

fn range_normalize(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Encodes `events` (a whole sample, or one temporal bin of it) into feature
/// rows of width [`FeatureConfig::base_width`]. `sample_span` is
/// `(t_first, t_last)` of the uncut sample and only affects `ts_global`.
pub fn encode_features(events: &[Event], config: &FeatureConfig, sample_span: (f64, f64)) -> FeatureRows {
    let width = config.base_width();
    let mut rows = FeatureRows::zeros(events.len(), width);
    if events.is_empty() {
        return rows;
    }

    let needs_pixels = config
        .time_features
        .iter()
        .any(|f| matches!(f, TimeFeature::TsRelative | TimeFeature::DelayRelative));
    let per_pixel = if needs_pixels { pixel_scopes(events) } else { Vec::new() };

    let seq_lo = events.iter().map(|e| e.t).fold(f64::INFINITY, f64::min);
    let seq_hi = events.iter().map(|e| e.t).fold(f64::NEG_INFINITY, f64::max);

    for (col, feature) in config.time_features.iter().enumerate() {
        match feature {
            TimeFeature::TsAbsolute | TimeFeature::TsLocal => {
                for (i, e) in events.iter().enumerate() {
                    rows.data[i * width + col] = range_normalize(e.t, seq_lo, seq_hi);
                }
            }
            TimeFeature::TsGlobal => {
                let (lo, hi) = sample_span;
                for (i, e) in events.iter().enumerate() {
                    rows.data[i * width + col] = range_normalize(e.t, lo, hi);
                }
            }
            TimeFeature::TsRelative => {
                for members in &per_pixel {
                    let lo = members.iter().map(|&i| events[i].t).fold(f64::INFINITY, f64::min);
                    let hi = members.iter().map(|&i| events[i].t).fold(f64::NEG_INFINITY, f64::max);
                    for &i in members {
                        rows.data[i * width + col] = range_normalize(events[i].t, lo, hi);
                    }
                }
            }
            TimeFeature::DelayRelative => {
                for members in &per_pixel {
                    let mut delays = Vec::with_capacity(members.len());
                    let mut prev = None;
                    for &i in members {
                        let t = events[i].t;
                        delays.push(prev.map_or(0.0, |p| t - p));
                        prev = Some(t);
                    }
                    let lo = delays.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = delays.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    for (&i, &d) in members.iter().zip(&delays) {
                        rows.data[i * width + col] = range_normalize(d, lo, hi);
                    }
                }
            }
        }
    }

    if config.use_polarity {
        let col = config.time_features.len();
        for (i, e) in events.iter().enumerate() {
            rows.data[i * width + col] = f64::from(e.p);
        }
    }
    rows
}

/// Event indices grouped by pixel, each group in stream order.
fn pixel_scopes(events: &[Event]) -> Vec<Vec<usize>> {
    let mut slot: HashMap<(u16, u16), usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let g = *slot.entry((e.x, e.y)).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

/// Position of an event inside a `kernel_h × kernel_w` receptive field whose
/// top-left pixel is `origin` (which may lie outside the sensor when borders
/// are padded). Top-left maps to `(0, 0)`, bottom-right to `(1, 1)`; the
/// divisor is `K − 1` clamped to at least 1.
pub fn receptive_coords(
    event_xy: (u16, u16),
    origin: (i64, i64),
    kernel_h: usize,
    kernel_w: usize,
) -> Result<(f64, f64)> {
    let dx = i64::from(event_xy.0) - origin.0;
    let dy = i64::from(event_xy.1) - origin.1;
    if dx < 0 || dy < 0 || dx >= kernel_w as i64 || dy >= kernel_h as i64 {
        return Err(Error::arg(format!(
            "event {event_xy:?} outside the {kernel_h}x{kernel_w} field at {origin:?}"
        )));
    }
    let px = dx as f64 / (kernel_w.saturating_sub(1).max(1)) as f64;
    let py = dy as f64 / (kernel_h.saturating_sub(1).max(1)) as f64;
    Ok((px, py))
}
