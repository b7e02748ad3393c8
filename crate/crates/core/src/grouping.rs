//! Order-aware reshapes between event streams and padded per-pixel rows.
//!
//! * [`group_by_pixel`] packs every active pixel's events (per sample) into
//!   one zero-padded row of a `P × T_max × F` block, keeping temporal order,
//!   and records `(sample, pixel, length)` for each row.
//! * [`group_by_time`] partitions every sample into `B` equal-duration bins.
//! * [`unfold_receptive_fields`] replicates events into the `K_H × K_W`
//!   fields of an output grid so that the same per-pixel machinery serves
//!   larger receptive fields.
//! * [`scatter_last_outputs`] / [`gather_last_outputs`] move per-row vectors
//!   to and from a dense surface; cells without a row stay zero.

use std::ops::Range;

use crate::encoding::{receptive_coords, FeatureRows};
use crate::error::{Error, Result};
use crate::events::{Event, EventBatch, EventStream};
use crate::surface::SurfaceTensor;

const NO_ROW: u32 = u32::MAX;

/// Per-pixel event rows of a batch.
///
/// Rows are ordered by `(sample, y, x)`. `data` is `rows × t_max × features`;
/// slots at positions `>= row_len[r]` are zero. `source` lists, for every
/// valid slot in row-major order, the index of the originating event within
/// its sample stream; `row_offset` are the prefix sums of `row_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedEvents {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub features: usize,
    pub t_max: usize,
    pub data: Vec<f64>,
    pub row_pixel: Vec<(u16, u16)>,
    pub row_sample: Vec<usize>,
    pub row_len: Vec<usize>,
    pub row_offset: Vec<usize>,
    pub source: Vec<usize>,
}

impl GroupedEvents {
    pub fn rows(&self) -> usize {
        self.row_len.len()
    }

    /// Feature vector of step `step` of row `row` (padding included).
    pub fn slot(&self, row: usize, step: usize) -> &[f64] {
        let i = (row * self.t_max + step) * self.features;
        &self.data[i..i + self.features]
    }

    pub fn slot_mut(&mut self, row: usize, step: usize) -> &mut [f64] {
        let i = (row * self.t_max + step) * self.features;
        let f = self.features;
        &mut self.data[i..i + f]
    }

    pub fn total_len(&self) -> usize {
        self.source.len()
    }

    /// Elements of the padded feature block alone.
    pub fn data_elements(&self) -> usize {
        self.data.len()
    }

    /// Elements of every buffer held by this structure.
    pub fn element_count(&self) -> usize {
        self.data.len()
            + 2 * self.row_pixel.len()
            + self.row_sample.len()
            + self.row_len.len()
            + self.row_offset.len()
            + self.source.len()
    }
}

/// Packs each sample's events into per-pixel rows.
///
/// `features[n]` must hold one row per event of sample `n`, all with the
/// same width.
pub fn group_by_pixel(batch: &EventBatch, features: &[FeatureRows]) -> Result<GroupedEvents> {
    let streams = batch.streams();
    if features.len() != streams.len() {
        return Err(Error::arg(format!(
            "{} feature blocks for {} samples",
            features.len(),
            streams.len()
        )));
    }
    let width_f = features.first().map_or(0, |f| f.width);
    for (n, (s, f)) in streams.iter().zip(features).enumerate() {
        if f.width != width_f || f.data.len() != s.len() * f.width {
            return Err(Error::arg(format!(
                "sample {n}: {} feature values of width {} for {} events (expected width {width_f})",
                f.data.len(),
                f.width,
                s.len()
            )));
        }
    }
    let (h, w) = (batch.height() as usize, batch.width() as usize);

    let mut counts = vec![0u32; h * w];
    let mut row_pixel = Vec::new();
    let mut row_sample = Vec::new();
    let mut row_len = Vec::new();
    let mut sample_rows = Vec::with_capacity(streams.len() + 1);
    sample_rows.push(0usize);
    for (n, s) in streams.iter().enumerate() {
        for e in &s.events {
            counts[e.y as usize * w + e.x as usize] += 1;
        }
        for (pix, c) in counts.iter_mut().enumerate() {
            if *c > 0 {
                row_pixel.push(((pix % w) as u16, (pix / w) as u16));
                row_sample.push(n);
                row_len.push(*c as usize);
                *c = 0;
            }
        }
        sample_rows.push(row_len.len());
    }

    let rows = row_len.len();
    let t_max = row_len.iter().copied().max().unwrap_or(0);
    let mut row_offset = Vec::with_capacity(rows + 1);
    row_offset.push(0);
    for &l in &row_len {
        row_offset.push(row_offset.last().unwrap() + l);
    }

    let mut data = vec![0.0; rows * t_max * width_f];
    let mut source = vec![0usize; row_offset[rows]];
    let mut row_of = vec![NO_ROW; h * w];
    let mut cursor = vec![0usize; rows];
    for (n, s) in streams.iter().enumerate() {
        let rows_n = sample_rows[n]..sample_rows[n + 1];
        for r in rows_n.clone() {
            let (x, y) = row_pixel[r];
            row_of[y as usize * w + x as usize] = r as u32;
        }
        for (i, e) in s.events.iter().enumerate() {
            let r = row_of[e.y as usize * w + e.x as usize] as usize;
            let k = cursor[r];
            cursor[r] += 1;
            let dst = (r * t_max + k) * width_f;
            data[dst..dst + width_f].copy_from_slice(features[n].row(i));
            source[row_offset[r] + k] = i;
        }
        for r in rows_n {
            let (x, y) = row_pixel[r];
            row_of[y as usize * w + x as usize] = NO_ROW;
        }
    }

    Ok(GroupedEvents {
        samples: streams.len(),
        height: h,
        width: w,
        features: width_f,
        t_max,
        data,
        row_pixel,
        row_sample,
        row_len,
        row_offset,
        source,
    })
}

/// A batch split into `B` consecutive time bins per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedBatch {
    /// `bins[b]` holds bin `b` of every sample.
    pub bins: Vec<EventBatch>,
    /// `bin_spans[b][n]`: nominal interval of bin `b` for sample `n`.
    pub bin_spans: Vec<Vec<(f64, f64)>>,
    /// `bin_ranges[b][n]`: index range of the bin's events in sample `n`.
    pub bin_ranges: Vec<Vec<Range<usize>>>,
    pub sample_spans: Vec<(f64, f64)>,
}

impl BinnedBatch {
    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }
}

/// `(t_first, t_last)` of every sample; empty samples get `(0, 0)`.
pub fn sample_spans(batch: &EventBatch) -> Vec<(f64, f64)> {
    batch.streams().iter().map(|s| s.time_span().unwrap_or((0.0, 0.0))).collect()
}

/// Boundaries `t0 = e_0 < e_1 < … < e_B = t1` of `bins` equal-duration bins.
/// Bin `b` is `[e_b, e_{b+1})` except the last, which is closed.
pub fn bin_edges(span: (f64, f64), bins: usize) -> Vec<f64> {
    let (t0, t1) = span;
    let mut edges: Vec<f64> =
        (0..bins).map(|k| t0 + (t1 - t0) * (k as f64) / (bins as f64)).collect();
    edges.push(t1);
    edges
}

/// Splits each sample's own `[t_first, t_last]` into `bins` equal bins.
pub fn group_by_time(batch: &EventBatch, bins: usize) -> Result<BinnedBatch> {
    group_by_time_with_spans(batch, bins, &sample_spans(batch))
}

/// Like [`group_by_time`] with explicit per-sample spans.
pub fn group_by_time_with_spans(
    batch: &EventBatch,
    bins: usize,
    spans: &[(f64, f64)],
) -> Result<BinnedBatch> {
    if bins < 1 {
        return Err(Error::arg("bin count must be at least 1"));
    }
    if spans.len() != batch.len() {
        return Err(Error::arg(format!("{} spans for {} samples", spans.len(), batch.len())));
    }
    if let Some(s) = spans.iter().find(|s| !(s.0 <= s.1)) {
        return Err(Error::arg(format!("span {s:?} is reversed")));
    }
    let mut bin_ranges = vec![Vec::with_capacity(batch.len()); bins];
    let mut bin_spans = vec![Vec::with_capacity(batch.len()); bins];
    for (s, &span) in batch.streams().iter().zip(spans) {
        let edges = bin_edges(span, bins);
        let mut start = 0;
        for b in 0..bins {
            let end = if b + 1 == bins {
                s.len()
            } else {
                s.events.partition_point(|e| e.t < edges[b + 1]).max(start)
            };
            bin_ranges[b].push(start..end);
            bin_spans[b].push((edges[b], edges[b + 1]));
            start = end;
        }
    }
    let bin_batches = bin_ranges
        .iter()
        .map(|ranges| {
            let streams = batch
                .streams()
                .iter()
                .zip(ranges)
                .map(|(s, r)| EventStream {
                    width: s.width,
                    height: s.height,
                    events: s.events[r.clone()].to_vec(),
                })
                .collect();
            EventBatch::new(batch.width(), batch.height(), streams)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BinnedBatch { bins: bin_batches, bin_spans, bin_ranges, sample_spans: spans.to_vec() })
}

/// Placement of `K_H × K_W` receptive fields on a sensor.
///
/// The output grid is `⌈H/s_y⌉ × ⌈W/s_x⌉`. Borders are padded so that the
/// fields cover the sensor as evenly as possible: with
/// `pad = max((out − 1)·s + K − in, 0)` the field of output cell `u` starts
/// at `u·s − ⌊pad/2⌋`. For stride 1 this is the field centred on pixel `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl FieldGeometry {
    /// `kernel` and `stride` are `(rows, cols)`. Kernels must be odd.
    pub fn new(in_h: usize, in_w: usize, kernel: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        let (kh, kw) = kernel;
        let (sy, sx) = stride;
        if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::arg(format!("kernel {kh}x{kw} must have odd, positive sides")));
        }
        if sy == 0 || sx == 0 {
            return Err(Error::arg("stride must be at least 1"));
        }
        let out_h = in_h.div_ceil(sy);
        let out_w = in_w.div_ceil(sx);
        let pad = |out: usize, s: usize, k: usize, inp: usize| {
            ((out.saturating_sub(1) * s + k).saturating_sub(inp)) / 2
        };
        Ok(FieldGeometry {
            kernel,
            stride,
            in_h,
            in_w,
            out_h,
            out_w,
            pad_top: pad(out_h, sy, kh, in_h),
            pad_left: pad(out_w, sx, kw, in_w),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1)
    }

    /// Top-left pixel `(x, y)` of the field of output cell `(u, v)` (row, col).
    pub fn origin(&self, u: usize, v: usize) -> (i64, i64) {
        (
            (v * self.stride.1) as i64 - self.pad_left as i64,
            (u * self.stride.0) as i64 - self.pad_top as i64,
        )
    }

    fn cover(pos: usize, pad: usize, k: usize, s: usize, out: usize) -> Range<usize> {
        // u covers pos iff u·s − pad <= pos <= u·s − pad + k − 1
        let hi = pos + pad;
        let lo = hi as i64 - (k as i64 - 1);
        let first = if lo <= 0 { 0 } else { (lo as usize).div_ceil(s) };
        let last = (hi / s).min(out.saturating_sub(1));
        if out == 0 || first > last {
            0..0
        } else {
            first..last + 1
        }
    }

    /// Output rows and columns whose fields contain pixel `(x, y)`.
    pub fn fields_containing(&self, x: u16, y: u16) -> (Range<usize>, Range<usize>) {
        (
            Self::cover(y as usize, self.pad_top, self.kernel.0, self.stride.0, self.out_h),
            Self::cover(x as usize, self.pad_left, self.kernel.1, self.stride.1, self.out_w),
        )
    }
}

/// Events replicated into receptive fields, expressed on the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedBatch {
    pub geometry: FieldGeometry,
    /// Sample streams on the `out_w × out_h` grid; an event's `(x, y)` is its field.
    pub batch: EventBatch,
    /// `source[n][j]`: index in the input sample of replicated event `j`.
    pub source: Vec<Vec<usize>>,
    /// `coords[n][j]`: position of replicated event `j` inside its field.
    pub coords: Vec<Vec<(f64, f64)>>,
}

impl UnfoldedBatch {
    /// Copies source feature rows onto the replicated events, optionally
    /// appending the two coordinate columns.
    pub fn gather_features(&self, features: &[FeatureRows], with_coords: bool) -> Result<Vec<FeatureRows>> {
        if features.len() != self.source.len() {
            return Err(Error::arg("feature blocks do not match unfolded samples"));
        }
        Ok(features
            .iter()
            .zip(self.source.iter().zip(&self.coords))
            .map(|(f, (src, coords))| {
                let w = f.width + if with_coords { 2 } else { 0 };
                let mut out = FeatureRows::zeros(src.len(), w);
                for (j, (&i, &(px, py))) in src.iter().zip(coords).enumerate() {
                    let row = out.row_mut(j);
                    row[..f.width].copy_from_slice(f.row(i));
                    if with_coords {
                        row[f.width] = px;
                        row[f.width + 1] = py;
                    }
                }
                out
            })
            .collect())
    }
}

/// Replicates each event into every receptive field that contains it.
///
/// Replicas are emitted in input order, so every field sees its events in
/// their original temporal order and each output stream stays time-sorted.
pub fn unfold_receptive_fields(
    batch: &EventBatch,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<UnfoldedBatch> {
    let geometry = FieldGeometry::new(batch.height() as usize, batch.width() as usize, kernel, stride)?;
    let (out_w, out_h) = (geometry.out_w as u16, geometry.out_h as u16);
    let mut streams = Vec::with_capacity(batch.len());
    let mut source = Vec::with_capacity(batch.len());
    let mut coords = Vec::with_capacity(batch.len());
    for s in batch.streams() {
        let mut ev = Vec::new();
        let mut src = Vec::new();
        let mut xy = Vec::new();
        for (i, e) in s.events.iter().enumerate() {
            let (us, vs) = geometry.fields_containing(e.x, e.y);
            for u in us {
                for v in vs.clone() {
                    let c = receptive_coords((e.x, e.y), geometry.origin(u, v), kernel.0, kernel.1)?;
                    ev.push(Event { x: v as u16, y: u as u16, t: e.t, p: e.p });
                    src.push(i);
                    xy.push(c);
                }
            }
        }
        streams.push(EventStream { width: out_w, height: out_h, events: ev });
        source.push(src);
        coords.push(xy);
    }
    Ok(UnfoldedBatch {
        geometry,
        batch: EventBatch::new(out_w, out_h, streams)?,
        source,
        coords,
    })
}

/// Writes row `r` of `outputs` (`rows × channels`) to cell
/// `(row_sample[r], y, x)` of a zero surface.
pub fn scatter_last_outputs(outputs: &[f64], grouped: &GroupedEvents, channels: usize) -> Result<SurfaceTensor> {
    if outputs.len() != grouped.rows() * channels {
        return Err(Error::arg(format!(
            "{} output values for {} rows of {channels} channels",
            outputs.len(),
            grouped.rows()
        )));
    }
    let mut surface = SurfaceTensor::zeros(grouped.samples, grouped.height, grouped.width, channels);
    for (r, out) in outputs.chunks_exact(channels.max(1)).enumerate().take(grouped.rows()) {
        let (x, y) = grouped.row_pixel[r];
        surface
            .cell_mut(grouped.row_sample[r], y as usize, x as usize)
            .copy_from_slice(out);
    }
    Ok(surface)
}

/// Reads the cell of every row back out of a surface (inverse of scatter).
pub fn gather_last_outputs(surface: &SurfaceTensor, grouped: &GroupedEvents) -> Result<Vec<f64>> {
    if (surface.samples, surface.height, surface.width) != (grouped.samples, grouped.height, grouped.width) {
        return Err(Error::arg("surface geometry differs from grouped rows"));
    }
    let mut out = Vec::with_capacity(grouped.rows() * surface.channels);
    for r in 0..grouped.rows() {
        let (x, y) = grouped.row_pixel[r];
        out.extend_from_slice(surface.cell(grouped.row_sample[r], y as usize, x as usize));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(w: u16, h: u16, ev: &[(u16, u16, f64)]) -> EventStream {
        EventStream::new(w, h, ev.iter().map(|&(x, y, t)| Event::new(x, y, t, 1)).collect()).unwrap()
    }

    /// One feature column holding the event's index + 1 (so zero = padding).
    fn index_features(b: &EventBatch) -> Vec<FeatureRows> {
        b.streams()
            .iter()
            .map(|s| FeatureRows { width: 1, data: (1..=s.len()).map(|i| i as f64).collect() })
            .collect()
    }

    #[test]
    fn two_by_two_example() {
        let b = EventBatch::from_streams(vec![stream(2, 2, &[(0, 0, 1.0), (1, 0, 2.0), (0, 0, 3.0)])]).unwrap();
        let g = group_by_pixel(&b, &index_features(&b)).unwrap();
        assert_eq!(g.rows(), 2);
        assert_eq!(g.t_max, 2);
        assert_eq!(g.row_pixel, vec![(0, 0), (1, 0)]);
        assert_eq!(g.row_len, vec![2, 1]);
        assert_eq!(g.data, vec![1.0, 3.0, 2.0, 0.0]);
        assert_eq!(g.source, vec![0, 2, 1]);
    }

    #[test]
    fn empty_batch_groups_to_nothing() {
        let b = EventBatch::from_streams(vec![EventStream::empty(3, 3)]).unwrap();
        let g = group_by_pixel(&b, &[FeatureRows::zeros(0, 2)]).unwrap();
        assert_eq!((g.rows(), g.t_max), (0, 0));
        let s = scatter_last_outputs(&[], &g, 4).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn samples_get_separate_rows() {
        let a = stream(2, 2, &[(1, 1, 1.0)]);
        let b = stream(2, 2, &[(1, 1, 5.0)]);
        let batch = EventBatch::from_streams(vec![a, b]).unwrap();
        let g = group_by_pixel(&batch, &index_features(&batch)).unwrap();
        assert_eq!(g.row_sample, vec![0, 1]);
        assert_eq!(g.row_pixel, vec![(1, 1), (1, 1)]);
    }

    #[test]
    fn misaligned_features_rejected() {
        let b = EventBatch::from_streams(vec![stream(2, 2, &[(0, 0, 1.0)])]).unwrap();
        assert!(group_by_pixel(&b, &[FeatureRows::zeros(2, 1)]).is_err());
        assert!(group_by_pixel(&b, &[]).is_err());
    }

    #[test]
    fn time_bins_follow_half_open_rule() {
        let b = EventBatch::from_streams(vec![stream(2, 2, &[(0, 0, 10.0), (0, 0, 50.0), (0, 0, 60.0)])]).unwrap();
        let binned = group_by_time_with_spans(&b, 2, &[(0.0, 100.0)]).unwrap();
        assert_eq!(binned.bin_ranges[0][0], 0..1);
        assert_eq!(binned.bin_ranges[1][0], 1..3);
        assert_eq!(binned.bin_spans[1][0], (50.0, 100.0));

        let one = group_by_time(&b, 1).unwrap();
        assert_eq!(one.bins[0], b);
        assert!(group_by_time(&b, 0).is_err());
    }

    #[test]
    fn last_bin_is_closed() {
        let b = EventBatch::from_streams(vec![stream(2, 2, &[(0, 0, 0.0), (0, 0, 100.0)])]).unwrap();
        let binned = group_by_time(&b, 4).unwrap();
        let sizes: Vec<usize> = binned.bin_ranges.iter().map(|r| r[0].len()).collect();
        assert_eq!(sizes, vec![1, 0, 0, 1]);
    }

    #[test]
    fn identity_unfold() {
        let b = EventBatch::from_streams(vec![stream(3, 2, &[(2, 1, 1.0), (0, 0, 2.0)])]).unwrap();
        let u = unfold_receptive_fields(&b, (1, 1), (1, 1)).unwrap();
        assert_eq!(u.batch, b);
        assert_eq!(u.source, vec![vec![0, 1]]);
        assert!(u.coords[0].iter().all(|&c| c == (0.0, 0.0)));
    }

    #[test]
    fn center_event_reaches_all_nine_fields() {
        let b = EventBatch::from_streams(vec![stream(3, 3, &[(1, 1, 1.0)])]).unwrap();
        let u = unfold_receptive_fields(&b, (3, 3), (1, 1)).unwrap();
        let s = &u.batch.streams()[0];
        assert_eq!(s.len(), 9);
        let mut seen: Vec<((u16, u16), (f64, f64))> =
            s.events.iter().zip(&u.coords[0]).map(|(e, &c)| ((e.x, e.y), c)).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Field at output (x, y) is centred on pixel (x, y); the event at (1, 1)
        // sits at relative position (1 - x + 1) / 2.
        for ((x, y), (px, py)) in seen {
            assert_eq!(px, (2.0 - x as f64) / 2.0);
            assert_eq!(py, (2.0 - y as f64) / 2.0);
        }
    }

    #[test]
    fn non_overlapping_cover() {
        let ev: Vec<(u16, u16, f64)> =
            (0..9).map(|i| ((i % 3) as u16, (i / 3) as u16, i as f64)).collect();
        let b = EventBatch::from_streams(vec![stream(3, 3, &ev)]).unwrap();
        let u = unfold_receptive_fields(&b, (3, 3), (3, 3)).unwrap();
        assert_eq!((u.geometry.out_h, u.geometry.out_w), (1, 1));
        assert_eq!(u.source[0], (0..9).collect::<Vec<_>>());
        assert_eq!(u.coords[0][0], (0.0, 0.0));
        assert_eq!(u.coords[0][8], (1.0, 1.0));
    }

    #[test]
    fn even_kernel_rejected() {
        let b = EventBatch::from_streams(vec![EventStream::empty(4, 4)]).unwrap();
        assert!(unfold_receptive_fields(&b, (2, 3), (1, 1)).is_err());
        assert!(unfold_receptive_fields(&b, (3, 3), (0, 1)).is_err());
    }

    #[test]
    fn scatter_single_and_dense() {
        let b = EventBatch::from_streams(vec![stream(2, 2, &[(1, 0, 1.0)])]).unwrap();
        let g = group_by_pixel(&b, &index_features(&b)).unwrap();
        let s = scatter_last_outputs(&[1.0, 2.0, 3.0], &g, 3).unwrap();
        assert_eq!(s.cell(0, 0, 1), &[1.0, 2.0, 3.0]);
        assert_eq!(s.data.iter().filter(|&&v| v != 0.0).count(), 3);
        assert!(scatter_last_outputs(&[1.0], &g, 3).is_err());

        let all: Vec<(u16, u16, f64)> = (0..4).map(|i| ((i % 2) as u16, (i / 2) as u16, i as f64)).collect();
        let b = EventBatch::from_streams(vec![stream(2, 2, &all)]).unwrap();
        let g = group_by_pixel(&b, &index_features(&b)).unwrap();
        let outs: Vec<f64> = (0..8).map(f64::from).collect();
        let s = scatter_last_outputs(&outs, &g, 2).unwrap();
        assert_eq!(s.data, outs);
        assert_eq!(gather_last_outputs(&s, &g).unwrap(), outs);
    }
}
