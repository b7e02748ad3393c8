//! Grouped versus dense timing and memory sweep.
//!
//! Both paths start from the same encoded features; encoding is outside the
//! timed region. Peak memory is the number of `f64`/index elements held by
//! processing buffers at their high-water mark. Model parameters and the raw
//! events are not counted.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use crate::encoding::{FeatureConfig, FeatureRows, TimeFeature};
use crate::error::{Error, Result};
use crate::events::{EventBatch, EventStream};
use crate::grouping::{group_by_pixel, sample_spans, scatter_last_outputs};
use crate::harness::synth::gen_density_sweep;
use crate::layer::{encode_batch, LayerConfig};
use crate::lstm::{backward_grouped, forward_grouped, infer_grouped, LstmParams};
use crate::oracle::{convlstm_1x1_forward_masked, densify_events};

pub const CSV_HEADER: &str = "path,density,batch,channels,events_per_pixel,pass,time_ms,peak_elements";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchPath {
    Grouped,
    Dense,
}

impl fmt::Display for BenchPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchPath::Grouped => "grouped",
            BenchPath::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pass {
    Forward,
    Backward,
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pass::Forward => "forward",
            Pass::Backward => "backward",
        })
    }
}

impl FromStr for Pass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "forward" | "fwd" => Ok(Pass::Forward),
            "backward" | "bwd" => Ok(Pass::Backward),
            other => Err(Error::arg(format!("unknown pass '{other}'"))),
        }
    }
}

/// One grid cell on one path. `time_ms` and `peak_elements` are `None` for
/// skipped cells.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub path: BenchPath,
    pub density: f64,
    pub batch: usize,
    pub channels: usize,
    pub events_per_pixel: usize,
    pub pass: Pass,
    pub time_ms: Option<f64>,
    pub peak_elements: Option<u64>,
}

impl BenchRecord {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "skipped".into());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.path,
            self.density,
            self.batch,
            self.channels,
            self.events_per_pixel,
            self.pass,
            opt(self.time_ms.map(|t| format!("{t:.6}"))),
            opt(self.peak_elements.map(|e| e.to_string())),
        )
    }
}

pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchGrid {
    pub height: u16,
    pub width: u16,
    pub densities: Vec<f64>,
    pub batches: Vec<usize>,
    pub channels: Vec<usize>,
    pub events_per_pixel: Vec<usize>,
    pub passes: Vec<Pass>,
    pub warmup: usize,
    pub runs: usize,
    pub seed: u64,
    /// Cells whose dense volume would exceed this many elements are skipped.
    pub max_elements: u64,
}

impl Default for BenchGrid {
    fn default() -> Self {
        BenchGrid {
            height: 64,
            width: 64,
            densities: vec![0.01, 0.05, 0.1, 0.25, 0.5, 1.0],
            batches: vec![1, 8, 64],
            channels: vec![8],
            events_per_pixel: vec![4],
            passes: vec![Pass::Forward],
            warmup: 1,
            runs: 5,
            seed: 0,
            max_elements: 400_000_000,
        }
    }
}

impl BenchGrid {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 5 {
            return Err(Error::config("at least 5 timed runs are required"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("sensor must be at least 1x1"));
        }
        if self.densities.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(Error::config("densities must lie in (0, 1]"));
        }
        if self.batches.contains(&0) || self.channels.contains(&0) || self.events_per_pixel.contains(&0) {
            return Err(Error::config("batch sizes, channels and events per pixel must be at least 1"));
        }
        Ok(())
    }
}

/// Encoded inputs of one benchmark cell. Sample `n` uses seed `seed + n`, so
/// the workload depends only on the grid parameters.
pub struct BenchWorkload {
    pub batch: EventBatch,
    pub features: Vec<FeatureRows>,
    pub params: LstmParams,
}

/// Features used by every benchmark: polarity and relative delay.
pub fn bench_layer(channels: usize) -> LayerConfig {
    let features = FeatureConfig::new(true, &[TimeFeature::DelayRelative], false).expect("non-empty feature set");
    LayerConfig::new(channels, 1, features)
}

pub fn make_workload(
    height: u16,
    width: u16,
    density: f64,
    batch: usize,
    channels: usize,
    events_per_pixel: usize,
    seed: u64,
) -> Result<BenchWorkload> {
    let streams = (0..batch)
        .map(|n| gen_density_sweep(height, width, density, events_per_pixel, seed.wrapping_add(n as u64)))
        .collect::<Result<Vec<EventStream>>>()?;
    let batch = EventBatch::new(width, height, streams)?;
    let config = bench_layer(channels);
    let features = encode_batch(&batch, &config, &sample_spans(&batch))?;
    let params = LstmParams::init(config.input_width(), channels, seed)?;
    Ok(BenchWorkload { batch, features, params })
}

/// Grouped forward: group, run every row, scatter. Returns the element
/// high-water mark.
pub fn grouped_forward(w: &BenchWorkload) -> Result<u64> {
    let grouped = group_by_pixel(&w.batch, &w.features)?;
    let outputs = infer_grouped(&w.params, &grouped)?;
    let surface = scatter_last_outputs(&outputs, &grouped, w.params.hidden_size())?;
    Ok((grouped.element_count() + outputs.len() + surface.data.len()) as u64)
}

/// Grouped forward with tape, then backward from an all-ones surface gradient.
pub fn grouped_backward(w: &BenchWorkload) -> Result<u64> {
    let grouped = group_by_pixel(&w.batch, &w.features)?;
    let (outputs, tape) = forward_grouped(&w.params, &grouped)?;
    let surface = scatter_last_outputs(&outputs, &grouped, w.params.hidden_size())?;
    let d_out = vec![1.0; outputs.len()];
    let (grads, d_block) = backward_grouped(&tape, &d_out)?;
    Ok((grouped.element_count()
        + tape.element_count()
        + outputs.len()
        + surface.data.len()
        + d_out.len()
        + d_block.len()
        + grads.num_params()) as u64)
}

/// Dense forward: densify into `N × T_max × H × W × F` and run the masked
/// time-major recurrence over every pixel.
pub fn dense_forward(w: &BenchWorkload) -> Result<u64> {
    let volume = densify_events(&w.batch, &w.features)?;
    let surface = convlstm_1x1_forward_masked(&volume, &w.params)?;
    Ok((volume.element_count() + 2 * surface.data.len()) as u64)
}

/// Element count of the dense volume for a cell, computed without building it.
pub fn dense_volume_elements(batch: usize, height: u16, width: u16, t_max: usize, features: usize) -> u64 {
    batch as u64 * t_max as u64 * height as u64 * width as u64 * features as u64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median wall time in milliseconds of `runs` calls after `warmup` calls, and
/// the element count reported by the last call.
pub fn time_median<F>(warmup: usize, runs: usize, mut f: F) -> Result<(f64, u64)>
where
    F: FnMut() -> Result<u64>,
{
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(runs);
    let mut elements = 0;
    for _ in 0..runs {
        let start = Instant::now();
        elements = f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((median(times), elements))
}

/// Like [`time_median`] for two workloads, with their calls alternated so
/// both see the same machine load.
pub fn time_median_interleaved<F, G>(warmup: usize, runs: usize, mut f: F, mut g: G) -> Result<(f64, f64)>
where
    F: FnMut() -> Result<u64>,
    G: FnMut() -> Result<u64>,
{
    for _ in 0..warmup {
        f()?;
        g()?;
    }
    let (mut tf, mut tg) = (Vec::with_capacity(runs), Vec::with_capacity(runs));
    for _ in 0..runs {
        let start = Instant::now();
        f()?;
        tf.push(start.elapsed().as_secs_f64() * 1e3);
        let start = Instant::now();
        g()?;
        tg.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((median(tf), median(tg)))
}

/// Runs the whole grid on a pool of `workers` threads.
///
/// The dense oracle is forward-only, so backward cells are emitted for the
/// grouped path only.
pub fn run_benchmark(grid: &BenchGrid, workers: usize) -> Result<Vec<BenchRecord>> {
    grid.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    pool.install(|| {
        let mut records = Vec::new();
        for &density in &grid.densities {
            for &batch in &grid.batches {
                for &channels in &grid.channels {
                    for &epp in &grid.events_per_pixel {
                        let work = make_workload(grid.height, grid.width, density, batch, channels, epp, grid.seed)?;
                        let f = work.params.input_size();
                        let dense_elems = dense_volume_elements(batch, grid.height, grid.width, epp, f);
                        for &pass in &grid.passes {
                            let record = |path, timed: Option<(f64, u64)>| BenchRecord {
                                path,
                                density,
                                batch,
                                channels,
                                events_per_pixel: epp,
                                pass,
                                time_ms: timed.map(|t| t.0),
                                peak_elements: timed.map(|t| t.1),
                            };
                            let grouped = match pass {
                                Pass::Forward => time_median(grid.warmup, grid.runs, || grouped_forward(&work))?,
                                Pass::Backward => time_median(grid.warmup, grid.runs, || grouped_backward(&work))?,
                            };
                            records.push(record(BenchPath::Grouped, Some(grouped)));
                            if pass == Pass::Forward {
                                let dense = if dense_elems > grid.max_elements {
                                    None
                                } else {
                                    Some(time_median(grid.warmup, grid.runs, || dense_forward(&work))?)
                                };
                                records.push(record(BenchPath::Dense, dense));
                            }
                        }
                    }
                }
            }
        }
        Ok(records)
    })
}

/// Relative time improvement `(dense − grouped) / dense` of forward cells,
/// one series per density, plotted against batch size.
pub fn improvement_svg(records: &[BenchRecord]) -> String {
    let mut series: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    for g in records.iter().filter(|r| r.path == BenchPath::Grouped && r.pass == Pass::Forward) {
        let dense = records.iter().find(|d| {
            d.path == BenchPath::Dense
                && d.pass == Pass::Forward
                && d.density == g.density
                && d.batch == g.batch
                && d.channels == g.channels
                && d.events_per_pixel == g.events_per_pixel
        });
        let (Some(tg), Some(td)) = (g.time_ms, dense.and_then(|d| d.time_ms)) else {
            continue;
        };
        if td <= 0.0 {
            continue;
        }
        let imp = (td - tg) / td;
        match series.iter_mut().find(|(d, _)| *d == g.density) {
            Some((_, pts)) => pts.push((g.batch, imp)),
            None => series.push((g.density, vec![(g.batch, imp)])),
        }
    }

    let (w, h, m) = (640.0, 400.0, 50.0);
    let batches: Vec<usize> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let bmin = batches.iter().copied().min().unwrap_or(1).max(1) as f64;
    let bmax = batches.iter().copied().max().unwrap_or(1).max(1) as f64;
    let (lmin, lmax) = (bmin.log2(), bmax.log2().max(bmin.log2() + 1.0));
    let ys: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).collect();
    let ymin = ys.iter().copied().fold(0.0, f64::min).min(-0.1);
    let ymax = ys.iter().copied().fold(0.0, f64::max).max(1.0);
    let px = |b: usize| m + ((b.max(1) as f64).log2() - lmin) / (lmax - lmin) * (w - 2.0 * m);
    let py = |v: f64| h - m - (v - ymin) / (ymax - ymin) * (h - 2.0 * m);
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"<line x1="{m}" y1="{y0:.1}" x2="{x1}" y2="{y0:.1}" stroke="#999" stroke-dasharray="4 3"/>"##,
        y0 = py(0.0),
        x1 = w - m
    );
    let _ = writeln!(svg, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{y}" stroke="black"/>"#, y = h - m);
    let _ = writeln!(svg, r#"<line x1="{m}" y1="{y}" x2="{x}" y2="{y}" stroke="black"/>"#, y = h - m, x = w - m);
    let _ = writeln!(svg, r#"<text x="{x}" y="{y}" text-anchor="middle">batch size</text>"#, x = w / 2.0, y = h - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{y}" text-anchor="middle" transform="rotate(-90 14 {y})">relative time improvement</text>"#,
        y = h / 2.0
    );
    let mut ticks = batches.clone();
    ticks.sort_unstable();
    ticks.dedup();
    for b in ticks {
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{y}" text-anchor="middle">{b}</text>"#, x = px(b), y = h - m + 16.0);
    }
    for v in [ymin, 0.0, ymax] {
        let _ = writeln!(svg, r#"<text x="{x}" y="{y:.1}" text-anchor="end">{v:.2}</text>"#, x = m - 4.0, y = py(v) + 4.0);
    }
    for (i, (density, pts)) in series.iter_mut().enumerate() {
        pts.sort_by_key(|p| p.0);
        let color = colors[i % colors.len()];
        let path: Vec<String> = pts.iter().map(|&(b, v)| format!("{:.1},{:.1}", px(b), py(v))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(b, v) in pts.iter() {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(b), py(v));
        }
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" fill="{color}">density {density}</text>"#,
            x = w - m - 100.0,
            y = m + 16.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Cell evaluations of one forward pass: the grouped path runs one per
/// event, the dense path `N·H·W·T_max`.
pub fn cell_work(batch: &EventBatch, dense: bool) -> u64 {
    if dense {
        let t_max = batch
            .streams()
            .iter()
            .map(|s| {
                let mut counts = vec![0u64; batch.height() as usize * batch.width() as usize];
                for e in &s.events {
                    counts[e.y as usize * batch.width() as usize + e.x as usize] += 1;
                }
                counts.into_iter().max().unwrap_or(0)
            })
            .max()
            .unwrap_or(0);
        batch.len() as u64 * batch.height() as u64 * batch.width() as u64 * t_max
    } else {
        batch.total_events() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_grid() -> BenchGrid {
        BenchGrid {
            height: 8,
            width: 8,
            densities: vec![0.1, 1.0],
            batches: vec![1, 2],
            channels: vec![2],
            events_per_pixel: vec![2],
            passes: vec![Pass::Forward, Pass::Backward],
            warmup: 0,
            runs: 5,
            seed: 3,
            max_elements: u64::MAX,
        }
    }

    #[test]
    fn grid_emits_both_paths() {
        let recs = run_benchmark(&tiny_grid(), 1).unwrap();
        assert_eq!(recs.len(), 2 * 2 * 3);
        assert!(recs.iter().all(|r| r.time_ms.is_some()));
        let csv = records_to_csv(&recs);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), recs.len() + 1);
        assert!(improvement_svg(&recs).contains("<polyline"));
    }

    #[test]
    fn sparse_grouped_uses_fewer_elements() {
        let recs = run_benchmark(&tiny_grid(), 1).unwrap();
        for g in recs.iter().filter(|r| r.path == BenchPath::Grouped && r.pass == Pass::Forward && r.density == 0.1) {
            let d = recs
                .iter()
                .find(|d| d.path == BenchPath::Dense && d.batch == g.batch && d.density == 0.1)
                .unwrap();
            assert!(g.peak_elements.unwrap() < d.peak_elements.unwrap());
        }
    }

    #[test]
    fn oversized_cells_are_skipped() {
        let grid = BenchGrid { max_elements: 10, passes: vec![Pass::Forward], ..tiny_grid() };
        let recs = run_benchmark(&grid, 1).unwrap();
        assert!(recs.iter().filter(|r| r.path == BenchPath::Dense).all(|r| r.time_ms.is_none()));
        assert!(records_to_csv(&recs).contains("skipped"));
    }

    #[test]
    fn workload_is_deterministic() {
        let a = make_workload(16, 16, 0.2, 3, 4, 2, 7).unwrap();
        let b = make_workload(16, 16, 0.2, 3, 4, 2, 7).unwrap();
        assert_eq!(a.batch, b.batch);
        assert_eq!(a.features, b.features);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn full_density_work_is_identical() {
        let w = make_workload(6, 5, 1.0, 2, 3, 3, 1).unwrap();
        assert_eq!(cell_work(&w.batch, false), cell_work(&w.batch, true));
        let w = make_workload(6, 5, 0.2, 2, 3, 3, 1).unwrap();
        assert!(cell_work(&w.batch, false) < cell_work(&w.batch, true));
    }
}
