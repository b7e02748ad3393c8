//! Exit criteria. Every test prints one `PASS`/`FAIL` line and then asserts.
//!
//! Tests hold a shared lock so that the timing criteria never share the CPU
//! with another criterion.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evsurface::checks::{self, random_batch, random_features};
use evsurface::event_io::{read_event_file, write_event_file, EventFormat};
use evsurface::grouping::{group_by_pixel, group_by_time, sample_spans, FieldGeometry};
use evsurface::harness::bench::{dense_forward, grouped_forward, make_workload, time_median_interleaved};
use evsurface::harness::synth::{gen_density_sweep, ToyTaskSpec};
use evsurface::harness::toy::{default_toy_layer, train_toy_classifier};
use evsurface::layer::{encode_batch, layer_forward, layer_forward_with_spans, LayerConfig};
use evsurface::lstm::{backward_grouped, forward_grouped, LstmParams};
use evsurface::surface::{read_srf1, write_srf1};
use evsurface::{EventBatch, EventStream, MatrixLstm};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written straight to stdout so the line shows without `--nocapture`.
fn report(id: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {id} {verdict}  {name}: {detail}");
    let _ = out.flush();
}

// Tolerances and thresholds.
const EQUIV_INSTANCES: usize = 100;
const EQUIV_DENSE_TOL: f64 = 1e-9;
const EQUIV_NAIVE_TOL: f64 = 1e-12;
const EQUIV_TIME_LIMIT: Duration = Duration::from_secs(30);
const GRAD_INSTANCES: usize = 20;
const GRAD_REL_TOL: f64 = 1e-5;
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(120);
const ZERO_FILL_INSTANCES: usize = 1000;
const COMPOSITION_BINS: [usize; 3] = [2, 4, 8];
const COMPOSITION_INSTANCES: usize = 40;
const MASKING_INSTANCES: usize = 100;
const TOY_SEEDS: u64 = 5;
const TOY_REQUIRED_SEEDS: usize = 4;
const TOY_ACCURACY: f64 = 0.90;
const TOY_EPOCHS: usize = 30;
const TOY_LR: f64 = 1e-3;
const TOY_TIME_LIMIT: Duration = Duration::from_secs(300);
const BENCH_SIDE: u16 = 64;
const BENCH_CHANNELS: usize = 8;
const BENCH_EVENTS_PER_PIXEL: usize = 4;
const SPARSE_DENSITY: f64 = 0.10;
const SPARSE_BATCHES: [usize; 3] = [1, 8, 64];
const FULL_DENSITY_TIME_GAP: f64 = 0.20;
const FULL_DENSITY_WARMUP: usize = 3;
const FULL_DENSITY_RUNS: usize = 21;
const BATCH_SMALL: usize = 1;
const BATCH_LARGE: usize = 64;
const BATCH_SPEEDUP: f64 = 0.7;
const TIMED_RUNS: usize = 5;

#[test]
fn c1_oracle_equivalence() {
    let _g = serial();
    let start = Instant::now();
    let r = checks::equiv_check(0xe9, EQUIV_INSTANCES).unwrap();
    let elapsed = start.elapsed();
    let pass = r.instances >= EQUIV_INSTANCES
        && r.max_diff_dense <= EQUIV_DENSE_TOL
        && r.max_diff_naive <= EQUIV_NAIVE_TOL
        && elapsed < EQUIV_TIME_LIMIT;
    report(
        1,
        "grouped layer equals dense 1x1 ConvLSTM and per-pixel loop",
        pass,
        format!(
            "{} instances, {} events, max diff dense {:.1e} (<= {EQUIV_DENSE_TOL:e}), per-pixel {:.1e} (<= {EQUIV_NAIVE_TOL:e}), {:.2?}",
            r.instances, r.events, r.max_diff_dense, r.max_diff_naive, elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn c2_gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let r = checks::grad_check(0x9d, GRAD_INSTANCES).unwrap();
    let elapsed = start.elapsed();
    let pass = r.instances >= GRAD_INSTANCES && r.max_rel_error <= GRAD_REL_TOL && elapsed < GRAD_TIME_LIMIT;
    report(
        2,
        "analytic gradients match central differences",
        pass,
        format!(
            "{} instances, {} partials, max relative error {:.2e} (<= {GRAD_REL_TOL:e}), {:.2?}",
            r.instances, r.compared, r.max_rel_error, elapsed
        ),
    );
    assert!(pass);
}

fn random_config(rng: &mut ChaCha8Rng, se: bool) -> LayerConfig {
    let mut c = LayerConfig::new(rng.gen_range(1..=4), rng.gen_range(1..=4), random_features(rng, true))
        .with_se(se && rng.gen_bool(0.5));
    if rng.gen_bool(0.5) {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        c = c.with_fields((k, k), (rng.gen_range(1..=3), rng.gen_range(1..=3)));
    }
    c
}

#[test]
fn c3_zero_fill_is_exact() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(0x2e);
    let (mut inactive_blocks, mut bad) = (0usize, 0usize);
    for _ in 0..ZERO_FILL_INSTANCES {
        let batch = random_batch(&mut rng, 8, 3, 40);
        let config = random_config(&mut rng, true);
        let m = MatrixLstm::new(config.clone(), rng.gen()).unwrap();
        let surface = m.reconstruct(&batch).unwrap();
        let geom = FieldGeometry::new(batch.height() as usize, batch.width() as usize, config.kernel, config.stride)
            .unwrap();
        let bins = group_by_time(&batch, config.bins).unwrap();
        let c = config.channels;
        for n in 0..batch.len() {
            for (b, bin) in bins.bins.iter().enumerate() {
                for u in 0..geom.out_h {
                    for v in 0..geom.out_w {
                        let (ox, oy) = geom.origin(u, v);
                        let (kh, kw) = (config.kernel.0 as i64, config.kernel.1 as i64);
                        let active = bin.streams()[n].events.iter().any(|e| {
                            let (x, y) = (e.x as i64, e.y as i64);
                            x >= ox && x < ox + kw && y >= oy && y < oy + kh
                        });
                        if !active {
                            inactive_blocks += 1;
                            let block = &surface.cell(n, u, v)[b * c..(b + 1) * c];
                            if block.iter().any(|x| x.to_bits() != 0) {
                                bad += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let pass = bad == 0 && inactive_blocks > 0;
    report(
        3,
        "inactive cells are bitwise zero per bin block",
        pass,
        format!("{ZERO_FILL_INSTANCES} instances, {inactive_blocks} inactive blocks, {bad} nonzero"),
    );
    assert!(pass);
}

#[test]
fn c4_bin_compositionality() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(0xb1);
    let (mut compared, mut mismatches) = (0usize, 0usize);
    for &bins in &COMPOSITION_BINS {
        for _ in 0..COMPOSITION_INSTANCES {
            let batch = random_batch(&mut rng, 8, 3, 120);
            let mut config = random_config(&mut rng, false);
            config.bins = bins;
            let lstm = LstmParams::init(config.input_width(), config.channels, rng.gen()).unwrap();
            let (full, _) = layer_forward(&batch, &config, &lstm, None).unwrap();
            let spans = sample_spans(&batch);
            let binned = group_by_time(&batch, bins).unwrap();
            let single = LayerConfig { bins: 1, ..config.clone() };
            let c = config.channels;
            for (b, bin) in binned.bins.iter().enumerate() {
                let (part, _) = layer_forward_with_spans(bin, &spans, &single, &lstm, None).unwrap();
                compared += 1;
                if full.channel_slice(b * c, (b + 1) * c) != part {
                    mismatches += 1;
                }
            }
        }
    }
    let pass = mismatches == 0;
    report(
        4,
        "per-bin channel slices equal independent single-bin runs",
        pass,
        format!("B in {COMPOSITION_BINS:?}, {compared} bin slices compared, {mismatches} differ"),
    );
    assert!(pass);
}

#[test]
fn c5_masking_invariance() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(0x3a);
    let (mut padded, mut changed) = (0usize, 0usize);
    for _ in 0..MASKING_INSTANCES {
        let batch = random_batch(&mut rng, 6, 3, 80);
        let config = random_config(&mut rng, false);
        let feats = encode_batch(&batch, &config, &sample_spans(&batch)).unwrap();
        let mut grouped = group_by_pixel(&batch, &feats).unwrap();
        let lstm = LstmParams::init(grouped.features, config.channels, rng.gen()).unwrap();
        let (out, tape) = forward_grouped(&lstm, &grouped).unwrap();
        let d_out: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (grads, d_block) = backward_grouped(&tape, &d_out).unwrap();
        for r in 0..grouped.rows() {
            for k in grouped.row_len[r]..grouped.t_max {
                padded += 1;
                grouped.slot_mut(r, k).iter_mut().for_each(|v| *v = rng.gen_range(-1e3..1e3));
            }
        }
        let (out2, tape2) = forward_grouped(&lstm, &grouped).unwrap();
        let (grads2, d_block2) = backward_grouped(&tape2, &d_out).unwrap();
        if out != out2 || grads != grads2 || d_block != d_block2 {
            changed += 1;
        }
    }
    let pass = changed == 0 && padded > 0;
    report(
        5,
        "random padding changes no output or gradient",
        pass,
        format!("{MASKING_INSTANCES} instances, {padded} padded slots randomized, {changed} instances changed"),
    );
    assert!(pass);
}

#[test]
fn c6_toy_end_to_end_training() {
    let _g = serial();
    let start = Instant::now();
    let mut finals = Vec::new();
    for seed in 0..TOY_SEEDS {
        let spec = ToyTaskSpec { seed, ..ToyTaskSpec::default() };
        let r = train_toy_classifier(&spec, &default_toy_layer(), TOY_EPOCHS, TOY_LR, seed).unwrap();
        finals.push(r.final_test_accuracy());
    }
    let elapsed = start.elapsed();
    let good = finals.iter().filter(|&&a| a >= TOY_ACCURACY).count();
    let pass = good >= TOY_REQUIRED_SEEDS && elapsed < TOY_TIME_LIMIT;
    report(
        6,
        "moving-bar classifier trained through the layer",
        pass,
        format!(
            "held-out accuracy after {TOY_EPOCHS} epochs {finals:?}, {good}/{TOY_SEEDS} seeds >= {TOY_ACCURACY} (need {TOY_REQUIRED_SEEDS}), {:.1?}",
            elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn c7_sparse_memory_trend() {
    let _g = serial();
    let mut lines = Vec::new();
    let mut pass = true;
    for &batch in &SPARSE_BATCHES {
        let w = make_workload(BENCH_SIDE, BENCH_SIDE, SPARSE_DENSITY, batch, BENCH_CHANNELS, BENCH_EVENTS_PER_PIXEL, 0)
            .unwrap();
        let g = grouped_forward(&w).unwrap();
        let d = dense_forward(&w).unwrap();
        pass &= g < d;
        lines.push(format!("batch {batch}: {g} < {d}"));
    }
    let w = make_workload(BENCH_SIDE, BENCH_SIDE, 1.0, 1, BENCH_CHANNELS, BENCH_EVENTS_PER_PIXEL, 0).unwrap();
    let (tg, td) =
        time_median_interleaved(FULL_DENSITY_WARMUP, FULL_DENSITY_RUNS, || grouped_forward(&w), || dense_forward(&w))
            .unwrap();
    let gap = (tg - td).abs() / td;
    pass &= gap < FULL_DENSITY_TIME_GAP;
    report(
        7,
        "grouped path needs less memory when sparse, same time when full",
        pass,
        format!(
            "peak elements at density {SPARSE_DENSITY}: {}; density 1.0 grouped {tg:.3} ms vs dense {td:.3} ms, gap {:.1}% (< {}%)",
            lines.join(", "),
            100.0 * gap,
            100.0 * FULL_DENSITY_TIME_GAP
        ),
    );
    assert!(pass);
}

#[test]
fn c8_batch_throughput_trend() {
    let _g = serial();
    let workload = |batch: usize| {
        make_workload(BENCH_SIDE, BENCH_SIDE, SPARSE_DENSITY, batch, BENCH_CHANNELS, BENCH_EVENTS_PER_PIXEL, 0).unwrap()
    };
    let (ws, wl) = (workload(BATCH_SMALL), workload(BATCH_LARGE));
    let (ts, tl) = time_median_interleaved(1, TIMED_RUNS, || grouped_forward(&ws), || grouped_forward(&wl)).unwrap();
    let small = ts / BATCH_SMALL as f64;
    let large = tl / BATCH_LARGE as f64;
    let ratio = large / small;
    let pass = ratio <= BATCH_SPEEDUP;
    report(
        8,
        "larger batches lower the per-sample time",
        pass,
        format!(
            "per-sample {large:.4} ms at batch {BATCH_LARGE} vs {small:.4} ms at batch {BATCH_SMALL}, ratio {ratio:.3} (<= {BATCH_SPEEDUP}), {} worker(s) on {} CPU(s)",
            rayon::current_num_threads(),
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    );
    assert!(pass, "per-sample time ratio {ratio:.3} exceeds {BATCH_SPEEDUP}");
}

#[test]
fn c9_format_round_trips() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let stream = gen_density_sweep(32, 24, 0.3, 3, 5).unwrap();

    let evt = dir.path().join("events.evt");
    write_event_file(&stream, &evt, EventFormat::Binary).unwrap();
    let events_ok = read_event_file(&evt, EventFormat::Binary, None).unwrap() == stream;

    let model = MatrixLstm::new(
        LayerConfig::new(4, 2, "polarity,ts_rel,coords".parse().unwrap()).with_fields((3, 3), (2, 2)).with_se(true),
        3,
    )
    .unwrap();
    let ckpt = dir.path().join("model.mlp");
    model.lstm.save(&ckpt).unwrap();
    let params_ok = LstmParams::load(&ckpt).unwrap() == model.lstm;

    let surface = model.reconstruct(&EventBatch::from_streams(vec![stream.clone()]).unwrap()).unwrap();
    let srf = dir.path().join("surface.srf");
    write_srf1(&surface, 0, &srf).unwrap();
    let back = read_srf1(&srf).unwrap();
    let shape_ok = (back.height, back.width, back.channels) == (surface.height, surface.width, surface.channels);
    let srf_ok = shape_ok && back.data.iter().zip(&surface.data).all(|(b, s)| *b == f64::from(*s as f32));

    let empty = EventStream::empty(7, 5);
    let empty_path = dir.path().join("empty.evt");
    write_event_file(&empty, &empty_path, EventFormat::Binary).unwrap();
    let empty_ok = read_event_file(&empty_path, EventFormat::Binary, None).unwrap() == empty;

    let pass = events_ok && params_ok && srf_ok && empty_ok;
    report(
        9,
        "EVT1, checkpoint and SRF1 round trips",
        pass,
        format!(
            "EVT1 {} events exact: {events_ok}, empty EVT1 exact: {empty_ok}, checkpoint {} params exact: {params_ok}, SRF1 {}x{}x{} equal to f32: {srf_ok}",
            stream.len(),
            model.lstm.num_params(),
            surface.height,
            surface.width,
            surface.channels
        ),
    );
    assert!(pass);
}
