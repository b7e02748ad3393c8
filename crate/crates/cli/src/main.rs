use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use evsurface::checks::{self, DENSE_TOLERANCE, GRAD_TOLERANCE, NAIVE_TOLERANCE};
use evsurface::event_io::read_event_file_unchecked;
use evsurface::harness::bench::{improvement_svg, records_to_csv, run_benchmark, BenchGrid, Pass};
use evsurface::harness::synth::ToyTaskSpec;
use evsurface::harness::toy::{default_toy_layer, train_toy_classifier};
use evsurface::surface::{encode_pgm, encode_srf1};
use evsurface::{Error, EventBatch, EventFormat, FeatureConfig, LayerConfig, LstmParams, MatrixLstm, SeParams};

#[derive(Debug, Parser)]
#[command(name = "evsurface", version, about = "Learned event-camera surfaces")]
struct Cli {
    /// Worker threads.
    #[arg(long, global = true, env = "EVSURFACE_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check an event file and list every violation.
    Validate {
        events: PathBuf,
        #[command(flatten)]
        geometry: Geometry,
    },
    /// Turn an event file into a surface.
    Reconstruct(ReconstructArgs),
    /// Compare analytic layer gradients with finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Compare the grouped layer with the dense reference implementations.
    EquivCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Train on the synthetic moving-bar task and save the LSTM checkpoint.
    TrainToy {
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// LSTM checkpoint; SE parameters go to `<output>.se`.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Time and memory sweep of the grouped and dense paths.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct Geometry {
    /// Sensor width, required for CSV input.
    #[arg(long)]
    width: Option<u16>,
    /// Sensor height, required for CSV input.
    #[arg(long)]
    height: Option<u16>,
}

impl Geometry {
    fn get(&self) -> Option<(u16, u16)> {
        self.width.zip(self.height)
    }
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    events: PathBuf,
    #[command(flatten)]
    geometry: Geometry,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 1)]
    bins: usize,
    /// Comma-separated: polarity, ts_abs, ts_rel, delay_rel, ts_global, ts_local, coords.
    #[arg(long, default_value = "polarity,delay_rel")]
    features: FeatureConfig,
    /// Odd receptive-field side.
    #[arg(long, default_value_t = 1)]
    kernel: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    se: bool,
    /// LSTM checkpoint; freshly initialized from `--seed` when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, requires = "se")]
    se_params: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `.pgm` writes an 8-bit image of channel 0, anything else SRF1.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0])]
    densities: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 8, 64])]
    batches: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [8])]
    channels: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [4])]
    events_per_pixel: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "forward")]
    passes: Vec<Pass>,
    #[arg(long, default_value_t = 64)]
    height: u16,
    #[arg(long, default_value_t = 64)]
    width: u16,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<Error>(), Some(Error::Argument(_) | Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Validate { events, geometry } => validate(&events, &geometry),
        Command::Reconstruct(args) => reconstruct(&args),
        Command::GradCheck { seed, instances } => {
            let r = checks::grad_check(seed, instances)?;
            println!("instances: {}  compared: {}", r.instances, r.compared);
            println!("max relative error: {:.3e}", r.max_rel_error);
            println!("max absolute error: {:.3e}", r.max_abs_error);
            if !r.passed() {
                bail!("relative error exceeds {GRAD_TOLERANCE:e}");
            }
            Ok(())
        }
        Command::EquivCheck { seed, instances } => {
            let r = checks::equiv_check(seed, instances)?;
            println!("instances: {}  events: {}", r.instances, r.events);
            println!("max abs diff vs dense ConvLSTM: {:.3e}", r.max_diff_dense);
            println!("max abs diff vs per-pixel loop: {:.3e}", r.max_diff_naive);
            if !r.passed() {
                bail!("differences exceed {DENSE_TOLERANCE:e} (dense) or {NAIVE_TOLERANCE:e} (per-pixel)");
            }
            Ok(())
        }
        Command::TrainToy { epochs, lr, seed, output } => train_toy(epochs, lr, seed, &output),
        Command::Bench(args) => bench(&args, cli.threads),
    }
}

fn validate(path: &Path, geometry: &Geometry) -> anyhow::Result<()> {
    let stream = read_event_file_unchecked(path, EventFormat::from_path(path), geometry.get())
        .with_context(|| format!("reading {}", path.display()))?;
    let report = stream.validate();
    println!("{} events, {}x{}", stream.len(), stream.width, stream.height);
    let n = report.len();
    println!("{n} violation{}", if n == 1 { "" } else { "s" });
    for v in &report.violations {
        println!("  {v}");
    }
    if !report.is_empty() {
        bail!("{} is not a valid event stream", path.display());
    }
    Ok(())
}

fn reconstruct(args: &ReconstructArgs) -> anyhow::Result<()> {
    let stream = read_event_file_unchecked(&args.events, EventFormat::from_path(&args.events), args.geometry.get())
        .with_context(|| format!("reading {}", args.events.display()))?;
    let report = stream.validate();
    if !report.is_empty() {
        println!("{report}");
        bail!("{} is not a valid event stream", args.events.display());
    }
    let config = LayerConfig::new(args.channels, args.bins, args.features.clone())
        .with_fields((args.kernel, args.kernel), (args.stride, args.stride))
        .with_se(args.se);
    let mut model = MatrixLstm::new(config, args.seed)?;
    if let Some(p) = &args.params {
        model.lstm = LstmParams::load(p).with_context(|| format!("loading {}", p.display()))?;
    }
    if let Some(p) = &args.se_params {
        model.se = Some(SeParams::decode(&fs::read(p)?).with_context(|| format!("loading {}", p.display()))?);
    }
    let batch = EventBatch::from_streams(vec![stream])?;
    let surface = model.reconstruct(&batch)?;
    let is_pgm = args
        .output
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let bytes = if is_pgm { encode_pgm(&surface, 0)? } else { encode_srf1(&surface, 0)? };
    fs::write(&args.output, bytes).with_context(|| format!("writing {}", args.output.display()))?;
    println!(
        "wrote {} ({}x{}x{})",
        args.output.display(),
        surface.height,
        surface.width,
        surface.channels
    );
    Ok(())
}

fn train_toy(epochs: usize, lr: f64, seed: u64, output: &Path) -> anyhow::Result<()> {
    let spec = ToyTaskSpec { seed, ..ToyTaskSpec::default() };
    let report = train_toy_classifier(&spec, &default_toy_layer(), epochs, lr, seed)?;
    println!("epoch  train_loss  train_acc  test_acc");
    println!("    -           -          -  {:8.3}", report.initial_test_accuracy);
    for s in &report.history {
        println!("{:5}  {:10.4}  {:9.3}  {:8.3}", s.epoch + 1, s.train_loss, s.train_accuracy, s.test_accuracy);
    }
    report.model.lstm.save(output).with_context(|| format!("writing {}", output.display()))?;
    if let Some(se) = &report.model.se {
        let mut p = output.as_os_str().to_owned();
        p.push(".se");
        fs::write(&p, se.encode())?;
    }
    println!("saved {}", output.display());
    Ok(())
}

fn bench(args: &BenchArgs, threads: usize) -> anyhow::Result<()> {
    let grid = BenchGrid {
        height: args.height,
        width: args.width,
        densities: args.densities.clone(),
        batches: args.batches.clone(),
        channels: args.channels.clone(),
        events_per_pixel: args.events_per_pixel.clone(),
        passes: args.passes.clone(),
        warmup: args.warmup,
        runs: args.runs,
        seed: args.seed,
        ..BenchGrid::default()
    };
    let records = run_benchmark(&grid, threads)?;
    for r in &records {
        println!("{}", r.csv_line());
    }
    fs::write(&args.output, records_to_csv(&records)).with_context(|| format!("writing {}", args.output.display()))?;
    if let Some(svg) = &args.svg {
        fs::write(svg, improvement_svg(&records)).with_context(|| format!("writing {}", svg.display()))?;
    }
    Ok(())
}
