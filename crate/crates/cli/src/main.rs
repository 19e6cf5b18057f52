//! `pulsekit` command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{debug, info};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use pulsekit::bench::{aggregate, match_events, run_sweep, score, write_summary_csv, MethodConfig, SweepPoint};
use pulsekit::detect::{find_clusters, reject_pileup};
use pulsekit::fit::{fit_pulses_with, select_order_with, FitOptions};
use pulsekit::io;
use pulsekit::shaping::Shaper;
use pulsekit::sim::simulate;
use pulsekit::sparse::{activations_to_events, default_regularization, sparse_deconvolve};
use pulsekit::spectrum::{
    decompound_areas, estimate_histogram, interval_areas, pileup_correct, pileup_forward, AmplitudeGrid,
};
use pulsekit::{AmplitudeSpectrum, PulseShape, SampledSignal, SimConfig};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn data_err(path: &Path) -> impl FnOnce(pulsekit::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn plain(e: pulsekit::Error) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "pulsekit", version, about = "Pulse-stream simulation, detection and spectrum estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a noisy pulse stream from a configuration.
    Simulate(SimulateArgs),
    /// Apply a pre-filter (matched, trapezoid, wiener) to a signal.
    Shape(ShapeArgs),
    /// Detect pulses or clusters in a signal.
    Detect(DetectArgs),
    /// Least-squares fit of N pulses, or automatic order selection.
    Fit(FitArgs),
    /// Sparse non-negative deconvolution.
    Sparse(SparseArgs),
    /// Amplitude histograms, pile-up correction and decompounding.
    Spectrum(SpectrumArgs),
    /// Run a benchmark sweep against simulated ground truth.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
struct PulseArgs {
    /// JSON file with a pulse shape (`{"kind":"double_exp","a":..,"b":..}`).
    #[arg(long, value_name = "PATH")]
    pulse: Option<PathBuf>,
    /// Slow decay rate of a double-exponential pulse.
    #[arg(long)]
    a: Option<f64>,
    /// Fast rate of a double-exponential pulse.
    #[arg(long)]
    b: Option<f64>,
}

impl PulseArgs {
    fn resolve(&self, base: Option<PulseShape>) -> CliResult<PulseShape> {
        let mut shape = match &self.pulse {
            Some(p) => read_json::<PulseShape>(p)?,
            None => base.unwrap_or(PulseShape::DoubleExp { a: 0.06, b: 0.15 }),
        };
        if self.a.is_some() || self.b.is_some() {
            let (a0, b0) = match shape {
                PulseShape::DoubleExp { a, b } => (a, b),
                PulseShape::Tabulated { .. } => (0.06, 0.15),
            };
            shape = PulseShape::DoubleExp {
                a: self.a.unwrap_or(a0),
                b: self.b.unwrap_or(b0),
            };
        }
        shape.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(shape)
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// SimConfig JSON; flags override its fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Generate arrivals before t = 0 so the stream starts stationary.
    #[arg(long)]
    warmup: bool,
    /// Line spectrum at this amplitude (replaces the configured spectrum).
    #[arg(long, value_name = "ALPHA")]
    line: Option<f64>,
    #[command(flatten)]
    pulse: PulseArgs,
    /// Output events CSV (`tau,alpha`).
    #[arg(long, value_name = "PATH")]
    events: PathBuf,
    /// Output noisy signal (`.csv`, or binary for `.bin`/`.pksg`/`.raw`).
    #[arg(long, value_name = "PATH")]
    signal: PathBuf,
    /// Optional noiseless signal.
    #[arg(long, value_name = "PATH")]
    clean: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
enum FilterKind {
    Matched,
    Trapezoid,
    Wiener,
}

#[derive(Args, Debug, Clone)]
struct FilterArgs {
    /// Filter JSON file (`{"filter":"trapezoid","rise_k":..,"flat_m":..}`).
    #[arg(long, value_name = "PATH")]
    filter_config: Option<PathBuf>,
    #[arg(long, value_enum)]
    filter: Option<FilterKind>,
    /// Trapezoid rise length in samples.
    #[arg(long)]
    rise_k: Option<usize>,
    /// Trapezoid flat-top length in samples.
    #[arg(long)]
    flat_m: Option<usize>,
    /// Trapezoid decay constant in samples (default: from the pulse).
    #[arg(long)]
    decay: Option<f64>,
    /// Wiener noise power per sample.
    #[arg(long)]
    noise_power: Option<f64>,
    /// Wiener prior signal power (default: pulse energy).
    #[arg(long)]
    prior_power: Option<f64>,
}

impl FilterArgs {
    fn resolve(&self, default: Shaper) -> CliResult<Shaper> {
        let base = match &self.filter_config {
            Some(p) => read_json::<Shaper>(p)?,
            None => default,
        };
        let kind = self.filter.unwrap_or(match base {
            Shaper::Matched => FilterKind::Matched,
            Shaper::Trapezoid { .. } => FilterKind::Trapezoid,
            Shaper::Wiener { .. } => FilterKind::Wiener,
        });
        Ok(match kind {
            FilterKind::Matched => Shaper::Matched,
            FilterKind::Trapezoid => {
                let (k0, m0, d0) = match base {
                    Shaper::Trapezoid { rise_k, flat_m, decay } => (rise_k, flat_m, decay),
                    _ => (20, 10, None),
                };
                Shaper::Trapezoid {
                    rise_k: self.rise_k.unwrap_or(k0),
                    flat_m: self.flat_m.unwrap_or(m0),
                    decay: self.decay.or(d0),
                }
            }
            FilterKind::Wiener => {
                let (n0, p0) = match base {
                    Shaper::Wiener {
                        noise_power,
                        prior_power,
                    } => (Some(noise_power), prior_power),
                    _ => (None, None),
                };
                let noise_power = self
                    .noise_power
                    .or(n0)
                    .ok_or_else(|| CliError::Usage("wiener filter needs --noise-power".into()))?;
                Shaper::Wiener {
                    noise_power,
                    prior_power: self.prior_power.or(p0),
                }
            }
        })
    }
}

#[derive(Args, Debug)]
struct ShapeArgs {
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    #[arg(long, value_name = "PATH")]
    output: PathBuf,
    #[command(flatten)]
    pulse: PulseArgs,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
enum DetectMode {
    /// Pre-filter, then pick peaks (events CSV).
    Peaks,
    /// Above-threshold clusters of the raw signal (clusters CSV).
    Clusters,
    /// Pile-up peeling on the raw signal (events CSV).
    Peel,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    #[arg(long, value_name = "PATH")]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "peaks")]
    mode: DetectMode,
    /// Detection threshold: amplitude units for peaks, signal units otherwise.
    #[arg(long)]
    threshold: f64,
    /// Minimum peak separation in samples.
    #[arg(long, default_value_t = 5)]
    min_separation: usize,
    /// Reject clusters longer than this (time units); rejected ones go to --rejected.
    #[arg(long)]
    max_duration: Option<f64>,
    #[arg(long, value_name = "PATH")]
    rejected: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    max_pulses: usize,
    /// Noise standard deviation assumed by peeling.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[command(flatten)]
    pulse: PulseArgs,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Output JSON.
    #[arg(long, value_name = "PATH")]
    output: PathBuf,
    /// Number of pulses, or `auto` for residual-based order selection.
    #[arg(long, default_value = "auto")]
    n: String,
    /// Largest order tried by `auto`.
    #[arg(long, default_value_t = 4)]
    n_max: usize,
    /// Noise standard deviation (needed by `auto`).
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Initial arrival times, comma separated.
    #[arg(long, value_delimiter = ',')]
    init: Option<Vec<f64>>,
    /// First sample of the fitted window.
    #[arg(long)]
    from: Option<usize>,
    /// One past the last sample of the fitted window.
    #[arg(long)]
    to: Option<usize>,
    /// Also fit a pulse arriving before the window.
    #[arg(long)]
    phantom: bool,
    #[arg(long, default_value_t = 200)]
    max_sweeps: usize,
    #[command(flatten)]
    pulse: PulseArgs,
}

#[derive(Args, Debug)]
struct SparseArgs {
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Output activations CSV (`k,a`).
    #[arg(long, value_name = "PATH")]
    activations: PathBuf,
    /// Output merged events CSV.
    #[arg(long, value_name = "PATH")]
    events: Option<PathBuf>,
    /// Penalty weight; defaults to a noise-scaled value from --sigma.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    #[arg(long, default_value_t = 0.0)]
    min_alpha: f64,
    #[arg(long, default_value_t = 2)]
    merge_window: usize,
    #[command(flatten)]
    pulse: PulseArgs,
}

#[derive(Args, Debug)]
struct SpectrumArgs {
    /// Amplitudes (events CSV or one value per line), a histogram CSV for
    /// pile-up modes, or a signal for --decompound.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Output histogram CSV (`lo,hi,mass`).
    #[arg(long, value_name = "PATH")]
    output: PathBuf,
    /// Correct a measured histogram for two-pulse pile-up.
    #[arg(long, conflicts_with_all = ["decompound", "pileup_forward"])]
    pileup_correct: bool,
    /// Apply the two-pulse pile-up model to a histogram.
    #[arg(long, conflicts_with = "decompound")]
    pileup_forward: bool,
    /// Estimate the amplitude spectrum from interval areas of a signal.
    #[arg(long)]
    decompound: bool,
    /// Lower edge of the amplitude grid.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    lo: f64,
    /// Upper edge of the amplitude grid.
    #[arg(long, default_value_t = 10.0)]
    hi: f64,
    #[arg(long, default_value_t = 100)]
    bins: usize,
    /// Normalise the histogram (amplitude mode).
    #[arg(long)]
    normalize: bool,
    /// Pulse rate (pile-up and decompound modes).
    #[arg(long)]
    rate: Option<f64>,
    /// Coincidence window for pile-up modes.
    #[arg(long)]
    window: Option<f64>,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    /// Interval length for decompounding (time units).
    #[arg(long)]
    interval_len: Option<f64>,
    /// Boundary samples must be below this magnitude.
    #[arg(long, default_value_t = 0.01)]
    quiet_threshold: f64,
    /// Variance of the additive noise on each interval area.
    #[arg(long)]
    noise_var: Option<f64>,
    /// Characteristic-function diagnostics CSV (decompound).
    #[arg(long, value_name = "PATH")]
    diagnostics: Option<PathBuf>,
    #[command(flatten)]
    pulse: PulseArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Sweep JSON: `{"points":[..],"trials":k,"seed":s}` or a list of points.
    #[arg(long, value_name = "PATH", required_unless_present = "truth")]
    sweep: Option<PathBuf>,
    /// Score an events CSV against these true events instead of sweeping.
    #[arg(long, value_name = "PATH", requires = "estimated", conflicts_with = "sweep")]
    truth: Option<PathBuf>,
    /// Estimated events CSV scored against --truth.
    #[arg(long, value_name = "PATH", requires = "truth")]
    estimated: Option<PathBuf>,
    /// Matching tolerance for --truth scoring (time units).
    #[arg(long, default_value_t = 1.0)]
    time_tol: f64,
    /// Per-trial reports (JSON lines), or the score JSON with --truth.
    #[arg(long, value_name = "PATH")]
    output: PathBuf,
    /// Per-point summary CSV.
    #[arg(long, value_name = "PATH")]
    summary: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Record per-trial runtimes (makes the output non-reproducible).
    #[arg(long)]
    timings: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum SweepFile {
    Full {
        points: Vec<SweepPoint>,
        #[serde(default = "one")]
        trials: usize,
        #[serde(default)]
        seed: u64,
    },
    Points(Vec<SweepPoint>),
}

fn one() -> usize {
    1
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_signal(path: &Path) -> CliResult<SampledSignal> {
    io::read_signal(path).map_err(data_err(path))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// Writes the effective configuration next to a CSV output.
fn echo_config(path: &Path, config: &Value) -> CliResult<()> {
    let side = sidecar(path);
    let mut w = create(&side)?;
    serde_json::to_writer_pretty(&mut w, config).map_err(|e| CliError::Data(format!("{}: {e}", side.display())))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::Data(format!("{}: {e}", side.display())))
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serialises")
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    let mut cfg = match &args.config {
        Some(p) => read_json::<SimConfig>(p)?,
        None => SimConfig {
            rate: 0.01,
            duration: 1000.0,
            dt: 1.0,
            sigma: 0.0,
            shape: PulseShape::DoubleExp { a: 0.06, b: 0.15 },
            spectrum: AmplitudeSpectrum::line(1.0),
            seed: 0,
            warmup: false,
            fixed_events: None,
        },
    };
    cfg.shape = args.pulse.resolve(Some(cfg.shape.clone()))?;
    if let Some(v) = args.rate {
        cfg.rate = v;
    }
    if let Some(v) = args.duration {
        cfg.duration = v;
    }
    if let Some(v) = args.dt {
        cfg.dt = v;
    }
    if let Some(v) = args.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.line {
        cfg.spectrum = AmplitudeSpectrum::line(v);
    }
    cfg.warmup |= args.warmup;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    info!("simulating {} samples at rate {}", cfg.n_samples(), cfg.rate);
    let sim = simulate(&cfg).map_err(plain)?;
    info!("{} events", sim.events.len());
    io::write_events(&sim.events, &args.events).map_err(data_err(&args.events))?;
    io::write_signal(&sim.noisy, &args.signal).map_err(data_err(&args.signal))?;
    if let Some(p) = &args.clean {
        io::write_signal(&sim.clean, p).map_err(data_err(p))?;
    }
    let config = json!({ "command": "simulate", "config": to_value(&cfg) });
    echo_config(&args.events, &config)?;
    echo_config(&args.signal, &config)
}

fn cmd_shape(args: ShapeArgs) -> CliResult<()> {
    let shape = args.pulse.resolve(None)?;
    let filter = args.filter.resolve(Shaper::Matched)?;
    let signal = read_signal(&args.input)?;
    let out = filter.apply(&signal, &shape).map_err(data_err(&args.input))?;
    debug!("group delay {}, unit gain {}", out.group_delay, out.unit_gain);
    io::write_signal(&out.signal, &args.output).map_err(data_err(&args.output))?;
    echo_config(
        &args.output,
        &json!({
            "command": "shape",
            "input": args.input,
            "pulse": to_value(&shape),
            "filter": to_value(&filter),
            "group_delay": out.group_delay,
            "unit_gain": out.unit_gain,
        }),
    )
}

fn cmd_detect(args: DetectArgs) -> CliResult<()> {
    let shape = args.pulse.resolve(None)?;
    let signal = read_signal(&args.input)?;
    let mut config = json!({
        "command": "detect",
        "input": args.input,
        "mode": args.mode,
        "threshold": args.threshold,
        "pulse": to_value(&shape),
    });
    match args.mode {
        DetectMode::Peaks => {
            let filter = args.filter.resolve(Shaper::Matched)?;
            let method = MethodConfig::Peaks {
                shaper: filter,
                threshold: args.threshold,
                min_separation: args.min_separation,
            };
            let events = method
                .estimate(&signal, &shape, args.noise_sigma)
                .map_err(data_err(&args.input))?;
            info!("{} peaks", events.len());
            io::write_events(&events, &args.output).map_err(data_err(&args.output))?;
            config["method"] = to_value(&method);
        }
        DetectMode::Peel => {
            let method = MethodConfig::Peel {
                threshold: args.threshold,
                max_pulses: args.max_pulses,
            };
            let events = method
                .estimate(&signal, &shape, args.noise_sigma)
                .map_err(data_err(&args.input))?;
            info!("{} peeled pulses", events.len());
            io::write_events(&events, &args.output).map_err(data_err(&args.output))?;
            config["method"] = to_value(&method);
            config["noise_sigma"] = json!(args.noise_sigma);
        }
        DetectMode::Clusters => {
            let clusters = find_clusters(&signal, args.threshold).map_err(data_err(&args.input))?;
            let (kept, rejected) = match args.max_duration {
                Some(d) => reject_pileup(&clusters, d).map_err(plain)?,
                None => (clusters, Vec::new()),
            };
            info!("{} clusters kept, {} rejected", kept.len(), rejected.len());
            let w = create(&args.output)?;
            io::write_clusters_csv(&kept, w).map_err(data_err(&args.output))?;
            if let Some(p) = &args.rejected {
                io::write_clusters_csv(&rejected, create(p)?).map_err(data_err(p))?;
                echo_config(p, &config)?;
            }
            config["max_duration"] = json!(args.max_duration);
        }
    }
    echo_config(&args.output, &config)
}

fn cmd_fit(args: FitArgs) -> CliResult<()> {
    let shape = args.pulse.resolve(None)?;
    let full = read_signal(&args.input)?;
    let from = args.from.unwrap_or(0);
    let to = args.to.unwrap_or(full.len()).min(full.len());
    if from >= to {
        return Err(CliError::Usage(format!("empty window {from}..{to}")));
    }
    let signal = full.slice(from..to);
    let options = FitOptions {
        max_sweeps: args.max_sweeps,
        phantom: args.phantom,
    };
    let config = json!({
        "command": "fit",
        "input": args.input,
        "n": args.n,
        "n_max": args.n_max,
        "sigma": args.sigma,
        "init": args.init,
        "from": from,
        "to": to,
        "phantom": args.phantom,
        "max_sweeps": args.max_sweeps,
        "pulse": to_value(&shape),
    });
    let result = if args.n == "auto" {
        let sel = select_order_with(&signal, &shape, args.sigma, args.n_max, &options)
            .map_err(data_err(&args.input))?;
        info!("selected order {}", sel.order);
        to_value(&sel)
    } else {
        let n: usize = args
            .n
            .parse()
            .map_err(|_| CliError::Usage(format!("--n must be a count or `auto`, got {:?}", args.n)))?;
        let fit = fit_pulses_with(&signal, &shape, n, args.init.as_deref(), &options)
            .map_err(data_err(&args.input))?;
        to_value(&fit)
    };
    write_json(&args.output, &json!({ "config": config, "result": result }))
}

fn cmd_sparse(args: SparseArgs) -> CliResult<()> {
    let shape = args.pulse.resolve(None)?;
    let signal = read_signal(&args.input)?;
    let c = args
        .c
        .unwrap_or_else(|| default_regularization(args.sigma, signal.len(), &shape, signal.dt));
    let r = sparse_deconvolve(&signal, &shape, c, args.tol, args.max_iter).map_err(data_err(&args.input))?;
    if !r.converged {
        log::warn!("sparse solver stopped after {} iterations without converging", r.iterations);
    }
    let config = json!({
        "command": "sparse",
        "input": args.input,
        "c": c,
        "sigma": args.sigma,
        "tol": args.tol,
        "max_iter": args.max_iter,
        "min_alpha": args.min_alpha,
        "merge_window": args.merge_window,
        "pulse": to_value(&shape),
        "converged": r.converged,
        "iterations": r.iterations,
        "objective": r.objective,
    });
    io::write_activations_csv(&r.activations, create(&args.activations)?).map_err(data_err(&args.activations))?;
    echo_config(&args.activations, &config)?;
    if let Some(p) = &args.events {
        let events = activations_to_events(&r.activations, args.min_alpha, args.merge_window);
        io::write_events(&events, p).map_err(data_err(p))?;
        echo_config(p, &config)?;
    }
    Ok(())
}

fn read_amplitudes(path: &Path) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let header = text.lines().next().unwrap_or("");
    if header.split(',').any(|h| h.trim() == "alpha") {
        let events = io::read_events_csv(text.as_bytes()).map_err(data_err(path))?;
        Ok(events.iter().map(|e| e.alpha).collect())
    } else {
        io::read_values(text.as_bytes()).map_err(data_err(path))
    }
}

fn cmd_spectrum(args: SpectrumArgs) -> CliResult<()> {
    let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| CliError::Usage(format!("this mode needs --{flag}")));
    let mut config = json!({ "command": "spectrum", "input": args.input });
    let histogram = if args.pileup_correct || args.pileup_forward {
        let rate = need(args.rate, "rate")?;
        let window = need(args.window, "window")?;
        let f = File::open(&args.input).map_err(|e| CliError::Data(format!("{}: {e}", args.input.display())))?;
        let h = io::read_histogram_csv(f).map_err(data_err(&args.input))?;
        config["rate"] = json!(rate);
        config["window"] = json!(window);
        if args.pileup_forward {
            config["mode"] = json!("pileup_forward");
            pileup_forward(&h, rate, window).map_err(data_err(&args.input))?
        } else {
            config["mode"] = json!("pileup_correct");
            config["iters"] = json!(args.iters);
            let c = pileup_correct(&h, rate, window, args.iters).map_err(data_err(&args.input))?;
            config["residual"] = json!(c.residual);
            c.histogram
        }
    } else if args.decompound {
        let shape = args.pulse.resolve(None)?;
        let rate = need(args.rate, "rate")?;
        let len = need(args.interval_len, "interval-len")?;
        let signal = read_signal(&args.input)?;
        let areas = interval_areas(&signal, len, args.quiet_threshold).map_err(data_err(&args.input))?;
        info!("{} quiet intervals", areas.len());
        let grid = AmplitudeGrid {
            lo: args.lo,
            hi: args.hi,
            bins: args.bins,
        };
        let d = decompound_areas(&areas, rate, len, shape.area(), grid, args.noise_var)
            .map_err(data_err(&args.input))?;
        if let Some(p) = &args.diagnostics {
            let mut w = create(p)?;
            let mut body = String::from("omega,cf_abs,masked\n");
            for s in &d.diagnostics {
                body.push_str(&format!("{},{},{}\n", io::fmt17(s.omega), io::fmt17(s.cf_abs), s.masked));
            }
            w.write_all(body.as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        }
        config["mode"] = json!("decompound");
        config["rate"] = json!(rate);
        config["interval_len"] = json!(len);
        config["quiet_threshold"] = json!(args.quiet_threshold);
        config["noise_var"] = json!(args.noise_var);
        config["pulse"] = to_value(&shape);
        config["intervals"] = json!(areas.len());
        config["mu"] = json!(d.mu);
        config["cutoff"] = json!(d.cutoff);
        config["empty"] = json!(d.empty);
        config["mean"] = json!(if d.empty { None } else { Some(d.histogram.mean()) });
        d.histogram
    } else {
        if args.bins == 0 || !(args.hi > args.lo) {
            return Err(CliError::Usage("histogram needs --bins >= 1 and --hi > --lo".into()));
        }
        let amps = read_amplitudes(&args.input)?;
        let w = (args.hi - args.lo) / args.bins as f64;
        let edges: Vec<f64> = (0..=args.bins).map(|i| args.lo + i as f64 * w).collect();
        let h = estimate_histogram(&amps, &edges).map_err(plain)?;
        config["mode"] = json!("histogram");
        config["count"] = json!(amps.len());
        config["underflow"] = json!(h.underflow);
        config["overflow"] = json!(h.overflow);
        if args.normalize {
            h.normalized()
        } else {
            h
        }
    };
    config["lo"] = json!(args.lo);
    config["hi"] = json!(args.hi);
    config["bins"] = json!(args.bins);
    io::write_histogram_csv(&histogram, create(&args.output)?).map_err(data_err(&args.output))?;
    echo_config(&args.output, &config)
}

fn cmd_score(args: &BenchArgs, truth_path: &Path, est_path: &Path) -> CliResult<()> {
    let truth = io::read_events(truth_path).map_err(data_err(truth_path))?;
    let est = io::read_events(est_path).map_err(data_err(est_path))?;
    if !(args.time_tol >= 0.0) {
        return Err(CliError::Usage("--time-tol must be >= 0".into()));
    }
    let m = match_events(&truth, &est, args.time_tol);
    let s = score(&truth, &est, &m);
    write_json(
        &args.output,
        &json!({
            "config": {
                "command": "bench",
                "truth": truth_path,
                "estimated": est_path,
                "time_tol": args.time_tol,
            },
            "precision": s.precision,
            "recall": s.recall,
            "f1": s.f1,
            "tau_rmse": s.tau_rmse,
            "alpha_rmse": s.alpha_rmse,
            "n_truth": truth.len(),
            "n_estimated": est.len(),
            "n_matched": s.n_matched,
        }),
    )
}

fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    if let (Some(t), Some(e)) = (&args.truth, &args.estimated) {
        return cmd_score(&args, t, e);
    }
    let sweep = args.sweep.clone().expect("clap requires --sweep without --truth");
    let (points, mut trials, mut seed) = match read_json::<SweepFile>(&sweep)? {
        SweepFile::Full { points, trials, seed } => (points, trials, seed),
        SweepFile::Points(points) => (points, 1, 0),
    };
    if let Some(t) = args.trials {
        trials = t;
    }
    if let Some(s) = args.seed {
        seed = s;
    }
    if trials < 1 {
        return Err(CliError::Usage("--trials must be >= 1".into()));
    }
    let run = || run_sweep(&points, trials, seed, args.timings);
    let reports = match args.jobs {
        Some(0) => return Err(CliError::Usage("--jobs must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Data(e.to_string()))?
            .install(run),
        None => run(),
    }
    .map_err(data_err(&sweep))?;
    info!("{} reports", reports.len());
    let mut w = create(&args.output)?;
    for r in &reports {
        let line = serde_json::to_string(r).map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| CliError::Data(format!("{}: {e}", args.output.display())))?;
    }
    w.flush().map_err(|e| CliError::Data(format!("{}: {e}", args.output.display())))?;
    let config = json!({
        "command": "bench",
        "sweep": sweep,
        "points": to_value(&points),
        "trials": trials,
        "seed": seed,
        "timings": args.timings,
    });
    if let Some(p) = &args.summary {
        write_summary_csv(&aggregate(&reports), create(p)?).map_err(data_err(p))?;
        echo_config(p, &config)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Shape(a) => cmd_shape(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Sparse(a) => cmd_sparse(a),
        Command::Spectrum(a) => cmd_spectrum(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PULSEKIT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 1,
                CliError::Data(_) => 2,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(sidecar(Path::new("out/ev.csv")), PathBuf::from("out/ev.csv.config.json"));
    }

    #[test]
    fn filter_flags_override_config() {
        let args = FilterArgs {
            filter_config: None,
            filter: Some(FilterKind::Trapezoid),
            rise_k: Some(8),
            flat_m: None,
            decay: None,
            noise_power: None,
            prior_power: None,
        };
        assert_eq!(
            args.resolve(Shaper::Matched).unwrap(),
            Shaper::Trapezoid {
                rise_k: 8,
                flat_m: 10,
                decay: None
            }
        );
        let wiener = FilterArgs {
            filter: Some(FilterKind::Wiener),
            ..args
        };
        assert!(matches!(wiener.resolve(Shaper::Matched), Err(CliError::Usage(_))));
    }

    #[test]
    fn sweep_file_accepts_bare_point_list() {
        let f: SweepFile = serde_json::from_str("[]").unwrap();
        assert!(matches!(f, SweepFile::Points(p) if p.is_empty()));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
