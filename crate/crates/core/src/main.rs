//! Command line front end.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure,
//! 4 I/O or file format error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use sphere_bsa::bsa::{bench_attention, log_log_slope, AttentionConfig, Branches, Variant, ROPE_THETA};
use sphere_bsa::config::FlatConfig;
use sphere_bsa::diagnostics::{
    aliasing_demo, ensemble_metrics, gmsp_drift, spectral_ratio, AliasSignal, Nonlinearity, Sht,
};
use sphere_bsa::error::{Error, Result};
use sphere_bsa::grid::LatLonGrid;
use sphere_bsa::healpix::HealpixMesh;
use sphere_bsa::model::{Model, ModelConfig};
use sphere_bsa::msgt;
use sphere_bsa::synth::{self, Dataset, SynthConfig};
use sphere_bsa::tensor::Tensor;
use sphere_bsa::training::{self, checkpoint, fit, generate_ensemble, LoopConfig, LossWeights, TrainConfig, Trainer};

const THREADS_ENV: &str = "SPHERE_BSA_THREADS";
const RUN_MANIFEST: &str = "run_manifest.txt";
const FORECAST_META: &str = "forecast.txt";

#[derive(Parser)]
#[command(name = "sphere-bsa", version, about = "HEALPix block-sparse attention forecasting toolkit")]
#[command(after_help = "Environment: SPHERE_BSA_THREADS caps worker threads.\n\
Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect HEALPix meshes.
    #[command(subcommand)]
    Mesh(MeshCommand),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Pretrain a model on a dataset.
    Train(TrainArgs),
    /// Finetune a checkpoint with autoregressive rollouts.
    Finetune(FinetuneArgs),
    /// Run an ensemble forecast from a checkpoint.
    Forecast(ForecastArgs),
    /// Score a forecast against the dataset it started from.
    Eval(EvalArgs),
    /// Spherical power spectra and spectral ratios.
    Spectra(SpectraArgs),
    /// Spectral aliasing of a nonlinearity on coarse and native meshes.
    AliasDemo(AliasArgs),
    /// Timing benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Subcommand)]
enum MeshCommand {
    /// Pixel count, resolution and block layout of one mesh.
    Info {
        #[arg(long)]
        nside: usize,
        /// Block size to report the partition for.
        #[arg(long)]
        block: Option<usize>,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Attention core wall time against sequence length.
    Attention(BenchArgs),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Take grid and channel count from a model preset (toy, desk, paper).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    grid_h: Option<usize>,
    #[arg(long)]
    grid_w: Option<usize>,
    /// Number of dynamic channels.
    #[arg(long)]
    channels: Option<usize>,
    /// Number of time steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Largest spherical-harmonic degree of every field.
    #[arg(long)]
    band_limit: Option<usize>,
    /// Solid-body rotation per step in degrees.
    #[arg(long)]
    rotation_deg: Option<f64>,
    /// Relative noise amplitude.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    checkpoint_out: PathBuf,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    checkpoint_in: Option<PathBuf>,
    /// Model preset (toy, desk, paper).
    #[arg(long)]
    model: Option<String>,
    /// Number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Samples per step.
    #[arg(long)]
    batch: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Validate every this many steps (0 disables).
    #[arg(long)]
    val_every: Option<usize>,
    /// Number of validation samples.
    #[arg(long)]
    val_samples: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Autoregressive rollout length (1, 2, 4, 8 or 12).
    #[arg(long)]
    rollout: usize,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset providing the initial condition.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for member-step files.
    #[arg(long)]
    out: PathBuf,
    /// Ensemble members.
    #[arg(long)]
    members: Option<usize>,
    /// Autoregressive steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Index of the first history state; defaults to the start of the validation range.
    #[arg(long)]
    start: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Forecast directory written by `forecast`.
    #[arg(long)]
    forecast: PathBuf,
    /// Dataset with the verifying states.
    #[arg(long)]
    truth: PathBuf,
    /// CSV report to write.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SpectraArgs {
    /// MSGT field files `[points, channels]`; spectra are averaged over them.
    #[arg(long, required = true, num_args = 1..)]
    field: Vec<PathBuf>,
    /// Reference files for spectral ratios.
    #[arg(long, num_args = 1..)]
    reference: Vec<PathBuf>,
    /// Channel index.
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// Largest degree.
    #[arg(long, default_value_t = 48)]
    nmax: usize,
    /// Grid rows; inferred from a 1:2 aspect ratio when absent.
    #[arg(long)]
    grid_h: Option<usize>,
    #[arg(long)]
    grid_w: Option<usize>,
    /// Power spectrum table (degree, power).
    #[arg(long)]
    out: PathBuf,
    /// Ratio table (degree, ratio); defaults to `<out>.ratio.dat`.
    #[arg(long)]
    ratio_out: Option<PathBuf>,
    /// Report amplitude instead of power ratios.
    #[arg(long)]
    amplitude: bool,
}

#[derive(Args)]
struct AliasArgs {
    #[arg(long, default_value_t = 16)]
    native: usize,
    /// Coarse nsides, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
    coarse: Vec<usize>,
    /// identity or square.
    #[arg(long, default_value = "square")]
    nonlinearity: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Table of (coarse nside, degree, native ratio, coarse ratio).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Sequence lengths, comma separated and ascending.
    #[arg(long, value_delimiter = ',', default_value = "8192,16384,32768,65536")]
    lengths: Vec<usize>,
    /// Variants among bsa, nsa, dense, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "bsa,dense")]
    variant: Vec<String>,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Query heads per key/value head.
    #[arg(long, default_value_t = 1)]
    gqa: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 64)]
    block: usize,
    #[arg(long, default_value_t = 64)]
    local_block: usize,
    #[arg(long, default_value_t = 8)]
    top_n: usize,
    /// Timed repetitions per point; the median is reported.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Include the backward pass.
    #[arg(long)]
    backward: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV of (length, variant, ms, macs).
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Mesh(MeshCommand::Info { nside, block }) => cmd_mesh(nside, block),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a, None),
        Command::Finetune(a) => cmd_train(a.train, Some(a.rollout)),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Spectra(a) => cmd_spectra(a),
        Command::AliasDemo(a) => cmd_alias(a),
        Command::Bench(BenchCommand::Attention(a)) => cmd_bench(a),
    }
}

/// Config file entries overridden by the flags that were given.
fn effective_config(common: &Common, overrides: &[(&str, Option<String>)]) -> Result<FlatConfig> {
    let mut cfg = match &common.config {
        Some(path) => FlatConfig::load(path)?,
        None => FlatConfig::new(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", seed);
    }
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, v);
        }
    }
    Ok(cfg)
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Records command, version, effective config and wall time of a run.
fn write_manifest(path: &Path, command: &str, cfg: &FlatConfig, inputs: &[(&str, &Path)], start: Instant) -> Result<()> {
    let mut m = FlatConfig::new();
    m.set("run.command", command);
    m.set("run.version", env!("CARGO_PKG_VERSION"));
    for (name, p) in inputs {
        m.set(&format!("run.input.{name}"), p.display());
    }
    m.set("run.wall_seconds", format!("{:.3}", start.elapsed().as_secs_f64()));
    m.merge(cfg);
    write_text(path, &m.render())
}

fn cmd_mesh(nside: usize, block: Option<usize>) -> Result<()> {
    let mesh = HealpixMesh::new(nside)?;
    println!("nside {nside}");
    println!("npix {}", mesh.npix());
    println!("resolution {:.2} deg", mesh.resolution_deg());
    if let Some(b) = block {
        let blocks = mesh.blocks(b)?;
        println!("blocks {} of {b} pixels", blocks.count());
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg = effective_config(
        &a.common,
        &[
            ("grid_h", opt(&a.grid_h)),
            ("grid_w", opt(&a.grid_w)),
            ("channels", opt(&a.channels)),
            ("steps", opt(&a.steps)),
            ("band_limit", opt(&a.band_limit)),
            ("rotation_deg", opt(&a.rotation_deg)),
            ("noise", opt(&a.noise)),
        ],
    )?;
    if let Some(name) = a.preset.as_deref().or(cfg.raw("preset")).map(str::to_string) {
        let m = ModelConfig::preset(&name)?;
        for (key, value) in [("grid_h", m.grid_h), ("grid_w", m.grid_w), ("channels", m.c_dyn)] {
            if !cfg.contains(key) {
                cfg.set(key, value);
            }
        }
        if !cfg.contains("static_fields") {
            cfg.set("static_fields", m.c_static.saturating_sub(3));
        }
        cfg.set("preset", name);
    }
    let synth = SynthConfig::from_flat(&cfg)?;
    synth::generate(&synth, &a.out)?;
    synth.write_flat(&mut cfg);
    write_manifest(&a.out.join(RUN_MANIFEST), "synth", &cfg, &[], start)?;
    println!("wrote {} states of {}x{} with {} channels to {}", synth.steps, synth.grid_h, synth.grid_w, synth.channels.len(), a.out.display());
    Ok(())
}

/// Model config from preset and keys, with grid and channel counts taken from the data.
fn model_for_data(cfg: &FlatConfig, data: &Dataset<f32>) -> Result<ModelConfig> {
    let mut m = ModelConfig::from_flat(cfg)?;
    m.grid_h = data.grid.h;
    m.grid_w = data.grid.w;
    m.c_dyn = data.channels().len();
    m.c_static = data.config.static_channels();
    m.validate()?;
    Ok(m)
}

fn cmd_train(a: TrainArgs, rollout: Option<usize>) -> Result<()> {
    let start = Instant::now();
    let mut cfg = effective_config(
        &a.common,
        &[
            ("model", a.model.clone()),
            ("steps", opt(&a.steps)),
            ("batch", opt(&a.batch)),
            ("lr", opt(&a.lr)),
            ("val_every", opt(&a.val_every)),
            ("val_samples", opt(&a.val_samples)),
            ("rollout", opt(&rollout)),
        ],
    )?;
    let data = Dataset::<f32>::load(&a.data)?;
    let (model_cfg, params) = match &a.checkpoint_in {
        Some(dir) => {
            let (m, p) = checkpoint::load::<f32>(dir)?;
            if (m.grid_h, m.grid_w, m.c_dyn) != (data.grid.h, data.grid.w, data.channels().len()) {
                return Err(Error::config("checkpoint does not match the dataset grid or channels"));
            }
            (m, p)
        }
        None => {
            if rollout.is_some() {
                return Err(Error::config("finetune needs --checkpoint-in"));
            }
            let m = model_for_data(&cfg, &data)?;
            let p = Model::<f32>::new(m.clone())?.init_params(cfg.get_or("seed", 0)?);
            (m, p)
        }
    };
    model_cfg.write_flat(&mut cfg);

    let steps: usize = cfg.get_or("steps", 100)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let k: usize = cfg.get_or("rollout", 1)?;
    let mut train_cfg = match rollout {
        None => TrainConfig::pretrain(steps, seed),
        Some(k) => TrainConfig::finetune(k, steps, seed)?,
    };
    if let Some(lr) = cfg.get::<f64>("lr")? {
        train_cfg.schedule.floor *= lr / train_cfg.schedule.peak;
        train_cfg.schedule.peak = lr;
    }
    if let Some(ratio) = cfg.get::<f64>("matrix_lr_ratio")? {
        train_cfg.matrix_lr_ratio = ratio;
    }
    let loop_cfg = LoopConfig {
        steps,
        batch: cfg.get_or("batch", 1)?,
        rollout: k,
        val_every: cfg.get_or("val_every", (steps / 10).max(1))?,
        val_samples: cfg.get_or("val_samples", 8)?,
        seed,
    };

    let model = Model::<f32>::new(model_cfg.clone())?;
    let weights = LossWeights::for_channels(&data.grid, data.channels())?;
    let mut trainer = Trainer::new(model, params, weights, train_cfg)?;
    fs::create_dir_all(&a.checkpoint_out).map_err(|e| Error::io(&a.checkpoint_out, e))?;
    let mut log = String::from("step,loss,grad_norm,lr\n");
    let mut val = String::from("step,val_loss\n");
    fit(
        &mut trainer,
        &data,
        &loop_cfg,
        |r| {
            let _ = writeln!(log, "{},{:.6e},{:.6e},{:.6e}", r.step, r.loss, r.grad_norm, r.lr);
            Ok(())
        },
        |step, loss| {
            let _ = writeln!(val, "{step},{loss:.6e}");
            eprintln!("step {step} validation loss {loss:.4}");
            Ok(())
        },
    )?;
    checkpoint::save(&a.checkpoint_out, &model_cfg, &trainer.params)?;
    write_text(&a.checkpoint_out.join("loss.csv"), &log)?;
    write_text(&a.checkpoint_out.join("validation.csv"), &val)?;
    cfg.set("peak_tape_ops", trainer.peak_tape());
    let command = if rollout.is_some() { "finetune" } else { "train" };
    let mut inputs = vec![("data", a.data.as_path())];
    if let Some(dir) = &a.checkpoint_in {
        inputs.push(("checkpoint", dir.as_path()));
    }
    write_manifest(&a.checkpoint_out.join(RUN_MANIFEST), command, &cfg, &inputs, start)
}

fn member_file(member: usize, step: usize) -> String {
    format!("member_{member:03}_step_{step:03}.msgt")
}

fn cmd_forecast(a: ForecastArgs) -> Result<()> {
    let start_time = Instant::now();
    let mut cfg = effective_config(&a.common, &[("members", opt(&a.members)), ("steps", opt(&a.steps)), ("start", opt(&a.start))])?;
    let (model_cfg, params) = checkpoint::load::<f32>(&a.checkpoint)?;
    let data = Dataset::<f32>::load(&a.data)?;
    let model = Model::<f32>::new(model_cfg.clone())?;
    let history = model_cfg.history;
    let members: usize = cfg.get_or("members", training::INFERENCE_MEMBERS)?;
    let steps: usize = cfg.get_or("steps", 10)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let start = match cfg.get::<usize>("start")? {
        Some(s) => s,
        None => training::split_samples(data.num_samples(history, 1))?.1.start,
    };
    if members == 0 || steps == 0 {
        return Err(Error::config("forecast needs at least one member and one step"));
    }
    let initial = data.sample(start, history, 1)?.input;
    let base = start + history - 1;
    let ensemble = generate_ensemble(&model, &params, &initial, members, steps, seed, |j| data.time(base + j))?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (m, traj) in ensemble.iter().enumerate() {
        for (j, y) in traj.iter().enumerate() {
            msgt::write(&a.out.join(member_file(m, j)), &data.stats.denormalize(y)?)?;
        }
    }
    for (key, value) in [("members", members), ("steps", steps), ("start", start), ("history", history)] {
        cfg.set(key, value);
    }
    cfg.set("seed", seed);
    write_text(&a.out.join(FORECAST_META), &cfg.render())?;
    write_manifest(
        &a.out.join(RUN_MANIFEST),
        "forecast",
        &cfg,
        &[("checkpoint", a.checkpoint.as_path()), ("data", a.data.as_path())],
        start_time,
    )?;
    println!("wrote {} member-step files to {}", members * steps, a.out.display());
    Ok(())
}

/// Column `c` of a `[points, C]` tensor.
fn channel(t: &Tensor<f32>, c: usize) -> Vec<f64> {
    let width = t.shape()[1];
    t.data().iter().skip(c).step_by(width).map(|&v| f64::from(v)).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6e}"))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let start_time = Instant::now();
    let meta = FlatConfig::load(&a.forecast.join(FORECAST_META))?;
    let need = |key: &str| -> Result<usize> {
        meta.get(key)?.ok_or_else(|| Error::config(format!("forecast metadata lacks {key}")))
    };
    let (members, steps, start, history) = (need("members")?, need("steps")?, need("start")?, need("history")?);
    let data = Dataset::<f32>::load(&a.truth)?;
    let base = start + history - 1;
    if base + steps >= data.len() {
        return Err(Error::config(format!(
            "truth has {} states, forecast needs {}",
            data.len(),
            base + steps + 1
        )));
    }
    let forecast = (0..members)
        .map(|m| (0..steps).map(|j| msgt::read::<f32>(&a.forecast.join(member_file(m, j)))).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let grid = data.grid;
    let mut csv = String::from("variable,lead,rmse,nrmse,crps,spread,ssr,drift\n");
    for (c, name) in data.channels().iter().enumerate() {
        let fields: Vec<Vec<Vec<f64>>> = forecast.iter().map(|traj| traj.iter().map(|t| channel(t, c)).collect()).collect();
        let truth: Vec<Vec<f64>> = (1..=steps).map(|j| channel(&data.states[base + j], c)).collect();
        let rows = ensemble_metrics(&grid, &fields, &truth, data.stats.std[c])?;
        let mut trajectory = vec![channel(&data.states[base], c)];
        trajectory.extend((0..steps).map(|j| {
            let n = grid.len();
            (0..n).map(|p| fields.iter().map(|f| f[j][p]).sum::<f64>() / members as f64).collect()
        }));
        let drift = gmsp_drift(&grid, &trajectory)?;
        for row in rows {
            let _ = writeln!(
                csv,
                "{name},{},{:.6e},{:.6e},{},{},{},{:.6e}",
                row.lead + 1,
                row.rmse,
                row.nrmse,
                fmt_opt(row.crps),
                fmt_opt(row.spread),
                fmt_opt(row.ssr),
                drift[row.lead + 1]
            );
            if !(row.rmse.is_finite() && row.crps.is_none_or(f64::is_finite)) {
                return Err(Error::Numeric(format!("non-finite score for {name} at lead {}", row.lead + 1)));
            }
        }
    }
    write_text(&a.report, &csv)?;
    let manifest = a.report.with_extension("manifest.txt");
    write_manifest(
        &manifest,
        "eval",
        &meta,
        &[("forecast", a.forecast.as_path()), ("truth", a.truth.as_path())],
        start_time,
    )
}

fn infer_grid(points: usize, h: Option<usize>, w: Option<usize>) -> Result<LatLonGrid> {
    let (h, w) = match (h, w) {
        (Some(h), Some(w)) => (h, w),
        (Some(h), None) => (h, points / h.max(1)),
        (None, Some(w)) => (points / w.max(1), w),
        (None, None) => {
            let h = ((points / 2) as f64).sqrt().round() as usize;
            (h, 2 * h)
        }
    };
    if h * w != points {
        return Err(Error::config(format!("{points} points do not form a {h}x{w} grid")));
    }
    LatLonGrid::new(h, w)
}

fn spectra_of(files: &[PathBuf], channel_index: usize, a: &SpectraArgs) -> Result<(Vec<Vec<f64>>, LatLonGrid)> {
    let mut spectra = Vec::new();
    let mut grid = None;
    for f in files {
        let t = msgt::read::<f64>(f)?;
        let (points, channels) = if t.rank() == 1 { (t.numel(), 1) } else { t.dims2()? };
        if channel_index >= channels {
            return Err(Error::OutOfRange { index: channel_index, limit: channels });
        }
        let g = infer_grid(points, a.grid_h, a.grid_w)?;
        if grid.is_some_and(|prev| prev != g) {
            return Err(Error::config("spectra inputs are on different grids"));
        }
        grid = Some(g);
        let field: Vec<f64> = t.data().iter().skip(channel_index).step_by(channels).copied().collect();
        spectra.push(Sht::new(g, a.nmax)?.power_spectrum(&field)?);
    }
    Ok((spectra, grid.expect("at least one file")))
}

fn cmd_spectra(a: SpectraArgs) -> Result<()> {
    let start = Instant::now();
    let (model, _) = spectra_of(&a.field, a.channel, &a)?;
    let mean: Vec<f64> = (0..=a.nmax).map(|n| model.iter().map(|s| s[n]).sum::<f64>() / model.len() as f64).collect();
    let mut table = String::from("# degree power\n");
    for (n, p) in mean.iter().enumerate() {
        let _ = writeln!(table, "{n} {p:.10e}");
    }
    write_text(&a.out, &table)?;
    if !a.reference.is_empty() {
        let (reference, _) = spectra_of(&a.reference, a.channel, &a)?;
        let ratio = spectral_ratio(&model, &reference, a.amplitude);
        let mut table = String::from(if a.amplitude { "# degree amplitude_ratio\n" } else { "# degree ratio\n" });
        for (n, r) in ratio.iter().enumerate() {
            let _ = writeln!(table, "{n} {}", r.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}")));
        }
        let path = a.ratio_out.clone().unwrap_or_else(|| a.out.with_extension("ratio.dat"));
        write_text(&path, &table)?;
    }
    let mut cfg = FlatConfig::new();
    cfg.set("channel", a.channel);
    cfg.set("nmax", a.nmax);
    cfg.set("fields", a.field.len());
    cfg.set("references", a.reference.len());
    write_manifest(&a.out.with_extension("manifest.txt"), "spectra", &cfg, &[], start)
}

fn cmd_alias(a: AliasArgs) -> Result<()> {
    let start = Instant::now();
    let nonlinearity = Nonlinearity::parse(&a.nonlinearity)?;
    let signal = AliasSignal::supra_nyquist(a.seed);
    let mut table = String::from("# coarse_nside degree native_ratio coarse_ratio\n");
    let mut cfg = FlatConfig::new();
    for &coarse in &a.coarse {
        let r = aliasing_demo(&signal, a.native, coarse, nonlinearity)?;
        for n in 0..r.coarse.len() {
            let _ = writeln!(table, "{coarse} {n} {} {}", fmt_opt(r.native[n]), fmt_opt(r.coarse[n]));
        }
        println!("coarse {coarse} band {}..={} excess {}", r.band.start(), r.band.end(), fmt_opt(r.excess));
        cfg.set(&format!("excess.{coarse}"), fmt_opt(r.excess));
    }
    write_text(&a.out, &table)?;
    cfg.set("native", a.native);
    cfg.set("nonlinearity", &a.nonlinearity);
    cfg.set("seed", a.seed);
    write_manifest(&a.out.with_extension("manifest.txt"), "alias-demo", &cfg, &[], start)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let start = Instant::now();
    let variants = a.variant.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>>>()?;
    let cfg = AttentionConfig {
        d_model: a.heads * a.head_dim,
        heads: a.heads,
        gqa_ratio: a.gqa,
        head_dim: a.head_dim,
        block: a.block,
        local_block: a.local_block,
        top_n: a.top_n,
        rope_theta: ROPE_THETA,
        branches: Branches::ALL,
        fixed_gates: None,
    };
    let rows = bench_attention(&cfg, &a.lengths, &variants, a.repeats, a.backward, a.seed)?;
    let mut csv = String::from("length,variant,ms,macs\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{:.3},{}", r.length, r.variant.name(), r.ms, r.macs);
        println!("{:>8} {:>6} {:>12.3} ms {:>16} MACs", r.length, r.variant.name(), r.ms, r.macs);
    }
    for v in &variants {
        let (xs, ys): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.variant == *v).map(|r| (r.length as f64, r.ms)).unzip();
        if xs.len() >= 2 {
            println!("{} log-log slope {:.3}", v.name(), log_log_slope(&xs, &ys));
        }
    }
    if let Some(path) = &a.csv {
        write_text(path, &csv)?;
        let mut m = FlatConfig::new();
        m.set("lengths", a.lengths.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
        m.set("variants", a.variant.join(","));
        m.set("repeats", a.repeats);
        m.set("seed", a.seed);
        write_manifest(&path.with_extension("manifest.txt"), "bench attention", &m, &[], start)?;
    }
    Ok(())
}
