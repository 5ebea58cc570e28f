//! Command-line front end: simulate scenes, train the reconstruction
//! pipeline, spectrally super-resolve multi-resolution inputs, unmix, score
//! reconstructions, and benchmark runtime scaling.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 environment
//! too noisy for benchmarking.

mod kv;

use clap::{Args, Parser, Subcommand};
use kv::KvConfig;
use specfuse::cube::{Cube, MultiResCube, SrtMatrix};
use specfuse::envi;
use specfuse::error::Error as CoreError;
use specfuse::learn::{load_checkpoint, save_checkpoint, PipelineConfig, TrainConfig};
use specfuse::metrics::{evaluate, MetricReport};
use specfuse::scaling::scaling_benchmark;
use specfuse::simulate::{
    default_hsi_wavelengths, simulate_pair, SceneSpec,
};
use specfuse::unfold::{run_unfolding, PhiMode, Strategy, UnfoldConfig, UnfoldParams};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "specfuse",
    about = "Spectral super-resolution of multi-resolution multispectral imagery",
    version
)]
struct Cli {
    /// Cap internal parallelism (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded ordered execution; outputs are byte-reproducible for
    /// a fixed seed either way.
    #[arg(long, global = true, default_value_t = false)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: ground-truth cube, multi-resolution
    /// input, response matrix, and the mixing model.
    Simulate(SimulateArgs),
    /// Train the unfolding + fusion pipeline on synthetic pairs.
    Train(TrainArgs),
    /// Reconstruct a hyperspectral cube from a multi-resolution input.
    Superresolve(SuperresolveArgs),
    /// Blind source separation: model order, endmembers, abundances.
    Unmix(UnmixArgs),
    /// Compare a reconstruction against a reference cube.
    Evaluate(EvaluateArgs),
    /// Runtime scaling benchmark over pixel counts.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene description file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    bands_h: Option<usize>,
    #[arg(long)]
    bands_m: Option<usize>,
    #[arg(long)]
    n_sources: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Gaussian blur applied before block decimation of coarse bands.
    #[arg(long)]
    blur_sigma: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of generated training pairs.
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    val_pairs: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    bands_h: Option<usize>,
    #[arg(long)]
    bands_m: Option<usize>,
    #[arg(long)]
    n_sources: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    blur_sigma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    phi_mode: Option<String>,
    /// Replace the spectral attention by its global average.
    #[arg(long, default_value_t = false)]
    no_spectral_attention: bool,
    /// Replace the spatial attention by its global average.
    #[arg(long, default_value_t = false)]
    no_spatial_attention: bool,
    /// Fixed response matrix (CSV); required for the mathematical strategy.
    #[arg(long)]
    srt: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV path.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SuperresolveArgs {
    /// Multi-resolution input cube (`.bsq` with `band classes` header).
    #[arg(long)]
    input: PathBuf,
    /// Trained checkpoint; optional for the mathematical strategy.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override the strategy (mathematical runs without a checkpoint).
    #[arg(long)]
    strategy: Option<String>,
    /// Response matrix CSV for the checkpoint-free mathematical mode.
    #[arg(long)]
    srt: Option<PathBuf>,
    /// Stage count for the checkpoint-free mathematical mode.
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    /// Target band count for the checkpoint-free mathematical mode.
    #[arg(long)]
    bands_h: Option<usize>,
}

#[derive(Args)]
struct UnmixArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Source count; estimated by MDL when omitted.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 12)]
    n_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Append the metric row to this CSV (header written when new).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the per-pixel spectral angle map as an ENVI cube.
    #[arg(long)]
    sam_map: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated side lengths (pixel counts are the squares).
    #[arg(long, default_value = "64,128,256,512")]
    sizes: String,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value = "learnable")]
    strategy: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the per-size timing table to this CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

struct CliError {
    code: i32,
    msg: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            msg: msg.into(),
        }
    }

    fn io(msg: impl Into<String>) -> Self {
        Self {
            code: 3,
            msg: msg.into(),
        }
    }

    fn env(msg: impl Into<String>) -> Self {
        Self {
            code: 4,
            msg: msg.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io(_) => CliError::io(e.to_string()),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<String> for CliError {
    fn from(msg: String) -> Self {
        CliError::config(msg)
    }
}

fn main() {
    let cli = Cli::parse();
    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.threads
    };
    if let Some(n) = threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .is_err()
        {
            eprintln!("error: thread pool already initialized");
            std::process::exit(4);
        }
    }
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Superresolve(args) => cmd_superresolve(args),
        Command::Unmix(args) => cmd_unmix(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Bench(args) => cmd_bench(args),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.msg);
        std::process::exit(e.code);
    }
}

fn load_kv(path: &Option<PathBuf>) -> Result<KvConfig, CliError> {
    match path {
        Some(p) => KvConfig::load(p).map_err(CliError::config),
        None => Ok(KvConfig::empty()),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn write_srt_csv(path: &Path, srt: &SrtMatrix<f64>) -> Result<(), CliError> {
    let d = srt.matrix();
    let mut s = String::new();
    let header: Vec<String> = (0..d.ncols()).map(|i| format!("hsi_band_{i}")).collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for row in d.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    write_text(path, &s)
}

fn read_srt_csv(path: &Path) -> Result<ndarray::Array2<f64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue; // header row
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|_| CliError::config(format!("bad SRT row {}", idx + 1)))?);
    }
    if rows.is_empty() {
        return Err(CliError::config("empty SRT file"));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::config("ragged SRT rows"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    ndarray::Array2::from_shape_vec((flat.len() / cols, cols), flat)
        .map_err(|e| CliError::config(format!("SRT shape: {e}")))
}

fn write_endmembers_csv(
    path: &Path,
    wavelengths: &[f64],
    endmembers: &ndarray::Array2<f64>,
) -> Result<(), CliError> {
    let n = endmembers.ncols();
    let mut s = String::from("wavelength");
    for i in 1..=n {
        s.push_str(&format!(",e{i}"));
    }
    s.push('\n');
    for (band, wl) in wavelengths.iter().enumerate() {
        s.push_str(&format!("{wl:?}"));
        for src in 0..n {
            s.push_str(&format!(",{:?}", endmembers[[band, src]]));
        }
        s.push('\n');
    }
    write_text(path, &s)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let kv = load_kv(&args.config)?;
    let spec = SceneSpec {
        width: kv.resolve("width", args.width, 24)?,
        height: kv.resolve("height", args.height, 24)?,
        bands_h: kv.resolve("bands_h", args.bands_h, 32)?,
        bands_m: kv.resolve("bands_m", args.bands_m, 6)?,
        n_sources: kv.resolve("n_sources", args.n_sources, 5)?,
        seed: kv.resolve("seed", args.seed, 0)?,
        noise_sigma: kv.resolve("noise_sigma", args.noise_sigma, 0.0)?,
    };
    let blur_sigma = kv.resolve("blur_sigma", args.blur_sigma, 0.8)?;
    kv.reject_unknown()?;
    spec.validate()?;

    println!("resolved config:");
    print!("{}", spec.to_kv());
    println!("blur_sigma = {blur_sigma:?}");

    let pair = simulate_pair(&spec, blur_sigma)?;
    ensure_dir(&args.out_dir)?;
    envi::write_envi_multires(&pair.y_s, args.out_dir.join("ys.bsq"))?;
    envi::write_envi(&pair.y_h, args.out_dir.join("gt.bsq"))?;
    write_srt_csv(&args.out_dir.join("srt.csv"), &pair.srt)?;
    write_endmembers_csv(
        &args.out_dir.join("endmembers.csv"),
        pair.y_h.wavelengths(),
        &pair.model.endmembers,
    )?;
    let abundances = Cube::new(
        pair.model.abundances.clone(),
        spec.width,
        spec.height,
        (1..=spec.n_sources).map(|i| i as f64).collect(),
    )?;
    envi::write_envi(&abundances, args.out_dir.join("abundances.bsq"))?;
    println!("wrote ys.bsq, gt.bsq, srt.csv, endmembers.csv, abundances.bsq to {}",
        args.out_dir.display());
    Ok(())
}

fn make_dataset(
    spec_base: &SceneSpec,
    blur_sigma: f64,
    count: usize,
    seed0: u64,
) -> Result<Vec<(MultiResCube<f64>, Cube<f64>)>, CliError> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let spec = SceneSpec {
            seed: seed0 + i as u64,
            ..spec_base.clone()
        };
        let pair = simulate_pair(&spec, blur_sigma)?;
        out.push((pair.y_s, pair.y_h));
    }
    Ok(out)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let kv = load_kv(&args.config)?;
    let scene = SceneSpec {
        width: kv.resolve("width", args.width, 24)?,
        height: kv.resolve("height", args.height, 24)?,
        bands_h: kv.resolve("bands_h", args.bands_h, 32)?,
        bands_m: kv.resolve("bands_m", args.bands_m, 6)?,
        n_sources: kv.resolve("n_sources", args.n_sources, 5)?,
        seed: 0,
        noise_sigma: kv.resolve("noise_sigma", args.noise_sigma, 0.0)?,
    };
    let blur_sigma = kv.resolve("blur_sigma", args.blur_sigma, 0.8)?;
    let pairs = kv.resolve("pairs", args.pairs, 64)?;
    let val_pairs = kv.resolve("val_pairs", args.val_pairs, 8)?;
    let epochs = kv.resolve("epochs", args.epochs, 40)?;
    let batch_size = kv.resolve("batch_size", args.batch_size, 2)?;
    let seed = kv.resolve("seed", args.seed, 0)?;
    let lambda = kv.resolve("lambda", args.lambda, 1e-4)?;
    let strategy = Strategy::parse(&kv.resolve(
        "strategy",
        args.strategy.clone(),
        "learnable".to_string(),
    )?)?;
    let stages = kv.resolve(
        "stages",
        args.stages,
        if strategy == Strategy::Mathematical { 20 } else { 4 },
    )?;
    let phi_mode = PhiMode::parse(&kv.resolve(
        "phi_mode",
        args.phi_mode.clone(),
        if strategy == Strategy::Mathematical {
            "exact".to_string()
        } else {
            "learned".to_string()
        },
    )?)?;
    let spectral_attention = !kv.resolve(
        "no_spectral_attention",
        if args.no_spectral_attention { Some(true) } else { None },
        false,
    )?;
    let spatial_attention = !kv.resolve(
        "no_spatial_attention",
        if args.no_spatial_attention { Some(true) } else { None },
        false,
    )?;
    kv.reject_unknown()?;
    scene.validate()?;

    if strategy == Strategy::Mathematical && args.srt.is_none() {
        return Err(CliError::config(
            "the mathematical strategy needs --srt (its response matrix is not trained)",
        ));
    }

    let n_hr = specfuse::simulate::default_band_classes(scene.bands_m)
        .iter()
        .filter(|c| **c == specfuse::cube::ResClass::Hr)
        .count();
    let pipeline = PipelineConfig {
        bands_h: scene.bands_h,
        bands_m: scene.bands_m,
        n_hr,
        stages,
        strategy,
        phi_mode,
        share_d: true,
        rho_init: if strategy == Strategy::Mathematical { 2.0 } else { 1.0 },
        rho_learnable: strategy != Strategy::Mathematical,
        denoiser_blocks: 2,
        denoiser_convs: 2,
        res_blocks: 2,
    };
    let mut cfg = TrainConfig::desk_default(default_hsi_wavelengths(scene.bands_h));
    cfg.epochs = epochs;
    cfg.batch_size = batch_size;
    cfg.seed = seed;
    cfg.lambda = lambda;
    cfg.pipeline = pipeline;
    cfg.spectral_attention = spectral_attention;
    cfg.spatial_attention = spatial_attention;

    println!("resolved config:");
    println!("pairs = {pairs}\nval_pairs = {val_pairs}\nepochs = {epochs}\nbatch_size = {batch_size}");
    println!("seed = {seed}\nlambda = {lambda:?}\nstrategy = {}\nstages = {stages}", strategy.as_str());
    println!("phi_mode = {}\nspectral_attention = {spectral_attention}\nspatial_attention = {spatial_attention}", phi_mode.as_str());
    print!("{}", scene.to_kv().replace("seed = 0\n", ""));
    println!("blur_sigma = {blur_sigma:?}");

    let train_set = make_dataset(&scene, blur_sigma, pairs, 1000 + seed)?;
    let val_set = make_dataset(&scene, blur_sigma, val_pairs, 900_000 + seed)?;

    let mut result = specfuse::learn::train(&train_set, &val_set, &cfg)?;
    if let Some(path) = &args.srt {
        // the response matrix was fixed during training for the mathematical
        // strategy; store the supplied one in the checkpoint
        let d = read_srt_csv(path)?;
        if d.dim() != (scene.bands_m, scene.bands_h) {
            return Err(CliError::config(format!(
                "SRT is {:?}, scene needs {}x{}",
                d.dim(),
                scene.bands_m,
                scene.bands_h
            )));
        }
        result.model.unfold.d[0] = d;
    }
    if result.aborted_nonfinite {
        println!("warning: training aborted on a non-finite loss; last good checkpoint kept");
    }
    save_checkpoint(&result.model, &args.out)?;
    if let Some(log) = &args.log {
        write_text(log, &result.log_csv())?;
    }
    let first = &result.log[0];
    let last = result.log.last().expect("at least epoch 0");
    println!(
        "trained {} epochs: train loss {:.6} -> {:.6}, val loss {:.6} -> {:.6}",
        last.epoch, first.train_loss, last.train_loss, first.val_loss, last.val_loss
    );
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

/// Train begins with a fixed response matrix for the mathematical strategy:
/// inject it before the run.
fn cmd_superresolve(args: SuperresolveArgs) -> Result<(), CliError> {
    let input: MultiResCube<f64> = envi::read_envi_multires(&args.input)?;
    let strategy_override = match &args.strategy {
        Some(s) => Some(Strategy::parse(s)?),
        None => None,
    };

    let (y_star, seconds, pixels) = match (&args.checkpoint, strategy_override) {
        (Some(ckpt_path), _) => {
            let model = load_checkpoint(ckpt_path)?;
            if model.cfg.bands_m != input.bands() {
                return Err(CliError::config(format!(
                    "checkpoint expects {} multispectral bands, input has {}",
                    model.cfg.bands_m,
                    input.bands()
                )));
            }
            let hr = input.hr_band_indices().len();
            if hr != model.cfg.n_hr {
                return Err(CliError::config(format!(
                    "checkpoint expects {} HR bands, input has {hr}",
                    model.cfg.n_hr
                )));
            }
            let t0 = Instant::now();
            let (_, y_star) = model.forward(&input)?;
            (y_star, t0.elapsed().as_secs_f64(), input.cube().pixels())
        }
        (None, Some(Strategy::Mathematical)) => {
            let srt_path = args.srt.as_ref().ok_or_else(|| {
                CliError::config("mathematical mode without a checkpoint needs --srt")
            })?;
            let d = read_srt_csv(srt_path)?;
            if d.nrows() != input.bands() {
                return Err(CliError::config(format!(
                    "SRT has {} rows, input has {} bands",
                    d.nrows(),
                    input.bands()
                )));
            }
            let bands_h = args.bands_h.unwrap_or(d.ncols());
            if bands_h != d.ncols() {
                return Err(CliError::config(format!(
                    "--bands-h {bands_h} conflicts with SRT width {}",
                    d.ncols()
                )));
            }
            let mut cfg = UnfoldConfig::mathematical(args.stages.unwrap_or(20));
            if let Some(rho) = args.rho {
                cfg.rho_init = rho;
            }
            let params = UnfoldParams::mathematical(
                d,
                cfg.rho_init,
                default_hsi_wavelengths(bands_h),
            );
            let t0 = Instant::now();
            // the solver output is the reconstruction here; no trained
            // fusion network exists without a checkpoint
            let y_tilde = run_unfolding(&input, &cfg, &params)?;
            (y_tilde, t0.elapsed().as_secs_f64(), input.cube().pixels())
        }
        (None, _) => {
            return Err(CliError::config(
                "--checkpoint is required unless --strategy mathematical with --srt",
            ));
        }
    };

    envi::write_envi(&y_star, &args.out)?;
    println!("timing: seconds={seconds:?} pixels={pixels}");
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_unmix(args: UnmixArgs) -> Result<(), CliError> {
    let cube: Cube<f64> = envi::read_envi(&args.input)?;
    let result = specfuse::bss::unmix(&cube, args.n, args.seed, args.n_max)?;
    ensure_dir(&args.out_dir)?;
    let maps = result.abundance_cube()?;
    envi::write_envi(&maps, args.out_dir.join("abundances.bsq"))?;
    for src in 0..result.n_sources {
        let band = result.abundance_band(src)?;
        envi::write_envi(&band, args.out_dir.join(format!("abundance_{}.bsq", src + 1)))?;
    }
    write_endmembers_csv(
        &args.out_dir.join("endmembers.csv"),
        cube.wavelengths(),
        &result.endmembers,
    )?;
    println!("n_sources = {}", result.n_sources);
    println!(
        "wrote abundances.bsq, {} per-source maps, endmembers.csv to {}",
        result.n_sources,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let x: Cube<f64> = envi::read_envi(&args.input)?;
    let reference: Cube<f64> = envi::read_envi(&args.reference)?;
    let report = evaluate(&x, &reference)?;
    print!("{}", report.table());
    println!("{}", MetricReport::csv_header());
    println!("{}", report.csv_row());
    if let Some(path) = &args.csv {
        let mut text = String::new();
        if !path.exists() {
            text.push_str(MetricReport::csv_header());
            text.push('\n');
        } else {
            text = std::fs::read_to_string(path)
                .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        }
        text.push_str(&report.csv_row());
        text.push('\n');
        write_text(path, &text)?;
    }
    if let Some(path) = &args.sam_map {
        envi::write_envi(&report.sam_map, path)?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let sides: Result<Vec<usize>, _> = args
        .sizes
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect();
    let sides = sides.map_err(|_| CliError::config(format!("bad --sizes '{}'", args.sizes)))?;
    let strategy = Strategy::parse(&args.strategy)?;
    let report = scaling_benchmark(&sides, args.reps, strategy, args.seed)?;
    println!(
        "strategy = {}, reps = {}, sizes = {:?}",
        strategy.as_str(),
        report.reps,
        report.entries.iter().map(|e| e.pixels).collect::<Vec<_>>()
    );
    print!("{}", report.csv());
    println!("fitted log-log slope = {:.4}", report.slope);
    if let Some(path) = &args.csv {
        write_text(path, &report.csv())?;
    }
    if report.noisy {
        return Err(CliError::env(
            "timing spread exceeded 50% of the median; machine too noisy",
        ));
    }
    Ok(())
}
