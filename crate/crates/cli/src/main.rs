//! `naf`: simulate cone-beam scans, reconstruct them with a neural attenuation
//! field or a classical baseline, and score the result.
//!
//! Exit codes: 0 success, 1 compute failure, 2 usage or validation error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use naf_core::config::ExperimentConfig;
use naf_core::experiment::{self, Method, Manifest};
use naf_core::io;
use naf_core::metrics::Axis;
use naf_core::{Error, Result};

#[derive(Parser)]
#[command(name = "naf", version, about = "Sparse-view CT reconstruction with neural attenuation fields")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (TOML). Defaults to the manifest next to the
    /// input files when there is one, then to the built-in desk benchmark.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bitwise-deterministic training.
    #[arg(long, global = true)]
    strict: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom, its clean and noisy projections, and a manifest.
    Simulate {
        /// Output directory (default: `output_dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the noise fraction.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Reconstruct a volume from projections.
    Reconstruct {
        #[arg(long)]
        projections: PathBuf,
        /// naf, naf-frequency, fdk or sart.
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Ground truth to score against.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Output directory (default: `<output_dir>/<method>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a reconstruction against ground truth.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Resample the reconstruction onto the truth grid when sizes differ.
        #[arg(long)]
        resample: bool,
        /// Report directory (default: next to the reconstruction).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate, reconstruct and score across view counts and methods.
    SweepViews {
        #[arg(long, value_delimiter = ',', required = true)]
        views: Vec<usize>,
        #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "naf,sart,fdk")]
        methods: Vec<Method>,
        /// Output directory (default: `<output_dir>/sweep`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the methods of each view count concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Write one 8-bit PGM image per slice.
    ExportSlices {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, value_parser = parse_axis, default_value = "z")]
        axis: Axis,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reserved; ASD-POCS is not implemented.
    #[command(hide = true)]
    AsdPocs,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_axis(s: &str) -> std::result::Result<Axis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// `--config`, else the manifest written by `simulate` in `near`, else desk.
fn load_config(global: &Global, near: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match (&global.config, near.map(|d| d.join(experiment::MANIFEST_FILE))) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(manifest)) if manifest.is_file() => {
            let m: Manifest = io::read_json(&manifest)?;
            ExperimentConfig::from_toml(&m.config, &manifest)?
        }
        _ => ExperimentConfig::desk(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if global.strict {
        cfg.train.strict = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_row(row: &naf_core::trainer::TraceRow) {
    match row.psnr {
        Some(p) => eprintln!("iter {:>6}  loss {:.5}  psnr {:.2} dB", row.iter, row.loss, p),
        None => eprintln!("iter {:>6}  loss {:.5}", row.iter, row.loss),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let g = &cli.global;
    match cli.command {
        Command::Simulate { out, noise } => {
            let mut cfg = load_config(g, None)?;
            if let Some(f) = noise {
                cfg.noise.fraction = f;
                cfg.validate()?;
            }
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            experiment::simulate(&cfg, &dir)?;
            println!("wrote {}", dir.display());
        }
        Command::Reconstruct {
            projections,
            method,
            truth,
            out,
        } => {
            let cfg = load_config(g, projections.parent())?;
            let proj = io::read_projections(&projections)?;
            let truth = truth.map(|p| io::read_volume(&p)).transpose()?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join(method.name()));
            let rec = experiment::reconstruct(method, &proj, &cfg, truth.as_ref(), &dir, print_row)?;
            if let Some(r) = &rec.metadata.report {
                println!("{}", r.summary());
            }
            println!("wrote {} ({:.1} s)", dir.display(), rec.metadata.wall_ms / 1e3);
        }
        Command::Evaluate {
            recon,
            truth,
            resample,
            out,
        } => {
            let cfg = load_config(g, None)?;
            let r = io::read_volume(&recon)?;
            let t = io::read_volume(&truth)?;
            let report = experiment::evaluate(&r, &t, &cfg.metrics, resample)?;
            let dir = out.unwrap_or_else(|| recon.parent().map(Path::to_path_buf).unwrap_or_default());
            experiment::write_report(&report, &dir)?;
            println!("{}", report.summary());
        }
        Command::SweepViews {
            views,
            methods,
            out,
            parallel,
        } => {
            let cfg = load_config(g, None)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("sweep"));
            let rows = experiment::sweep_views(&cfg, &views, &methods, Some(&dir), parallel, |r| {
                eprintln!("views {:>4}  {:<14} {}", r.views, r.method.name(), match (&r.error, r.psnr) {
                    (Some(e), _) => format!("error: {e}"),
                    (None, Some(p)) => format!("{p:.2} dB"),
                    (None, None) => String::new(),
                });
            })?;
            print!("{}", experiment::sweep_csv(&rows));
        }
        Command::ExportSlices { volume, axis, out } => {
            let v = io::read_volume(&volume)?;
            let files = experiment::export_slices(&v, axis, &out)?;
            println!("wrote {} slices to {}", files.len(), out.display());
        }
        Command::AsdPocs => {
            return Err(Error::Unsupported("asd-pocs is reserved and not implemented".into()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
