use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stress::pipeline::Method;
use stress::{Error, Result};

mod commands;
mod config;
mod plot;

use config::{SeedSources, SEED_ENV};

/// Self-supervised super-resolution of interleaved dynamic volumetric scans.
#[derive(Debug, Parser)]
#[command(name = "stress", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set protocol.n_interleave=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Global seed; wins over the config and STRESS_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shortcut for `--set work_dir=DIR`.
    #[arg(long, value_name = "DIR", global = true)]
    work_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the static phantom and its keypoints.
    Phantom,
    /// Synthesize a motion trajectory from the phantom keypoints.
    Trajectory,
    /// Acquire the interleaved scan and the ground-truth series.
    Acquire,
    /// Train the super-resolution network (and the optional denoiser).
    Train,
    /// Reconstruct the high-resolution series with a trained model.
    Infer,
    /// Reconstruct with a baseline method.
    Baseline {
        #[arg(long, value_parser = parse_method)]
        method: Method,
    },
    /// Compute per-frame metrics against the ground truth.
    Evaluate {
        /// Methods to score (default: every reconstruction present).
        #[arg(long = "method")]
        methods: Vec<String>,
        /// Keypoint CSV with predicted rows, scored by PCK.
        #[arg(long)]
        keypoints: Option<PathBuf>,
        /// Name given to the PCK curve.
        #[arg(long, default_value = "predicted")]
        keypoint_label: String,
    },
    /// Write the metrics table, per-method means and SVG plots.
    Report,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<PathBuf> {
    if let Some(n) = cli.common.jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    let mut overrides = cli.common.overrides.clone();
    if let Some(dir) = &cli.common.work_dir {
        overrides.push(format!("work_dir={}", serde_json::Value::from(dir.to_string_lossy().into_owned())));
    }
    let seeds = SeedSources { flag: cli.common.seed, env: std::env::var(SEED_ENV).ok() };
    let cfg = config::load(cli.common.config.as_deref(), &overrides, &seeds)?;
    match cli.command {
        Command::Phantom => commands::phantom(&cfg),
        Command::Trajectory => commands::trajectory(&cfg),
        Command::Acquire => commands::acquire_scan(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Infer => commands::infer(&cfg),
        Command::Baseline { method } => commands::baseline(&cfg, method),
        Command::Evaluate { methods, keypoints, keypoint_label } => {
            commands::evaluate(&cfg, &methods, keypoints.as_deref().map(|p| (p, keypoint_label.as_str())))
        }
        Command::Report => commands::report(&cfg),
    }
}

fn single_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("E_CONFIG: {}", single_line(first.trim_start_matches("error:").trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}: {}", e.code(), single_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
