use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zssd::experiments::Method;
use zssd::sampler::GuidanceMode;

mod commands;
mod lock;
mod plot;

/// Zero-shot statistical downscaling on gridded fields.
#[derive(Parser, Debug)]
#[command(name = "zssd", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "zssd-out")]
    out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<GuidanceMode>,
    /// Guidance scale.
    #[arg(long, global = true)]
    zeta: Option<f64>,
    #[arg(long, global = true)]
    ensemble: Option<usize>,
    /// Downscale truth coarsened by this factor.
    #[arg(long, global = true, conflicts_with = "gcm")]
    paired: Option<usize>,
    /// Downscale the named pseudo climate model.
    #[arg(long, global = true)]
    gcm: Option<String>,
}

fn parse_mode(s: &str) -> Result<GuidanceMode, String> {
    s.parse().map_err(|e: zssd::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "bilinear" => Ok(Method::Bilinear),
        "bcsd" => Ok(Method::Bcsd),
        other => Err(format!("unknown baseline `{other}` (expected bilinear or bcsd)")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate truth, terrain and pseudo climate-model data.
    Synth {
        #[arg(long)]
        years: Option<usize>,
    },
    /// Train the diffusion prior.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Downscale test-period inputs.
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Run a classical baseline instead of the guided sampler.
        #[arg(long, value_parser = parse_method)]
        baseline: Option<Method>,
    },
    /// Score sampled outputs against truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `sample`.
        #[arg(long)]
        outputs: PathBuf,
    },
    /// Conditioning, re-projection and coarse-scale ablations.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render figures from report files.
    Plot {
        #[arg(long)]
        reports: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<zssd::Error>() {
        Some(zssd::Error::Config { .. } | zssd::Error::Invalid(_)) => 2,
        Some(zssd::Error::Divergence(_)) => 4,
        Some(_) => 3,
        None if err.downcast_ref::<lock::Locked>().is_some() => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("ZSSD_NUM_WORKERS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("global pool is built once");
            }
            _ => {
                eprintln!("error: ZSSD_NUM_WORKERS must be a positive integer, got `{n}`");
                return ExitCode::from(2);
            }
        }
    }
    let g = &cli.global;
    let result = match cli.command {
        Command::Synth { years } => commands::synth(g, years),
        Command::Train { data, resume } => commands::train(g, &data, resume.as_deref()),
        Command::Sample { data, checkpoint, baseline } => commands::sample(g, &data, checkpoint.as_deref(), baseline),
        Command::Eval { data, outputs } => commands::eval(g, &data, &outputs),
        Command::Ablate { data, checkpoint } => commands::ablate(g, &data, &checkpoint),
        Command::Plot { reports } => commands::plot(g, &reports),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
