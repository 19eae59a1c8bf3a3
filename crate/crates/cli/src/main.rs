use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod eval;
mod infer;
mod split;
mod train;

#[derive(Parser)]
#[command(name = "pipofan", version, about = "Multi-organ CT segmentation from partially labeled datasets")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
pub struct Global {
    /// Worker threads for per-volume work.
    #[arg(long, global = true, env = "PIPOFAN_WORKERS", default_value_t = 1)]
    workers: usize,
    /// Force a single worker so repeated runs are bitwise identical.
    #[arg(long, global = true)]
    deterministic: bool,
}

impl Global {
    pub fn workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers.max(1)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint that holds training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment volumes with one checkpoint or an ensemble.
    Infer(infer::InferArgs),
    /// Score predicted label volumes against ground truth.
    Eval(eval::EvalArgs),
    /// Write a cross-validation fold plan for a dataset manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, resume } => train::run(&config, resume.as_deref()),
        Command::Infer(args) => infer::run(&args, cli.global),
        Command::Eval(args) => eval::run(&args),
        Command::Split { manifest, k, seed, out } => split::run(&manifest, k, seed, &out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
