mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Run-directory root when `--run-dir` is not given.
pub const RUNS_ENV: &str = "DMGIN_RUNS_DIR";

#[derive(Parser, Debug)]
#[command(name = "dmgin", version, about = "Train and serve a multi-granularity interest CTR model on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config file; omitted sections take defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set model.layers=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory. Defaults to `$DMGIN_RUNS_DIR/<name>` (root `runs`).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    pub name: String,
}

impl Common {
    pub fn run_dir(&self) -> PathBuf {
        match &self.run_dir {
            Some(d) => d.clone(),
            None => {
                let root = std::env::var_os(RUNS_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                root.join(&self.name)
            }
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Dmgin,
    Baseline,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset, entity features and ground truth.
    GenData(Common),
    /// Contrastively pretrain the entity towers and export embeddings.
    Pretrain(Common),
    /// Cluster entity embeddings into interest groups.
    Cluster(Common),
    /// Train one model with `train.seed`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "dmgin")]
        model: ModelKind,
    },
    /// Evaluate a trained checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "dmgin")]
        model: ModelKind,
    },
    /// Full model and both ablations, averaged over `seeds`.
    Ablate(Common),
    /// AUC/GAUC against evolution depth, averaged over `seeds`.
    DepthSweep {
        #[command(flatten)]
        common: Common,
        /// Inclusive range `a..b` or a comma list.
        #[arg(long, default_value = "1..4")]
        layers: String,
    },
    /// Precompute every test user's long-term state into the cache file.
    Precompute(Common),
    /// Serve test requests from the cache and compare with full recompute.
    ServeEval(Common),
    /// Print the cache header and one record.
    CacheInspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: Option<u32>,
        /// Cache file; defaults to the run directory's.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => stages::gen_data(&c),
        Command::Pretrain(c) => stages::pretrain(&c),
        Command::Cluster(c) => stages::cluster(&c),
        Command::Train { common, model } => stages::train(&common, model),
        Command::Eval { common, model } => stages::eval(&common, model),
        Command::Ablate(c) => stages::ablate(&c),
        Command::DepthSweep { common, layers } => stages::depth_sweep(&common, &layers),
        Command::Precompute(c) => stages::precompute(&c),
        Command::ServeEval(c) => stages::serve_eval(&c),
        Command::CacheInspect { common, user, cache } => stages::cache_inspect(&common, user, cache),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
