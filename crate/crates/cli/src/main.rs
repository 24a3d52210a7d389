//! `glt`: synthesize cohorts, train, evaluate, draw heatmaps and check
//! gradients.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O or format, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glt::GltError;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "glt", version, about = "Global-local transformer for patch-based regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Flags win over `--config`; `--set`
/// wins over both.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// key = value file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cohort directory holding `manifest.csv`.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Run directory for checkpoints, reports and heatmaps.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model per plane on all folds but the held-out one.
    Train {
        /// glt or local_only.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        fold: Option<usize>,
        /// f32 or f64.
        #[arg(long)]
        precision: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the held-out fold: per-plane and fused reports.
    Eval {
        /// single or multi.
        #[arg(long)]
        inference: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Subject and group heatmaps and the σ distribution.
    Heatmap {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every layer and the toy model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(GltError),
    /// A check ran to completion and failed.
    Failed(String),
}

impl From<GltError> for CliError {
    fn from(e: GltError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(GltError::Io(e))
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(GltError::Contract(_) | GltError::Dimension { .. }) => 1,
            CliError::Core(GltError::Io(_) | GltError::Format(_)) => 2,
            CliError::Core(GltError::Numerical(_) | GltError::UndefinedCorrelation(_)) => 3,
            CliError::Failed(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text, &path.display().to_string()).map_err(CliError::Usage)?;
    }
    let shared = [
        ("seed", common.seed.map(|s| s.to_string())),
        ("cohort", common.cohort.as_ref().map(|p| p.display().to_string())),
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in shared.iter().chain(flags) {
        if let Some(v) = v {
            cfg.set(k, v).map_err(CliError::Usage)?;
        }
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v).map_err(CliError::Usage)?;
    }
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let s = |v: &Option<usize>| v.map(|x| x.to_string());
    match cli.command {
        Command::Synth { n, common } => commands::synth(&resolve(&common, &[("n", s(&n))])?),
        Command::Train { mode, epochs, fold, precision, common } => {
            let cfg = resolve(
                &common,
                &[("mode", mode), ("epochs", s(&epochs)), ("fold", s(&fold)), ("precision", precision)],
            )?;
            commands::train(&cfg)
        }
        Command::Eval { inference, common } => commands::eval(&resolve(&common, &[("inference", inference)])?),
        Command::Heatmap { common } => commands::heatmap(&resolve(&common, &[])?),
        Command::Gradcheck { common } => commands::gradcheck(&resolve(&common, &[])?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("glt: {e}");
            ExitCode::from(e.code())
        }
    }
}
