//! Command-line pipelines: simulate, fit-emulator, pretrain, train, eval,
//! gridsearch and report, all driven by one TOML experiment file.

pub mod commands;
pub mod error;
pub mod layout;
pub mod maps;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use o2sif::pipeline::ExperimentConfig;
use o2sif::sfmnn::{AncillaryMode, ArchConfig};

pub use error::{CliError, CliResult};

/// Environment variable overriding the output directory of the config file.
pub const OUT_ENV: &str = "O2SIF_OUT";

#[derive(Debug, Parser)]
#[command(name = "o2sif", version, about = "O2-A band fluorescence retrieval pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment file (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Derives every random seed of the experiment from this value.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    pub preset: Option<String>,

    #[arg(long, global = true, value_enum)]
    pub ancillary: Option<AncillaryArg>,

    /// Training epochs of the retrieval network.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,

    /// Parallel trainings in gridsearch.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Output directory; overrides the environment and the config file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AncillaryArg {
    Regularized,
    #[value(name = "as-input", alias = "as_input")]
    AsInput,
}

impl From<AncillaryArg> for AncillaryMode {
    fn from(a: AncillaryArg) -> Self {
        match a {
            AncillaryArg::Regularized => AncillaryMode::Regularized,
            AncillaryArg::AsInput => AncillaryMode::AsInput,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "gamma_c", alias = "gamma-c")]
    GammaC,
    #[value(name = "gamma_aot", alias = "gamma-aot")]
    GammaAot,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::GammaC => "gamma_c",
            Axis::GammaAot => "gamma_aot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Pretrain,
    Train,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulates the training and held-out scenes.
    Simulate,
    /// Fits the polynomial emulator and reports its held-out error.
    FitEmulator {
        /// Largest accepted held-out mean relative error (fraction).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Fits the supervised initial fluorescence predictor.
    Pretrain,
    /// Trains the retrieval network starting from the pretrained checkpoint.
    Train,
    /// Evaluates a checkpoint on every simulated scene and exports maps.
    Eval {
        #[arg(long, value_enum, default_value = "train")]
        stage: Stage,
    },
    /// Trains and evaluates one model per weight value.
    Gridsearch {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; `as-input` selects the ancillary-as-input
        /// variant, reported as 0 on the gamma_aot axis.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Summarizes evaluation and gridsearch outputs as a Markdown table.
    Report,
}

/// Resolved configuration with command-line overrides applied.
pub fn resolve_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if let Some(p) = &cli.preset {
        cfg.preset = p.clone();
    }
    if let Some(a) = cli.ancillary {
        cfg.ancillary_mode = a.into();
    }
    if let Some(e) = cli.epochs {
        cfg.schedule.epochs = e;
    }
    if let Ok(dir) = std::env::var(OUT_ENV) {
        if !dir.is_empty() {
            cfg.out_dir = dir;
        }
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    if cli.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    ArchConfig::preset(&cfg.preset).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    let layout = layout::Layout::new(&cfg.out_dir);
    layout.prepare()?;
    layout.write_config(&cfg)?;
    match &cli.command {
        Command::Simulate => commands::simulate(&cfg, &layout),
        Command::FitEmulator { threshold } => commands::fit_emulator(&cfg, &layout, *threshold),
        Command::Pretrain => commands::pretrain(&cfg, &layout),
        Command::Train => commands::train(&cfg, &layout),
        Command::Eval { stage } => commands::eval(&cfg, &layout, *stage),
        Command::Gridsearch { axis, values } => commands::gridsearch(&cfg, &layout, *axis, values.as_deref(), cli.jobs),
        Command::Report => commands::report(&layout),
    }
}
