//! Experiment driver behind the `gkm` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod fdcheck;
pub mod task;
pub mod toy;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, FdcheckConfig};
use error::{read_artifact, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "gkm", version, about = "Generate, train, evaluate and diagnose bilevel KM experiments")]
pub struct Cli {
    /// Experiment config (`section.key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic instance to `<out>/instance.bin`.
    Gen,
    /// Train ω; writes `trajectory.csv` and `report.txt`.
    Train {
        /// Defaults to `<out>/instance.bin`.
        #[arg(long)]
        instance: Option<PathBuf>,
    },
    /// Compare the trained ω with the step/penalty-only baseline; writes `metrics.csv`.
    Eval {
        #[arg(long)]
        instance: Option<PathBuf>,
        /// Defaults to `<out>/report.txt`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rollout, envelope, gradient and ablation curves; writes `diagnostics.csv`.
    Diagnose {
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check reverse-mode hypergradients against central differences.
    Fdcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config {
        line: 0,
        message: "this command needs --config".into(),
    })?;
    let text = String::from_utf8(read_artifact(path)?).map_err(|_| CliError::Config {
        line: 0,
        message: format!("{} is not UTF-8", path.display()),
    })?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Command::Fdcheck { inject_fault } = cli.command {
        let (fd, seed) = match &cli.config {
            Some(_) => {
                let cfg = load_config(cli)?;
                (cfg.fdcheck, cfg.seed)
            }
            None => (FdcheckConfig::default(), cli.seed.unwrap_or(0)),
        };
        return commands::cmd_fdcheck(&fd, seed, inject_fault);
    }
    let cfg = load_config(cli)?;
    let default = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| cfg.out_dir.join(name));
    match &cli.command {
        Command::Gen => commands::cmd_gen(&cfg).map(|_| ()),
        Command::Train { instance } => commands::cmd_train(&cfg, &default(instance, commands::INSTANCE_FILE)),
        Command::Eval { instance, report } => commands::cmd_eval(
            &cfg,
            &default(instance, commands::INSTANCE_FILE),
            &default(report, commands::REPORT_FILE),
        ),
        Command::Diagnose { instance, report } => commands::cmd_diagnose(
            &cfg,
            &default(instance, commands::INSTANCE_FILE),
            &default(report, commands::REPORT_FILE),
        ),
        Command::Fdcheck { .. } => unreachable!(),
    }
}
