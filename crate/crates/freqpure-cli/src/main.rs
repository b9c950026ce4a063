//! `freqpure` — operator surface for the frequency-domain attack and
//! diffusion-purification pipeline.
//!
//! Subcommands compose through files: `train` writes weights, `attack`
//! writes adversarial batches, `purify` consumes any unit-range batch file,
//! `eval` runs the full grid, and `analyze` post-processes perturbation
//! files. One TOML config describes a run; flags override individual values
//! and participate in the config hash stamped on every artifact.
//!
//! Exit codes: 0 success, 1 usage error, 2 component failure, 3 when every
//! evaluation cell failed.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use commands::{CmdError, CmdResult};
use config::{Overrides, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "freqpure",
    version,
    about = "Frequency-domain attacks and diffusion purification on a toy image pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration file (TOML); built-in defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed override (training and purification noise).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker count override for the evaluation grid.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the toy classifier and score model; write weights and curves.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Attack the fixed test subset and export all artifacts.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Attack mode: pixel, mag, phase, phase_mag, or all.
        #[arg(long, default_value = "pixel")]
        mode: String,
        /// Distortion-vs-misclassification balance override.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Purify a unit-range batch file through the diffusion model.
    Purify {
        #[command(flatten)]
        common: Common,
        /// Input batch file.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Diffusion stopping-time override.
        #[arg(long, value_name = "T")]
        t_star: Option<f64>,
        /// Reverse-solver step-size override.
        #[arg(long)]
        dt: Option<f64>,
        /// Export N evenly spaced reverse-process frames per sample.
        #[arg(long, default_value_t = 0)]
        snapshots: usize,
    },
    /// Run the full evaluation grid and write reports.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate a single stopping time instead of the configured list.
        #[arg(long, value_name = "T")]
        t_star: Option<f64>,
        /// Reverse-solver step-size override.
        #[arg(long)]
        dt: Option<f64>,
        /// Distortion-vs-misclassification balance override.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Recompute a spectrum histogram from an existing perturbation file.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Perturbation batch file (signed-range difference images).
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Histogram bin count override.
        #[arg(long)]
        bins: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common }
            | Command::Attack { common, .. }
            | Command::Purify { common, .. }
            | Command::Eval { common, .. }
            | Command::Analyze { common, .. } => common,
        }
    }

    fn overrides(&self) -> Overrides {
        let common = self.common();
        let mut ov = Overrides {
            out: common.out.clone(),
            seed: common.seed,
            workers: common.workers,
            ..Overrides::default()
        };
        match self {
            Command::Attack { lambda, .. } => ov.lambda = *lambda,
            Command::Purify { t_star, dt, .. } => {
                ov.t_star = *t_star;
                ov.dt = *dt;
            }
            Command::Eval { t_star, dt, lambda, .. } => {
                ov.t_star = *t_star;
                ov.dt = *dt;
                ov.lambda = *lambda;
            }
            Command::Train { .. } | Command::Analyze { .. } => {}
        }
        ov
    }
}

fn dispatch(cli: Cli) -> CmdResult<()> {
    let command = cli.command;
    let mut cfg = RunConfig::load(command.common().config.as_deref()).map_err(CmdError::Usage)?;
    cfg.apply(&command.overrides());
    cfg.validate().map_err(CmdError::Usage)?;
    let hash = cfg.hash();
    log::info!("config hash {hash}");
    match &command {
        Command::Train { .. } => commands::cmd_train(&cfg, &hash),
        Command::Attack { mode, .. } => commands::cmd_attack(&cfg, &hash, mode),
        Command::Purify { input, snapshots, .. } => {
            commands::cmd_purify(&cfg, &hash, input, *snapshots)
        }
        Command::Eval { .. } => commands::cmd_eval(&cfg, &hash),
        Command::Analyze { input, bins, .. } => commands::cmd_analyze(&cfg, input, *bins),
    }
}

fn run() -> u8 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CmdError::Component(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CmdError::AllCellsFailed(msg)) => {
            eprintln!("error: {msg}");
            3
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run())
}
