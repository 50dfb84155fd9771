//! `aasn` — symmetry-aware abnormality detection pipeline.
//!
//! Exit codes: 0 success, 1 configuration/format error, 2 runtime error,
//! 3 check failure.

use aasn_cli::config::RunConfig;
use aasn_cli::{check, evalcmd, exit_code, gendata, traincmd, warpcmd};
use aasn_core::synthdata::SplitKind;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "aasn",
    version,
    about = "Symmetry-aware abnormality detection: data generation, training, evaluation, warp preview, gradient checks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (TOML-style `[section] key = value`).
    /// Defaults apply for everything not set.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.epochs=3
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> aasn_core::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the phantom dataset (images, sidecars, manifest).
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and keep the best-validation checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Suppress per-epoch progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to score: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Write per-image overlay PNGs (input, heatmap, contrast mask,
        /// feature distance).
        #[arg(long)]
        overlays: bool,
    },
    /// Run the alignment geometry on one image and dump diagnostics.
    Warp {
        #[command(flatten)]
        config: ConfigArgs,
        /// Grayscale PNG input.
        #[arg(long)]
        image: PathBuf,
        /// Landmark sidecar (`name x y` per line).
        #[arg(long)]
        landmarks: PathBuf,
    },
    /// Finite-difference gradient checks over every differentiable op.
    Gradcheck {
        /// Random instances per operation.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Corrupt one op's analytic gradient to prove the harness fails
        /// (names as printed in the table).
        #[arg(long)]
        sabotage: Option<String>,
    },
}

fn run(cli: Cli) -> aasn_core::Result<i32> {
    match cli.cmd {
        Cmd::GenData { config, force } => {
            let cfg = config.load()?;
            let report = gendata::run(&cfg, force)?;
            println!("{}", report.summary());
            Ok(0)
        }
        Cmd::Train { config, quiet } => {
            let cfg = config.load()?;
            traincmd::run(&cfg, !quiet)?;
            Ok(0)
        }
        Cmd::Eval { config, checkpoint, split, overlays } => {
            let split = SplitKind::parse(&split)?;
            evalcmd::run(
                &checkpoint,
                config.config.as_deref(),
                &config.set,
                split,
                overlays,
                true,
            )?;
            Ok(0)
        }
        Cmd::Warp { config, image, landmarks } => {
            let cfg = config.load()?;
            warpcmd::run(&cfg, &image, &landmarks, true)?;
            Ok(0)
        }
        Cmd::Gradcheck { instances, sabotage } => {
            let report = check::run(instances, sabotage.as_deref(), true)?;
            Ok(if report.passed { 0 } else { 3 })
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
