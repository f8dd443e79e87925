//! Command-line pipeline for the fuselab workbench.
//!
//! Subcommands walk the experiment chain (simulate, trilaterate,
//! imu-integrate, fuse-akf, train, infer, augment, evaluate, ablate,
//! report) over a JSON run configuration. Every stage is deterministic in
//! (config, seed) and idempotent: artifacts current under the config hash
//! are skipped unless `--force` asks for a rebuild.

pub mod config;
pub mod pipeline;

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use config::{CliOverrides, ResolvedConfig};
use fuselab::bench::Method;
use pipeline::Stage;

#[derive(Debug, Parser)]
#[command(
    name = "fuselab",
    version,
    about = "UWB-IMU trajectory estimation workbench"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Arguments every subcommand shares.
#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration JSON.
    #[arg(long, short = 'c', value_name = "FILE")]
    pub config: PathBuf,
    /// Process only these seeds (repeatable); each must appear in the
    /// config's seed list.
    #[arg(long = "seed", value_name = "SEED")]
    pub seeds: Vec<u64>,
    /// Artifact root; overrides FUSELAB_OUT_DIR and the config's `out`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed-level worker threads; overrides FUSELAB_THREADS (default 1).
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    /// Rebuild the requested stage even when its artifacts are current.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the measurement log for each seed.
    Simulate(Common),
    /// Solve per-epoch multilateration fixes from the ranging stream.
    Trilaterate(Common),
    /// Fit the accelerometer bias correction and dead-reckon the run.
    ImuIntegrate(Common),
    /// Run the loosely coupled adaptive-filter baseline.
    FuseAkf(Common),
    /// Train a learned estimator (bilstm, fusionnet, fusionnet-dgan).
    Train {
        #[command(flatten)]
        common: Common,
        /// Estimator to train.
        #[arg(long, value_name = "METHOD")]
        method: String,
    },
    /// Score a trained estimator over the held-out test span.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Estimator to score.
        #[arg(long, value_name = "METHOD")]
        method: String,
    },
    /// Train the residual diffusion generator and score its fidelity.
    Augment(Common),
    /// Produce the per-seed comparison table across configured methods.
    Evaluate(Common),
    /// Train the decay/gate ablation grid and tabulate it.
    Ablate(Common),
    /// Aggregate per-seed results into the cross-seed benchmark report.
    Report(Common),
}

/// Parses a learned-method name, rejecting estimators without a training
/// stage. Runs before any configuration or file work.
fn learned_method(name: &str) -> Result<Method> {
    let method = Method::from_str(name)?;
    match method {
        Method::Bilstm | Method::FusionNet | Method::FusionNetDgan => Ok(method),
        Method::UwbOnly | Method::Akf => {
            bail!("`{name}` is not a trained estimator; it runs during evaluate")
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let (common, stage) = match cli.command {
        Command::Simulate(c) => (c, Stage::Simulate),
        Command::Trilaterate(c) => (c, Stage::Trilaterate),
        Command::ImuIntegrate(c) => (c, Stage::ImuIntegrate),
        Command::FuseAkf(c) => (c, Stage::FuseAkf),
        Command::Train { common, method } => (common, Stage::Train(learned_method(&method)?)),
        Command::Infer { common, method } => (common, Stage::Infer(learned_method(&method)?)),
        Command::Augment(c) => (c, Stage::Augment),
        Command::Evaluate(c) => (c, Stage::Evaluate),
        Command::Ablate(c) => (c, Stage::Ablate),
        Command::Report(c) => (c, Stage::Report),
    };
    if stage == Stage::Report && !common.seeds.is_empty() {
        bail!("report always covers every seed in the config; drop --seed");
    }
    let over = CliOverrides {
        out: common.out.clone(),
        threads: common.threads,
    };
    let cfg = ResolvedConfig::load(&common.config, &over)?;
    let seeds = cfg.select_seeds(&common.seeds)?;
    pipeline::run_stage(&cfg, stage, &seeds, common.force)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_validation_happens_before_any_io() {
        assert!(learned_method("fusionnet").is_ok());
        assert!(learned_method("bilstm").is_ok());
        assert!(learned_method("fusionnet-dgan").is_ok());
        let err = learned_method("akf").unwrap_err();
        assert!(err.to_string().contains("not a trained estimator"), "{err}");
        let err = learned_method("warp-drive").unwrap_err();
        assert!(err.to_string().contains("unknown method"), "{err}");
    }

    #[test]
    fn argument_grammar_parses() {
        let cli = Cli::try_parse_from([
            "fuselab", "train", "--config", "run.json", "--method", "fusionnet", "--seed", "1",
            "--seed", "2", "--force",
        ])
        .unwrap();
        match cli.command {
            Command::Train { common, method } => {
                assert_eq!(method, "fusionnet");
                assert_eq!(common.seeds, vec![1, 2]);
                assert!(common.force);
            }
            _ => panic!("parsed the wrong subcommand"),
        }
    }
}
