//! Command-line front end for the plate-reliability pipeline.
//!
//! Every subcommand reads one TOML configuration and writes its artifacts
//! into the run directory, so a full study is a sequence of invocations
//! over the same `--config` / `--out` pair.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ttreliab::estimators::EstimateMode;
use ttreliab::pipeline::{Command, MapKind, RunConfig};

#[derive(Parser)]
#[command(
    name = "ttreliab",
    about = "Failure-probability estimation for a composite plate via \
             homogenization surrogates and tensor-train transport sampling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,

    /// TOML configuration file.
    #[arg(long, global = true, default_value = "run.toml")]
    config: PathBuf,

    /// Run directory for artifacts (created if missing).
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Override the root seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapKindArg {
    /// Bayesian posterior of the material fields given sensor strains.
    Posterior,
    /// Prior restricted to the failure region (smoothed indicator).
    PriorFailure,
    /// Posterior restricted to the failure region.
    PosteriorFailure,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimateModeArg {
    /// Plain Monte Carlo under the prior.
    Mc,
    /// Importance sampling from the prior-failure transport map.
    IsPrior,
    /// Posterior failure probability as a ratio of two normalizing
    /// constants, each importance-sampled from its own map.
    PosteriorRatio,
    /// Brute-force rejection reference for the posterior probability.
    RejectionReference,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Generate the periodic-cell homogenization dataset.
    RveData,
    /// Train the bound-constrained stiffness surrogate on the dataset.
    TrainSurrogate,
    /// Compare surrogate-driven and direct-homogenization plate solutions.
    ValidateSurrogate,
    /// Build the truncated Karhunen-Loeve bases for the material fields.
    KlBuild,
    /// Synthesize ground-truth observations and calibrate the allowable stress.
    SynthesizeTruth,
    /// Build a deep transport map for a target density.
    BuildMap {
        #[arg(long, value_enum)]
        kind: MapKindArg,
    },
    /// Estimate a failure probability and write a report.
    Estimate {
        #[arg(long, value_enum)]
        mode: EstimateModeArg,
    },
    /// Aggregate estimate reports into the scaling table.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();

    let cli = Cli::parse();
    ttreliab::exec::init_workers(cli.workers);

    let (mut config, config_hash) = match RunConfig::load(&cli.config) {
        Ok(v) => v,
        Err(e) => {
            log::error!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    // A seed override participates in the config identity: fold it into
    // the hash so mixed-seed artifacts cannot collide in one run dir.
    let config_hash = match cli.seed {
        None => config_hash,
        Some(s) => {
            config.seed = s;
            format!("{config_hash}-seed{s}")
        }
    };

    let command = match cli.command {
        CliCommand::RveData => Command::RveData,
        CliCommand::TrainSurrogate => Command::TrainSurrogate,
        CliCommand::ValidateSurrogate => Command::ValidateSurrogate,
        CliCommand::KlBuild => Command::KlBuild,
        CliCommand::SynthesizeTruth => Command::SynthesizeTruth,
        CliCommand::BuildMap { kind } => Command::BuildMap(match kind {
            MapKindArg::Posterior => MapKind::Posterior,
            MapKindArg::PriorFailure => MapKind::PriorFailure,
            MapKindArg::PosteriorFailure => MapKind::PosteriorFailure,
        }),
        CliCommand::Estimate { mode } => Command::Estimate(match mode {
            EstimateModeArg::Mc => EstimateMode::PriorMc,
            EstimateModeArg::IsPrior => EstimateMode::PriorIs,
            EstimateModeArg::PosteriorRatio => EstimateMode::PosteriorRatio,
            EstimateModeArg::RejectionReference => EstimateMode::PosteriorRejection,
        }),
        CliCommand::Report => Command::Report,
    };

    match ttreliab::pipeline::run(&command, &config, &config_hash, &cli.out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
