use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use avdet::pipeline::{Outcome, Pipeline, PipelineConfig, Stage};
use avdet::{parallel, Error};

#[derive(Debug, Parser)]
#[command(name = "avdet", version, about = "Self-supervised audio-visual object detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config file (JSON when the extension is .json). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 uses all cores). Never changes results.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Re-run stages even when their artifacts are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth,
    /// Train the audio-visual model and cluster labels.
    TrainSsl,
    /// Extract self-annotations with the trained model.
    Extract,
    /// Train the vision-only detector on the self-annotations.
    TrainDet,
    /// Evaluate the detector and write the report.
    Eval,
    /// Run every stage in order.
    E2e,
    /// Print the effective config as TOML.
    Config,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigInvalid(_) => 2,
        Error::MissingArtifact(_) | Error::StaleArtifact { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if matches!(cli.command, Command::Config) {
        cfg.validate()?;
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let mut pipeline = Pipeline::new(cfg, cli.force)?;
    if !cli.quiet {
        pipeline.log = Some(Box::new(|m: &str| eprintln!("{m}")));
    }
    let stages: Vec<Stage> = match cli.command {
        Command::Synth => vec![Stage::Synth],
        Command::TrainSsl => vec![Stage::TrainSsl],
        Command::Extract => vec![Stage::Extract],
        Command::TrainDet => vec![Stage::TrainDet],
        Command::Eval => vec![Stage::Eval],
        Command::E2e => Stage::ALL.to_vec(),
        Command::Config => unreachable!(),
    };
    parallel::with_workers(cli.workers, move || {
        for s in stages {
            let started = std::time::Instant::now();
            let outcome = pipeline.run_stage(s)?;
            if outcome == Outcome::Ran && !cli.quiet {
                eprintln!("{}: done in {:.1}s", s.name(), started.elapsed().as_secs_f64());
            }
        }
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
