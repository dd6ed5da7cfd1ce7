use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mapdetect::experiment::{
    cmd_calibrate, cmd_detect, cmd_evaluate, cmd_generate, cmd_report, cmd_train, results_table, run_all,
    ExperimentConfig, Run,
};
use mapdetect::synth::SplitName;
use mapdetect::Error;

/// Anomaly detection by MAP restoration under a learned normative prior.
#[derive(Parser)]
#[command(name = "mapdetect", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration value, e.g. `restoration.lambda=2`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for image-level parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Seed for data generation, training and restoration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Generate(Common),
    /// Train the configured priors.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from existing checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Select lambda and the FPR-limited thresholds.
    Calibrate(Common),
    /// Restore and threshold test images.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Splits to process (default: both test splits).
        #[arg(long = "split")]
        splits: Vec<String>,
    },
    /// Compute metrics for every method.
    Evaluate(Common),
    /// Render figures and the results table.
    Report(Common),
    /// Run every stage in order.
    All(Common),
}

fn load(common: &Common) -> Result<Run, Error> {
    let mut config = ExperimentConfig::load(&common.config, &common.overrides)?;
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        config.workers = w;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build_global()
        .ok();
    Ok(Run::new(config))
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(c) => {
            let run = load(&c)?;
            cmd_generate(&run)?;
        }
        Command::Train { common, resume } => {
            let run = load(&common)?;
            cmd_train(&run, resume)?;
        }
        Command::Calibrate(c) => {
            let run = load(&c)?;
            cmd_calibrate(&run)?;
        }
        Command::Detect { common, splits } => {
            let run = load(&common)?;
            let splits = if splits.is_empty() {
                vec![SplitName::TestLesioned, SplitName::TestHealthy]
            } else {
                splits.iter().map(|s| SplitName::parse(s)).collect::<Result<_, _>>()?
            };
            cmd_detect(&run, &splits)?;
        }
        Command::Evaluate(c) => {
            let run = load(&c)?;
            let summary = cmd_evaluate(&run)?;
            print!("{}", results_table(&summary));
        }
        Command::Report(c) => {
            let run = load(&c)?;
            for p in cmd_report(&run)? {
                println!("{}", p.display());
            }
        }
        Command::All(c) => {
            let run = load(&c)?;
            let summary = run_all(&run)?;
            print!("{}", results_table(&summary));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
