use std::path::PathBuf;
use std::process::ExitCode;

use augsens_cli::commands::{self, Session};
use augsens_cli::{CliError, ExperimentConfig, Outcome, Result};
use clap::{Parser, Subcommand};

/// Sensitivity analysis of network activations under image augmentation.
#[derive(Debug, Parser)]
#[command(name = "augsens", version)]
struct Args {
    /// Experiment config (JSON).
    #[arg(long, short, global = true, default_value = "augsens.json")]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, short, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the dataset, network and sample plan.
    Plan,
    /// Render the plan's augmented images.
    Sample,
    /// Run the network on the rendered samples.
    Infer,
    /// Compute Sobol indices or Shapley effects per checkpoint unit.
    Estimate,
    /// Mask activations with the maps and measure accuracy.
    MaskEval,
    /// Find the classes most sensitive to each transform.
    ClassSense,
    /// Re-estimate over single colour channels and network segments.
    Segment,
    /// Collect every table into one report directory.
    Report,
    /// Every stage in order; class-sense is skipped without a classifying map.
    Run,
}

impl Command {
    fn stages(&self) -> Vec<&'static str> {
        match self {
            Command::Plan => vec![commands::PLAN],
            Command::Sample => vec![commands::SAMPLE],
            Command::Infer => vec![commands::INFER],
            Command::Estimate => vec![commands::ESTIMATE],
            Command::MaskEval => vec![commands::MASK_EVAL],
            Command::ClassSense => vec![commands::CLASS_SENSE],
            Command::Segment => vec![commands::SEGMENT],
            Command::Report => vec![commands::REPORT],
            Command::Run => commands::STAGES.to_vec(),
        }
    }
}

fn print(o: &Outcome) {
    let state = if o.reused { "reused" } else { "done" };
    println!("{:<12} {state:<6} {}", o.stage, o.dir.display());
}

fn execute(args: Args) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let session = Session::from_config(cfg);
    let all = matches!(args.command, Command::Run);
    pool.install(|| {
        for stage in args.command.stages() {
            match session.run(stage) {
                Ok(o) => print(&o),
                Err(CliError::MissingClassifyingMap(ck)) if all => {
                    log::warn!("skipping class-sense: `{ck}` is not among the estimated checkpoints");
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
