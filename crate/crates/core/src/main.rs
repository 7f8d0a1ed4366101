use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use taskdist::cli::{self, ExperimentKind};
use taskdist::Error;

#[derive(Parser)]
#[command(
    name = "taskdist",
    version,
    about = "Fisher task distances, task-guided cell search and SGD averaging checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train ε-networks per task and discover a baseline cell for each.
    TrainBaseline(Common),
    /// Mean/std task distance tables over trials.
    DistanceMatrix(Common),
    /// Closest-task search space plus relaxed-mixture cell search.
    Nas(Common),
    /// Random search over the closest task's space.
    RandomSearch(Common),
    /// Distance traces for SGD on quadratic tasks.
    ValidateTheory(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = Error::Config {
                line: 0,
                message: e.to_string().trim().to_string(),
            };
            eprintln!("{}", cli::error_record(&err, 1));
            return ExitCode::from(1);
        }
    };
    let (kind, common) = match cli.command {
        Command::TrainBaseline(c) => (ExperimentKind::TrainBaseline, c),
        Command::DistanceMatrix(c) => (ExperimentKind::DistanceMatrix, c),
        Command::Nas(c) => (ExperimentKind::Nas, c),
        Command::RandomSearch(c) => (ExperimentKind::RandomSearch, c),
        Command::ValidateTheory(c) => (ExperimentKind::ValidateTheory, c),
    };
    let result =
        cli::load_config(&common.config, kind, common.seed, common.out.as_deref()).and_then(|cfg| cli::run(&cfg));
    match result {
        Ok(report) => {
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for (k, v) in &report.metrics {
                println!("{k} = {v}");
            }
            println!("seconds = {:.3}", report.seconds);
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = cli::exit_code(&e);
            eprintln!("{}", cli::error_record(&e, code));
            ExitCode::from(code as u8)
        }
    }
}
