mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use commands::Outcome;

#[derive(Parser)]
#[command(name = "mixsep", version, about = "Joint diarization and separation of multichannel meetings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Diarize and separate every recording listed in a run config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; overrides the config.
        #[arg(long)]
        jobs: Option<usize>,
        /// Base seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic meeting bundle from a scenario file.
    Synth {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a hypothesis RTTM against a reference and print JSON.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        /// Synthetic bundle with ground truth for counting and mask scores.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        collar: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MIXSEP_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, jobs, seed } => commands::cmd_run(&config, jobs, seed),
        Command::Synth { scenario, out } => commands::cmd_synth(&scenario, &out),
        Command::Score {
            reference,
            hyp,
            bundle,
            collar,
        } => commands::cmd_score(&reference, &hyp, bundle.as_deref(), collar).and_then(|r| {
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(Outcome::Success)
        }),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::PartialFailure) => ExitCode::from(2),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
