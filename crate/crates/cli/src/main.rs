use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hvd_cli::commands::{cmd_eval, cmd_ingest, cmd_llm_eval, cmd_prompt_tune, cmd_report, cmd_train, TrainRun};
use hvd_cli::config::ExperimentConfig;
use hvd_cli::exit_code;
use hvd_core::{Error, Result};

#[derive(Parser)]
#[command(name = "hvd", version, about = "Human value detection experiments")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the corpus and summarise splits and label frequencies.
    Ingest,
    /// Fine-tune an encoder with a classification head.
    Train,
    /// Tune prompt parameters with the backbone frozen.
    PromptTune,
    /// Score a checkpoint on the evaluation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a chat model with chain-of-thought prompts.
    LlmEval,
    /// Compare scored runs in one grid.
    Report {
        /// Run directories or result files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config {
        field: "--config".into(),
        message: "this command needs a configuration file".into(),
    })?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.apply_seed(seed);
    }
    Ok(config)
}

fn print_train(outcome: &TrainRun) {
    let losses: Vec<f64> = outcome.history.records.iter().filter_map(|r| r.loss).collect();
    println!("run {} -> {}", outcome.run.hash, outcome.run.dir.display());
    if let Some(last) = losses.last() {
        println!("{} steps, final loss {last:.4}", losses.len());
    }
    if let Some(result) = &outcome.validation {
        println!("validation macro F1 {}", result.summary());
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Report { runs } => print!("{}", cmd_report(runs)?),
        Command::Ingest => {
            let outcome = cmd_ingest(&load_config(cli)?, cli.force)?;
            println!("run {} -> {}", outcome.run.hash, outcome.run.dir.display());
            print!("{}", outcome.summary.render());
        }
        Command::Train => print_train(&cmd_train(&load_config(cli)?, cli.force)?),
        Command::PromptTune => print_train(&cmd_prompt_tune(&load_config(cli)?, cli.force)?),
        Command::Eval { checkpoint } => {
            let outcome = cmd_eval(&load_config(cli)?, checkpoint, cli.force)?;
            println!("run {} -> {}", outcome.run.hash, outcome.run.dir.display());
            println!(
                "macro F1 {} on {} arguments",
                outcome.result.summary(),
                outcome.result.num_examples
            );
        }
        Command::LlmEval => {
            let outcome = cmd_llm_eval(&load_config(cli)?, cli.force)?;
            println!("run {} -> {}", outcome.run.hash, outcome.run.dir.display());
            println!(
                "macro F1 {} on {} arguments ({} failed, {} client calls)",
                outcome.result.summary(),
                outcome.result.num_examples,
                outcome.failed,
                outcome.client_calls
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
