use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pointaugment_cli::commands::{
    self, AblateArgs, CliError, EvalArgs, GensynthArgs, RobustnessArgs, TrainArgs,
};

/// Adversarial point cloud augmentation: training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "pointaugment", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an augmentor/classifier pair (or a baseline classifier)
    Train(TrainArgs),
    /// Classification accuracy of a checkpoint
    Eval(EvalArgs),
    /// Shape retrieval mAP on the test split
    Retrieve(EvalArgs),
    /// Accuracy under test-time corruptions
    Robustness(RobustnessArgs),
    /// Component ablation or lambda sweep
    Ablate(AblateArgs),
    /// Write a synthetic primitive-shape dataset
    Gensynth(GensynthArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Robustness(a) => commands::robustness(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gensynth(a) => commands::gensynth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `pointaugment --help` for usage.");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
