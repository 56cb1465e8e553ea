//! `csicl`: synthetic data, continual training sessions, bundle evaluation
//! and edge/end simulation.

mod failure;
mod simulate;
mod source;
mod tools;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use failure::CliResult;

#[derive(Debug, Parser)]
#[command(name = "csicl", version, about = "Class-incremental CSI activity recognition")]
struct Cli {
    /// Output directory for reports, bundles and transcripts.
    #[arg(long, global = true, env = "CSICL_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fill missing cells of a dataset file.
    Preprocess(tools::PreprocessArgs),
    /// Run a continual-learning session and export reports and bundles.
    Train(train::TrainArgs),
    /// Replay a session between an edge server and an end device.
    Simulate(simulate::SimulateArgs),
    /// Score a model bundle on a dataset.
    Eval(tools::EvalArgs),
    /// Write a synthetic dataset.
    Synth(tools::SynthArgs),
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    match cli.command {
        Command::Preprocess(a) => tools::preprocess(&a),
        Command::Synth(a) => tools::synth(&a),
        Command::Eval(a) => tools::eval(&a),
        Command::Train(a) => {
            let report = train::run(&a, &cli.out_dir)?;
            Ok(json!({
                "out_dir": cli.out_dir,
                "schedule": report.schedule,
                "fsm_average_accuracy": report.fsm.average_accuracy,
                "fsm_forgetting": report.fsm.forgetting,
                "lwm_average_accuracy": report.lwm.as_ref().map(|a| a.average_accuracy),
            }))
        }
        Command::Simulate(a) => simulate::run(&a, &cli.out_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CSICL_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { failure::USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            if f.code == failure::USAGE {
                eprintln!("\nRun 'csicl --help' for usage.");
            }
            ExitCode::from(f.code)
        }
    }
}
