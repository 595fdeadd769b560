//! `hmnet`: synthetic data, inference runs, schedule traces, benchmarks,
//! gradient checks and the training demo.

mod commands;
mod model_args;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{BenchArgs, GenArgs, GradcheckArgs, RunArgs, TraceArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "hmnet", version, about = "Multi-rate hierarchical memory over event streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a moving-bar scene into an event file.
    Gen(GenArgs),
    /// Run the model over an event file.
    Run(RunArgs),
    /// Compile the multi-rate schedule and dump it.
    Trace(TraceArgs),
    /// Measure per-step latency and MACs.
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Train a single-level model on the synthetic velocity task.
    TrainDemo(TrainArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Run(_) => "run",
            Command::Trace(_) => "trace",
            Command::Bench(_) => "bench",
            Command::Gradcheck(_) => "gradcheck",
            Command::TrainDemo(_) => "train-demo",
        }
    }
}

/// One JSON object on stderr so failures can be parsed by scripts.
fn report_error(command: &str, kind: &str, message: &str) {
    let line = serde_json::json!({ "error": { "command": command, "kind": kind, "message": message } });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            report_error("", "usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Run(a) => commands::run(a),
        Command::Trace(a) => commands::trace(a),
        Command::Bench(a) => commands::bench(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::TrainDemo(a) => commands::train_demo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.downcast_ref::<hmnet::Error>() {
                Some(hmnet::Error::Config(_) | hmnet::Error::Unknown { .. }) => "config",
                Some(hmnet::Error::Decode { .. } | hmnet::Error::OutOfBounds { .. }) => "input",
                Some(hmnet::Error::NonFinite(_)) => "numeric",
                Some(_) => "runtime",
                None if e.downcast_ref::<std::io::Error>().is_some() => "io",
                None if e.downcast_ref::<serde_json::Error>().is_some() => "config",
                None => "failure",
            };
            report_error(name, kind, &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
