//! `turnkit`: synthesize corpora, train the staged engine, evaluate, replay
//! streams and benchmark decision latency.

mod commands;
mod config;
mod exit;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "turnkit", version, about = "Streaming turn detection for full-duplex dialogue")]
struct Cli {
    /// Engine config (TOML). Every section is optional; without a file the
    /// defaults apply and paths are relative to the working directory.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic four-state corpus: manifest.jsonl plus feature files.
    Synth(commands::SynthArgs),
    /// Run training stages and write one checkpoint per stage.
    Train(commands::TrainArgs),
    /// Stream every sample of a manifest and write an accuracy report.
    Eval(commands::EvalArgs),
    /// Replay one feature file and print session events as JSON lines.
    Stream(commands::StreamArgs),
    /// Decision latency per mode over a manifest: mean, p50, p95.
    BenchLatency(commands::BenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => config::EngineConfig::load(path),
        None => Ok(config::EngineConfig::default()),
    };
    let result = cfg
        .map_err(anyhow::Error::from)
        .and_then(|cfg| match cli.command {
            Command::Synth(a) => commands::synth(&cfg, &a),
            Command::Train(a) => commands::train(&cfg, &a),
            Command::Eval(a) => commands::eval(&cfg, &a),
            Command::Stream(a) => commands::stream(&cfg, &a),
            Command::BenchLatency(a) => commands::bench_latency(&cfg, &a),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_of(&e))
        }
    }
}
