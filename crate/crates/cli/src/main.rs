//! `branchdiff`: command line front end for hierarchically branched
//! diffusion models.

mod commands;
mod config;
mod error;
mod io;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use toml::Value;

use config::{parse_override, RunConfig, CONFIG_ENV};
use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "branchdiff", version, about = "Hierarchically branched diffusion models")]
struct Cli {
    /// TOML run configuration with dotted keys.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed (`seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Discover a branch hierarchy from labeled data.
    Discover(commands::discover::Args),
    /// Train a branched model or the label-guided baseline.
    Train(commands::train::Args),
    /// Generate objects of one or all classes.
    Sample(commands::sample::SampleArgs),
    /// Map objects of one class onto another.
    Transmute(commands::sample::TransmuteArgs),
    /// Generate hybrids of two classes and finish them down both branches.
    Hybrid(commands::sample::HybridArgs),
    /// Add a new class to a trained branched model.
    Extend(commands::extend::Args),
    /// Compare generated objects with reference data.
    Eval(commands::eval::EvalArgs),
    /// Time cached against per-class sampling.
    Bench(commands::eval::BenchArgs),
    /// Render a CSV file as an SVG plot.
    Plot(commands::plot::Args),
    /// Write a synthetic Gaussian-mixture dataset.
    Synth(commands::synth::Args),
}

impl Command {
    fn overrides(&self) -> Vec<(&'static str, Value)> {
        match self {
            Command::Discover(a) => a.overrides(),
            Command::Train(a) => a.overrides(),
            Command::Sample(a) => a.overrides(),
            Command::Transmute(a) => a.overrides(),
            Command::Hybrid(a) => a.overrides(),
            Command::Extend(a) => a.overrides(),
            Command::Eval(a) => a.overrides(),
            Command::Bench(a) => a.overrides(),
            Command::Plot(_) | Command::Synth(_) => Vec::new(),
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut overrides = cli
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<CliResult<Vec<_>>>()?;
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::input("seed must be below 2^63"))?;
        overrides.push(("seed".into(), Value::Integer(seed)));
    }
    overrides.extend(cli.command.overrides().into_iter().map(|(k, v)| (k.to_string(), v)));
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Discover(a) => commands::discover::run(a, &cfg),
        Command::Train(a) => commands::train::run(a, &cfg),
        Command::Sample(a) => commands::sample::run_sample(a, &cfg),
        Command::Transmute(a) => commands::sample::run_transmute(a, &cfg),
        Command::Hybrid(a) => commands::sample::run_hybrid(a, &cfg),
        Command::Extend(a) => commands::extend::run(a, &cfg),
        Command::Eval(a) => commands::eval::run_eval(a, &cfg),
        Command::Bench(a) => commands::eval::run_bench(a, &cfg),
        Command::Plot(a) => commands::plot::run(a),
        Command::Synth(a) => commands::synth::run(a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::input(first.trim_start_matches("error: ")).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code() as u8)
        }
    }
}
