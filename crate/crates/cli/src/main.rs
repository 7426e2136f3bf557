use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use neurovm_core::bench::{
    bench_energy, bench_reconfig, bench_throughput, default_sizes, default_vm_counts,
};
use neurovm_core::scenario::{Scenario, ScenarioError, EXAMPLE_SCENARIO};

const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "neurovm", version, about = "Virtualized neuromorphic fabric simulator")]
struct Cli {
    /// Simulation seed. Overrides a scenario's own seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the CSV here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Scenario file for `run`.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Also write the event trace to this path.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate I/O throughput per VM count and transfer size.
    BenchThroughput {
        #[arg(long, value_delimiter = ',')]
        vm_counts: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<u64>>,
    },
    /// Energy of the reference workload for 1..=N accelerators.
    BenchEnergy {
        #[arg(long, default_value_t = 20)]
        max_accelerators: u32,
    },
    /// Full-only versus partial-only reconfiguration time per VM count.
    BenchReconfig {
        #[arg(long, value_delimiter = ',')]
        vm_counts: Option<Vec<u32>>,
    },
    /// Run a scenario file (or the built-in example) and emit metric samples.
    Run,
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn scenario_failure(source: &str, e: &ScenarioError) -> String {
    match e.line() {
        Some(line) => format!("{source}:{line}: {}", strip_line(e)),
        None => format!("{source}: {e}"),
    }
}

fn strip_line(e: &ScenarioError) -> String {
    match e {
        ScenarioError::Parse { message, .. } => format!("parse error: {message}"),
        ScenarioError::Validation { field, message, .. } => format!("invalid `{field}`: {message}"),
    }
}

enum Failure {
    Scenario(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let want_trace = cli.trace.is_some();
    let (csv, trace) = match cli.command {
        Command::BenchThroughput { vm_counts, sizes } => {
            let counts = vm_counts.unwrap_or_else(default_vm_counts);
            let sizes = sizes.unwrap_or_else(default_sizes);
            let o = bench_throughput(&counts, &sizes, seed, want_trace).map_err(anyhow::Error::from)?;
            (o.csv, o.trace)
        }
        Command::BenchEnergy { max_accelerators } => {
            let o = bench_energy(max_accelerators, seed, want_trace).map_err(anyhow::Error::from)?;
            (o.csv, o.trace)
        }
        Command::BenchReconfig { vm_counts } => {
            let counts = vm_counts.unwrap_or_else(|| (1..=16).collect());
            let o = bench_reconfig(&counts, seed, want_trace).map_err(anyhow::Error::from)?;
            (o.csv, o.trace)
        }
        Command::Run => {
            let (source, text) = match &cli.scenario {
                Some(p) => (
                    p.display().to_string(),
                    fs::read_to_string(p)
                        .with_context(|| format!("reading scenario {}", p.display()))?,
                ),
                None => ("<built-in example>".to_string(), EXAMPLE_SCENARIO.to_string()),
            };
            let mut scenario = Scenario::parse(&text)
                .map_err(|e| Failure::Scenario(scenario_failure(&source, &e)))?;
            if let Some(s) = cli.seed {
                scenario.seed = s;
            }
            let o = scenario
                .run(want_trace)
                .map_err(|e| Failure::Scenario(scenario_failure(&source, &e)))?;
            (o.metrics_csv, o.trace)
        }
    };
    emit(cli.out.as_deref(), &csv)?;
    if let Some(p) = &cli.trace {
        fs::write(p, trace)
            .with_context(|| format!("writing trace {}", p.display()))
            .map_err(Failure::Other)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Scenario(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
