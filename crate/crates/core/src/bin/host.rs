use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use jamus_core::host::{self, exit, CheckOutcome, RunOptions};

#[derive(Parser)]
#[command(name = "host", about = "Run, check and verify resource-contract scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print its report.
    Run {
        scenario: PathBuf,
        /// Write the event trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Use a seeded random interleaving instead of round-robin.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the supervision flow log here.
        #[arg(long)]
        flow: Option<PathBuf>,
    },
    /// Evaluate a contract against a capacity configuration.
    Check { contract: PathBuf, capacity: PathBuf },
    /// Replay a trace against its scenario.
    Verify { trace: PathBuf, scenario: PathBuf },
}

fn read(path: &Path) -> Result<String, ExitCode> {
    fs::read_to_string(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(exit::SCHEMA as u8)
    })
}

fn write(path: &Path, text: &str) -> Result<(), ExitCode> {
    fs::write(path, text).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::FAILURE
    })
}

/// Writes to standard output, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn load_scenario(path: &Path) -> Result<host::Scenario, ExitCode> {
    host::parse_scenario(&read(path)?).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(exit::SCHEMA as u8)
    })
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) | Err(code) => code,
    }
}

fn dispatch(command: Command) -> Result<ExitCode, ExitCode> {
    match command {
        Command::Run {
            scenario,
            trace,
            report,
            seed,
            flow,
        } => {
            let s = load_scenario(&scenario)?;
            let mut out = host::run(
                &s,
                &RunOptions {
                    seed,
                    flow: flow.is_some(),
                },
            );
            if let Some(path) = &trace {
                write(path, &out.trace_text())?;
                out.report.trace = Some(path.display().to_string());
            }
            if let Some(path) = &flow {
                write(path, &out.flow_text())?;
            }
            match &report {
                Some(path) => write(path, &out.report.to_json())?,
                None => emit(&out.report.to_json()),
            }
            Ok(ExitCode::from(out.exit_code() as u8))
        }
        Command::Check { contract, capacity } => {
            let outcome = host::check(&read(&contract)?, &read(&capacity)?);
            match &outcome {
                CheckOutcome::Report(r) => {
                    emit(&format!("{}\n", serde_json::to_string_pretty(r).expect("reports serialize")));
                }
                CheckOutcome::Invalid(msg) => eprintln!("schema error: {msg}"),
            }
            Ok(ExitCode::from(outcome.exit_code() as u8))
        }
        Command::Verify { trace, scenario } => {
            let s = load_scenario(&scenario)?;
            match host::verify_trace(&read(&trace)?, &s) {
                Ok(found) if found.is_empty() => {
                    emit("ok\n");
                    Ok(ExitCode::SUCCESS)
                }
                Ok(found) => {
                    for d in &found {
                        emit(&format!("{d}\n"));
                    }
                    Ok(ExitCode::from(exit::REJECTED as u8))
                }
                Err(e) => {
                    eprintln!("{}: {e}", trace.display());
                    Ok(ExitCode::from(exit::SCHEMA as u8))
                }
            }
        }
    }
}
