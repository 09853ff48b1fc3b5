//! `teleop`: single trials, batches, replay, plots and the live bridge.
//!
//! Exit codes: 0 success, 2 invalid input (arguments, scenario or record
//! files), 3 a trial or replay failed.

mod commands;
mod plot;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use teleop_core::harness::{Condition, OperatorKind};

#[derive(Parser, Debug)]
#[command(name = "teleop", version, about = "Shared-control mobile manipulation trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one trial with a scripted operator and write its record.
    Run(RunArgs),
    /// Run many seeded trials per condition and report statistics.
    Batch(BatchArgs),
    /// Re-simulate a recorded trial and check it reproduces bit for bit.
    Replay(ReplayArgs),
    /// Draw deviation, time and trajectory figures from records.
    Plot(PlotArgs),
    /// Serve a live trial over WebSocket.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct ScenarioArg {
    /// Scenario TOML; the bundled scenario if omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory.
    #[arg(long, env = "TELEOP_OUT_DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// 1 = cues, 2 = no cues, 3 = distracted operator with cues.
    #[arg(long, value_parser = parse_condition, default_value = "1")]
    condition: Condition,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Operator model; defaults to the condition's own.
    #[arg(long, value_enum)]
    operator: Option<OperatorArg>,
    #[command(flatten)]
    out: OutArg,
    /// Also write the local planner's choice at every planning tick as JSON lines.
    #[arg(long)]
    plan_trace: bool,
}

#[derive(Args, Debug)]
struct BatchArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Seeds per condition.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 1)]
    first_seed: u64,
    /// Comma-separated condition numbers.
    #[arg(long, value_delimiter = ',', value_parser = parse_condition, default_value = "1,2,3")]
    conditions: Vec<Condition>,
    #[arg(long, value_enum)]
    operator: Option<OperatorArg>,
    #[command(flatten)]
    out: OutArg,
    /// Write every trial's full record, not just the batch summary.
    #[arg(long)]
    keep_records: bool,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// Record JSON written by `run`.
    #[arg(long)]
    record: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Directory holding trial records and/or batch summaries.
    #[arg(long)]
    records: PathBuf,
    /// Where the SVG files go; defaults to the records directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed whose paths are drawn in the trajectory figure; the smallest if omitted.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = teleop_bridge::DEFAULT_PORT)]
    port: u16,
    /// Listen on every interface instead of loopback only.
    #[arg(long)]
    public: bool,
    #[arg(long, value_parser = parse_condition, default_value = "1")]
    condition: Condition,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PaceArg::Realtime)]
    pace: PaceArg,
    /// Pause the simulation once no operator has been connected this long (s).
    #[arg(long)]
    pause_after: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum OperatorArg {
    Compliant,
    Ignoring,
    Distracted,
}

impl From<OperatorArg> for OperatorKind {
    fn from(o: OperatorArg) -> Self {
        match o {
            OperatorArg::Compliant => OperatorKind::Compliant,
            OperatorArg::Ignoring => OperatorKind::Ignoring,
            OperatorArg::Distracted => OperatorKind::Distracted,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PaceArg {
    Realtime,
    Unpaced,
    Lockstep,
}

fn parse_condition(s: &str) -> Result<Condition, String> {
    s.trim()
        .parse::<u8>()
        .ok()
        .and_then(Condition::from_number)
        .ok_or_else(|| format!("condition must be 1, 2 or 3, got {s:?}"))
}

/// Failure classes mapped to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Fault(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Fault(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => commands::run(a),
        Command::Batch(a) => commands::batch(a),
        Command::Replay(a) => commands::replay(a),
        Command::Plot(a) => plot::plot(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
