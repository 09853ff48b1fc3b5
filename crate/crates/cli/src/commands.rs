use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use teleop_bridge::{serve as serve_bridge, Pace, ServeOptions};
use teleop_core::harness::batch::run_batch_with;
use teleop_core::harness::record::{default_operator, finish_record, load_record, replay as replay_record};
use teleop_core::harness::{
    Condition, OperatorKind, OperatorSource, RecordLevel, ScriptedOperator, Session, TrialRecord, TrialSummary,
};
use teleop_core::modes::ControlMode;
use teleop_core::planning::dwa::DwaResult;
use teleop_core::scenario::Scenario;

use crate::{BatchArgs, CliError, PaceArg, ReplayArgs, RunArgs, ServeArgs};

fn load_scenario(path: Option<&Path>) -> Result<Scenario, CliError> {
    match path {
        Some(p) => Scenario::load(p).map_err(|e| CliError::Invalid(format!("scenario {}: {e}", p.display()))),
        None => Ok(Scenario::builtin_default()),
    }
}

fn fault(e: impl std::fmt::Display) -> CliError {
    CliError::Fault(e.to_string())
}

fn print_summary(s: &TrialSummary, path: &Path) {
    let outcome = s.outcome.map_or("stopped".to_string(), |o| format!("{o:?}").to_lowercase());
    println!(
        "condition {} seed {} operator {}: {outcome} after {} ticks ({:.0} ticks/s)",
        s.condition.number(),
        s.seed,
        s.operator,
        s.ticks,
        s.ticks_per_s
    );
    let m = &s.metrics;
    println!(
        "  mae_x {:.4} m  mae_y {:.4} m  nav {:.2} s  manip {:.2} s  replans {}",
        m.mae_x, m.mae_y, m.nav_time, m.manip_time, s.planner_replans
    );
    println!("  record {}", path.display());
}

#[derive(Serialize)]
struct PlanLine<'a> {
    tick: u64,
    time: f64,
    base: [f64; 3],
    replans: u32,
    choice: Option<&'a DwaResult>,
}

/// Same loop as a plain run, with a JSON line per planning tick.
fn run_traced(
    scenario: &Scenario,
    condition: Condition,
    seed: u64,
    kind: OperatorKind,
    trace: &Path,
) -> Result<TrialRecord, CliError> {
    let file = File::create(trace).map_err(|e| fault(format!("{}: {e}", trace.display())))?;
    let mut out = BufWriter::new(file);
    let started = Instant::now();
    let mut session = Session::new(scenario, condition, seed).map_err(fault)?;
    let mut op = ScriptedOperator::new(kind, &scenario.config, seed);
    let period = scenario.config.planner.period_ticks as u64;
    let mut rows = Vec::new();
    while !session.is_finished() {
        let input = op.input(&session.view());
        let row = session.step(&input).map_err(fault)?;
        if row.tick % period == 0 && session.mode() == ControlMode::Navigation {
            let b = session.world().state().base;
            let line = PlanLine {
                tick: row.tick,
                time: row.time,
                base: [b.x, b.y, b.gamma],
                replans: session.assist().replans(),
                choice: session.assist().last(),
            };
            serde_json::to_writer(&mut out, &line).map_err(fault)?;
            out.write_all(b"\n").map_err(fault)?;
        }
        rows.push(row);
    }
    out.flush().map_err(fault)?;
    let ticks = rows.len() as u64;
    Ok(finish_record(&session, seed, kind.as_str(), ticks, started.elapsed().as_secs_f64(), rows))
}

pub fn run(a: RunArgs) -> Result<(), CliError> {
    let scenario = load_scenario(a.scenario.scenario.as_deref())?;
    let kind = a.operator.map(OperatorKind::from).unwrap_or(default_operator(a.condition));
    std::fs::create_dir_all(&a.out.out).map_err(|e| fault(format!("{}: {e}", a.out.out.display())))?;
    let record = if a.plan_trace {
        let stem = format!("trial_c{}_{}_s{}", a.condition.number(), kind.as_str(), a.seed);
        let trace = a.out.out.join(format!("{stem}.plan.jsonl"));
        let r = run_traced(&scenario, a.condition, a.seed, kind, &trace)?;
        println!("  plan trace {}", trace.display());
        r
    } else {
        teleop_core::harness::run_trial(&scenario, a.condition, a.seed, Some(kind), RecordLevel::Full).map_err(fault)?
    };
    let path = record.write(&a.out.out, &scenario).map_err(fault)?;
    print_summary(&record.summary, &path);
    Ok(())
}

pub fn batch(a: BatchArgs) -> Result<(), CliError> {
    if a.seeds == 0 {
        return Err(CliError::Invalid("--seeds must be at least 1".into()));
    }
    let scenario = load_scenario(a.scenario.scenario.as_deref())?;
    let seeds: Vec<u64> = (a.first_seed..a.first_seed + a.seeds).collect();
    let mut conditions = a.conditions.clone();
    conditions.dedup();
    let operator = a.operator.map(OperatorKind::from);
    let out = a.out.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| fault(format!("{}: {e}", out.display())))?;
    let write_errors = Mutex::new(Vec::new());
    let level = if a.keep_records { RecordLevel::Full } else { RecordLevel::Summary };
    let summary = run_batch_with(&scenario, &conditions, &seeds, operator, level, |r| {
        if a.keep_records {
            if let Err(e) = r.write(&out, &scenario) {
                write_errors.lock().unwrap_or_else(|p| p.into_inner()).push(e.to_string());
            }
        }
    })
    .map_err(fault)?;
    let errors = write_errors.into_inner().unwrap_or_else(|p| p.into_inner());
    if let Some(e) = errors.first() {
        return Err(fault(e));
    }
    let path = out.join("batch_summary.json");
    let json = serde_json::to_string_pretty(&summary).map_err(fault)?;
    std::fs::write(&path, json).map_err(|e| fault(format!("{}: {e}", path.display())))?;
    print!("{}", summary.table());
    println!("summary {}", path.display());
    Ok(())
}

pub fn replay(a: ReplayArgs) -> Result<(), CliError> {
    let record = load_record(&a.record).map_err(|e| CliError::Invalid(format!("{}: {e}", a.record.display())))?;
    if record.rows.is_empty() && record.summary.ticks > 0 {
        return Err(CliError::Invalid("record has no tick rows to replay".into()));
    }
    let report = replay_record(&record).map_err(fault)?;
    if report.matches() {
        println!("replay matches: {} ticks, hash {}", report.ticks, report.actual_hash);
        Ok(())
    } else {
        Err(CliError::Fault(format!(
            "replay diverged at tick {:?}: expected hash {}, got {}",
            report.first_mismatch, report.expected_hash, report.actual_hash
        )))
    }
}

pub fn serve(a: ServeArgs) -> Result<(), CliError> {
    let scenario = load_scenario(a.scenario.scenario.as_deref())?;
    if let Some(p) = a.pause_after {
        if !(p.is_finite() && p >= 0.0) {
            return Err(CliError::Invalid(format!("--pause-after must be a non-negative number, got {p}")));
        }
    }
    let ip = if a.public { [0, 0, 0, 0] } else { [127, 0, 0, 1] };
    let opts = ServeOptions {
        bind: SocketAddr::from((ip, a.port)),
        pace: match a.pace {
            PaceArg::Realtime => Pace::Realtime,
            PaceArg::Unpaced => Pace::Unpaced,
            PaceArg::Lockstep => Pace::Lockstep,
        },
        pause_after_s: a.pause_after,
        keep_rows: true,
        ..ServeOptions::default()
    };
    let handle = serve_bridge(&scenario, a.condition, a.seed, opts).map_err(fault)?;
    println!("listening on ws://{}", handle.local_addr());
    let record = handle.wait().map_err(fault)?;
    let path: PathBuf = record.write(&a.out.out, &scenario).map_err(fault)?;
    print_summary(&record.summary, &path);
    Ok(())
}
