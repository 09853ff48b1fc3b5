//! Trial records: a JSON summary plus a per-tick CSV, and bit-exact replay
//! from the recorded operator inputs.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::metrics::{deviation_mae, polyline_length, DeviationMetrics};
use crate::harness::operator::{OperatorInput, OperatorKind, OperatorSource, ReplayOperator, ScriptedOperator};
use crate::harness::session::{
    boundary_code, boundary_from_code, object_code, object_from_code, Condition, LoggedEvent, Outcome, Session,
    SessionError, TickRow,
};
use crate::model::{joint_vector, BaseVelocity, Pose2D, Wrench6};
use crate::modes::ControlMode;
use crate::scenario::{Scenario, ScenarioConfig, ScenarioError};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("summary json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}:{line}: {msg}")]
    Csv { path: String, line: usize, msg: String },
    #[error("record schema version {found} is not supported (expected {RECORD_SCHEMA_VERSION})")]
    Version { found: u32 },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordError + '_ {
    move |source| RecordError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordLevel {
    /// Summary and hash only.
    Summary,
    /// Also keep every tick row.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub schema_version: u32,
    pub scenario_hash: String,
    pub seed: u64,
    pub condition: Condition,
    /// Operator kind, or `remote` for a bridge client.
    pub operator: String,
    /// None if the session was stopped before it ended.
    pub outcome: Option<Outcome>,
    pub ticks: u64,
    /// SHA-256 over every tick row.
    pub record_hash: String,
    pub metrics: DeviationMetrics,
    pub planner_replans: u32,
    pub events: Vec<LoggedEvent>,
    /// Planner reference for the navigation phase, (x, y, heading).
    pub reference: Vec<[f64; 3]>,
    /// Base positions driven during the navigation phase.
    pub track: Vec<[f64; 2]>,
    pub wall_time_s: f64,
    pub ticks_per_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub summary: TrialSummary,
    pub rows: Vec<TickRow>,
}

/// Operator used for a condition unless overridden.
pub fn default_operator(condition: Condition) -> OperatorKind {
    match condition {
        Condition::DistractedCues => OperatorKind::Distracted,
        _ => OperatorKind::Compliant,
    }
}

/// Runs one session to completion with any operator source.
pub fn run_session<O: OperatorSource + ?Sized>(
    scenario: &Scenario,
    condition: Condition,
    seed: u64,
    operator_label: &str,
    operator: &mut O,
    level: RecordLevel,
) -> Result<TrialRecord, SessionError> {
    let started = Instant::now();
    let mut session = Session::new(scenario, condition, seed)?;
    let mut rows = Vec::new();
    let mut ticks = 0u64;
    session.run(operator, |r| {
        ticks += 1;
        if level == RecordLevel::Full {
            rows.push(*r);
        }
    })?;
    Ok(finish_record(&session, seed, operator_label, ticks, started.elapsed().as_secs_f64(), rows))
}

/// Builds the record of a finished (or stopped) session.
pub fn finish_record(
    session: &Session,
    seed: u64,
    operator_label: &str,
    ticks: u64,
    wall: f64,
    rows: Vec<TickRow>,
) -> TrialRecord {
    let times = session.times();
    let end = times.end.unwrap_or(session.world().state().time);
    let reference = session.nav_reference();
    let ref_xy: Vec<(f64, f64)> = reference.iter().map(|p| (p.x, p.y)).collect();
    let track = session.nav_track();
    let (mae_x, mae_y) = deviation_mae(track, &ref_xy).unwrap_or((f64::NAN, f64::NAN));
    let metrics = DeviationMetrics {
        mae_x,
        mae_y,
        nav_time: times.nav_end.unwrap_or(end),
        manip_time: times.manip_time,
        total_time: end,
        path_length: polyline_length(track),
        collisions: session.world().state().collisions,
    };
    let summary = TrialSummary {
        schema_version: RECORD_SCHEMA_VERSION,
        scenario_hash: session.scenario().hash(),
        seed,
        condition: session.condition(),
        operator: operator_label.to_string(),
        outcome: session.outcome(),
        ticks,
        record_hash: session.record_hash(),
        metrics,
        planner_replans: session.assist().replans(),
        events: session.events().to_vec(),
        reference: reference.iter().map(|p| [p.x, p.y, p.gamma]).collect(),
        track: track.iter().map(|p| [p.0, p.1]).collect(),
        wall_time_s: wall,
        ticks_per_s: ticks as f64 / wall.max(1e-9),
    };
    TrialRecord { summary, rows }
}

/// One scripted trial. The operator defaults to the condition's own kind.
pub fn run_trial(
    scenario: &Scenario,
    condition: Condition,
    seed: u64,
    operator: Option<OperatorKind>,
    level: RecordLevel,
) -> Result<TrialRecord, SessionError> {
    let kind = operator.unwrap_or(default_operator(condition));
    let mut op = ScriptedOperator::new(kind, &scenario.config, seed);
    run_session(scenario, condition, seed, kind.as_str(), &mut op, level)
}

/// What goes on disk next to the CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SummaryFile {
    #[serde(flatten)]
    summary: TrialSummary,
    rows_file: String,
    scenario_toml: String,
    map_text: String,
    chain_text: String,
}

pub const CSV_HEADER: &str = "tick,time,mode,in_fx,in_fy,in_fz,in_tx,in_ty,in_tz,keys,\
leader_x,leader_y,leader_z,leader_roll,leader_pitch,leader_yaw,\
cue_fx,cue_fy,cue_fz,cue_tx,cue_ty,cue_tz,cmd_vx,cmd_wz,boundary,stiffen,home,\
look_x,look_y,look_gamma,base_x,base_y,base_gamma,q1,q2,q3,q4,q5,q6,q7,object,collisions";

fn csv_line(r: &TickRow, out: &mut String) {
    out.clear();
    let _ = write!(out, "{},{},{}", r.tick, r.time, r.mode.as_str());
    for v in r.input.wrench.to_array() {
        let _ = write!(out, ",{v}");
    }
    let _ = write!(out, ",{}", r.input.keys());
    for v in r.leader_pose {
        let _ = write!(out, ",{v}");
    }
    for v in r.cue.to_array() {
        let _ = write!(out, ",{v}");
    }
    let _ = write!(
        out,
        ",{},{},{},{},{}",
        r.base_cmd.v_x,
        r.base_cmd.v_gamma,
        boundary_code(r.boundary),
        r.stiffen as u8,
        r.home as u8
    );
    match r.lookahead {
        Some(p) => {
            let _ = write!(out, ",{},{},{}", p.x, p.y, p.gamma);
        }
        None => out.push_str(",,,"),
    }
    let _ = write!(out, ",{},{},{}", r.base.x, r.base.y, r.base.gamma);
    for v in r.follower_q.iter() {
        let _ = write!(out, ",{v}");
    }
    let _ = write!(out, ",{},{}", object_code(r.object_state), r.collisions);
}

fn parse_line(line: &str) -> Result<TickRow, String> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != CSV_HEADER.split(',').count() {
        return Err(format!("expected {} fields, found {}", CSV_HEADER.split(',').count(), f.len()));
    }
    let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {i} ({:?}): {e}", f[i]));
    let int = |i: usize| f[i].parse::<u64>().map_err(|e| format!("field {i} ({:?}): {e}", f[i]));
    let arr6 = |o: usize| -> Result<[f64; 6], String> {
        let mut a = [0.0; 6];
        for (k, v) in a.iter_mut().enumerate() {
            *v = num(o + k)?;
        }
        Ok(a)
    };
    let mode = ControlMode::parse(f[2]).ok_or_else(|| format!("unknown mode {:?}", f[2]))?;
    let keys = int(9)? as u8;
    let lookahead = if f[27].is_empty() {
        None
    } else {
        Some(Pose2D {
            x: num(27)?,
            y: num(28)?,
            gamma: num(29)?,
        })
    };
    let mut q = [0.0; 7];
    for (k, v) in q.iter_mut().enumerate() {
        *v = num(33 + k)?;
    }
    Ok(TickRow {
        tick: int(0)?,
        time: num(1)?,
        mode,
        input: OperatorInput::with_keys(Wrench6::from_array(arr6(3)?), keys),
        leader_pose: arr6(10)?,
        cue: Wrench6::from_array(arr6(16)?),
        base_cmd: BaseVelocity::new(num(22)?, num(23)?),
        boundary: boundary_from_code(int(24)? as u8).ok_or("bad boundary code")?,
        stiffen: int(25)? != 0,
        home: int(26)? != 0,
        lookahead,
        base: Pose2D {
            x: num(30)?,
            y: num(31)?,
            gamma: num(32)?,
        },
        follower_q: joint_vector(q),
        object_state: object_from_code(int(40)? as u8).ok_or("bad object code")?,
        collisions: int(41)? as u32,
    })
}

pub fn write_rows_csv(path: &Path, rows: &[TickRow]) -> Result<(), RecordError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut line = String::with_capacity(512);
    writeln!(w, "{CSV_HEADER}").map_err(io_err(path))?;
    for r in rows {
        csv_line(r, &mut line);
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<TickRow>, RecordError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if i == 0 {
            if line != CSV_HEADER {
                return Err(RecordError::Csv {
                    path: path.display().to_string(),
                    line: 1,
                    msg: "unexpected header".into(),
                });
            }
            continue;
        }
        rows.push(parse_line(&line).map_err(|msg| RecordError::Csv {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        })?);
    }
    Ok(rows)
}

impl TrialRecord {
    pub fn file_stem(&self) -> String {
        format!(
            "trial_c{}_{}_s{}",
            self.summary.condition.number(),
            self.summary.operator,
            self.summary.seed
        )
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`. Returns the JSON path.
    pub fn write(&self, dir: &Path, scenario: &Scenario) -> Result<PathBuf, RecordError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let stem = self.file_stem();
        let csv = dir.join(format!("{stem}.csv"));
        write_rows_csv(&csv, &self.rows)?;
        let file = SummaryFile {
            summary: self.summary.clone(),
            rows_file: format!("{stem}.csv"),
            scenario_toml: scenario.config.to_toml(),
            map_text: scenario.map_text.clone(),
            chain_text: scenario.chain_text.clone(),
        };
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(&file)?).map_err(io_err(&json))?;
        Ok(json)
    }
}

/// A record read back from disk with the scenario it was run on.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub summary: TrialSummary,
    pub scenario: Scenario,
    pub rows: Vec<TickRow>,
}

fn read_versioned(json_path: &Path) -> Result<String, RecordError> {
    let text = std::fs::read_to_string(json_path).map_err(io_err(json_path))?;
    let version: serde_json::Value = serde_json::from_str(&text)?;
    let found = version.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != RECORD_SCHEMA_VERSION {
        return Err(RecordError::Version { found });
    }
    Ok(text)
}

/// Only the summary of a record file; the per-tick rows are not read.
pub fn load_summary(json_path: &Path) -> Result<TrialSummary, RecordError> {
    Ok(serde_json::from_str(&read_versioned(json_path)?)?)
}

pub fn load_record(json_path: &Path) -> Result<LoadedRecord, RecordError> {
    let text = read_versioned(json_path)?;
    let file: SummaryFile = serde_json::from_str(&text)?;
    let config = ScenarioConfig::from_toml(&file.scenario_toml)?;
    let scenario = Scenario::from_parts(config, file.map_text, file.chain_text)?;
    let dir = json_path.parent().unwrap_or(Path::new("."));
    let rows = read_rows_csv(&dir.join(&file.rows_file))?;
    Ok(LoadedRecord {
        summary: file.summary,
        scenario,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub ticks: usize,
    /// First tick whose re-simulated row differs from the record.
    pub first_mismatch: Option<u64>,
    pub expected_hash: String,
    pub actual_hash: String,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.first_mismatch.is_none() && self.expected_hash == self.actual_hash
    }
}

fn rows_equal(a: &TickRow, b: &TickRow) -> bool {
    let mut ha = sha2::Sha256::default();
    let mut hb = sha2::Sha256::default();
    a.hash_into(&mut ha);
    b.hash_into(&mut hb);
    use sha2::Digest;
    ha.finalize() == hb.finalize()
}

/// Re-simulates a record from its operator inputs and compares every row.
pub fn replay(record: &LoadedRecord) -> Result<ReplayReport, RecordError> {
    let inputs = record.rows.iter().map(|r| r.input).collect();
    let mut op = ReplayOperator::new(inputs);
    let s = &record.summary;
    let again = run_session(&record.scenario, s.condition, s.seed, &s.operator, &mut op, RecordLevel::Full)?;
    let first_mismatch = record
        .rows
        .iter()
        .zip(again.rows.iter())
        .find(|(a, b)| !rows_equal(a, b))
        .map(|(a, _)| a.tick)
        .or_else(|| (record.rows.len() != again.rows.len()).then_some(record.rows.len().min(again.rows.len()) as u64));
    Ok(ReplayReport {
        ticks: again.rows.len(),
        first_mismatch,
        expected_hash: s.record_hash.clone(),
        actual_hash: again.summary.record_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_line_round_trips() {
        let mut s = Scenario::builtin_default();
        s.config.sim.timeout_s = 0.3;
        let rec = run_trial(&s, Condition::Cues, 4, None, RecordLevel::Full).unwrap();
        let mut line = String::new();
        for r in &rec.rows {
            csv_line(r, &mut line);
            let back = parse_line(&line).unwrap();
            assert!(rows_equal(r, &back), "{line}");
        }
    }

    #[test]
    fn malformed_rows_are_reported() {
        assert!(parse_line("1,2,3").is_err());
        let bad = CSV_HEADER.split(',').map(|_| "x").collect::<Vec<_>>().join(",");
        assert!(parse_line(&bad).is_err());
    }
}
