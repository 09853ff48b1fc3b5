//! Figures from a directory of trial records and batch summaries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use teleop_core::grid::CellClass;
use teleop_core::harness::batch::{mean_sem, MeanSem};
use teleop_core::harness::record::load_summary;
use teleop_core::harness::{BatchSummary, Condition, TrialSummary};
use teleop_core::scenario::{Scenario, ScenarioConfig};

use crate::svg::{Figure, PALETTE};
use crate::{CliError, PlotArgs};

/// Trials found in a directory, one per (condition, operator, seed), plus
/// the map of the first full record seen.
struct Collected {
    trials: Vec<TrialSummary>,
    map: Option<Scenario>,
}

fn collect(dir: &Path) -> Result<Collected, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Invalid(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut seen = BTreeMap::new();
    let mut map = None;
    for p in paths {
        let Ok(text) = std::fs::read_to_string(&p) else { continue };
        let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) else {
            log::warn!("skipping {}: not JSON", p.display());
            continue;
        };
        let found: Vec<TrialSummary> = if value.get("trials").is_some() {
            match serde_json::from_value::<BatchSummary>(value) {
                Ok(b) => b.trials,
                Err(e) => {
                    log::warn!("skipping {}: {e}", p.display());
                    continue;
                }
            }
        } else {
            match load_summary(&p) {
                Ok(s) => {
                    if map.is_none() {
                        map = scenario_of(&value);
                    }
                    vec![s]
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", p.display());
                    continue;
                }
            }
        };
        for t in found {
            seen.entry((t.condition.number(), t.operator.clone(), t.seed)).or_insert(t);
        }
    }
    Ok(Collected {
        trials: seen.into_values().collect(),
        map,
    })
}

fn scenario_of(v: &serde_json::Value) -> Option<Scenario> {
    let toml = v.get("scenario_toml")?.as_str()?;
    let map = v.get("map_text")?.as_str()?;
    let chain = v.get("chain_text")?.as_str()?;
    let config = ScenarioConfig::from_toml(toml).ok()?;
    Scenario::from_parts(config, map.to_string(), chain.to_string()).ok()
}

fn cond_label(c: Condition) -> String {
    match c {
        Condition::Cues => "1: cues".into(),
        Condition::NoCues => "2: no cues".into(),
        Condition::DistractedCues => "3: distracted".into(),
    }
}

fn by_condition(trials: &[TrialSummary]) -> BTreeMap<u8, (Condition, Vec<&TrialSummary>)> {
    let mut m: BTreeMap<u8, (Condition, Vec<&TrialSummary>)> = BTreeMap::new();
    for t in trials {
        m.entry(t.condition.number()).or_insert((t.condition, Vec::new())).1.push(t);
    }
    m
}

fn stat(ts: &[&TrialSummary], f: impl Fn(&TrialSummary) -> f64) -> MeanSem {
    let xs: Vec<f64> = ts.iter().map(|t| f(t)).filter(|x| x.is_finite()).collect();
    if xs.is_empty() {
        MeanSem { mean: 0.0, sem: 0.0 }
    } else {
        mean_sem(&xs)
    }
}

/// Grouped bars: one group per condition, one bar per metric.
fn grouped_bars(title: &str, y_label: &str, trials: &[TrialSummary], metrics: &[(&str, fn(&TrialSummary) -> f64)]) -> String {
    let groups = by_condition(trials);
    let stats: Vec<(Condition, Vec<MeanSem>)> = groups
        .values()
        .map(|(c, ts)| (*c, metrics.iter().map(|(_, f)| stat(ts, f)).collect()))
        .collect();
    let top = stats
        .iter()
        .flat_map(|(_, ms)| ms.iter().map(|m| m.mean + m.sem))
        .fold(0.0f64, f64::max);
    let n = stats.len().max(1) as f64;
    let mut fig = Figure::new(title, (0.0, n), (0.0, top * 1.15)).labels("condition", y_label);
    let width = 0.7 / metrics.len() as f64;
    let mut cats = Vec::new();
    for (gi, (c, ms)) in stats.iter().enumerate() {
        let base = gi as f64 + 0.15;
        for (mi, m) in ms.iter().enumerate() {
            let center = base + width * (mi as f64 + 0.5);
            fig.bar(center, width * 0.45, m.mean, m.sem, PALETTE[mi % PALETTE.len()]);
        }
        let n = groups.get(&c.number()).map_or(0, |g| g.1.len());
        fig.text_at(gi as f64 + 0.5, top * 1.08, "middle", &format!("n = {n}"));
        cats.push((gi as f64 + 0.5, cond_label(*c)));
    }
    for (mi, (name, _)) in metrics.iter().enumerate() {
        fig.legend(name, PALETTE[mi % PALETTE.len()]);
    }
    fig.finish_categorical(&cats)
}

fn trajectory(trials: &[TrialSummary], seed: u64, map: Option<&Scenario>) -> String {
    let chosen: Vec<&TrialSummary> = trials.iter().filter(|t| t.seed == seed).collect();
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for t in &chosen {
        xs.extend(t.reference.iter().map(|p| p[0]).chain(t.track.iter().map(|p| p[0])));
        ys.extend(t.reference.iter().map(|p| p[1]).chain(t.track.iter().map(|p| p[1])));
    }
    let mut cells = Vec::new();
    if let Some(s) = map {
        let g = &s.grid;
        let half = g.resolution() / 2.0;
        for (cell, class) in g.cells() {
            if class == CellClass::Free {
                continue;
            }
            let (cx, cy) = g.grid_to_world(cell);
            cells.push((cx, cy, half, class));
            xs.extend([cx - half, cx + half]);
            ys.extend([cy - half, cy + half]);
        }
    }
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() {
            (lo, hi)
        } else {
            (0.0, 1.0)
        }
    };
    let mut fig = Figure::new(&format!("Navigation paths, seed {seed}"), range(&xs), range(&ys)).labels("x (m)", "y (m)");
    fig.equal_aspect();
    for (cx, cy, half, class) in cells {
        let fill = if class == CellClass::Known { "#555" } else { "#aaa" };
        fig.rect(cx - half, cy - half, cx + half, cy + half, fill);
    }
    // each trial replans on its own, so every track gets its own dashed reference
    for (i, t) in chosen.iter().enumerate() {
        let color = PALETTE[(t.condition.number() as usize - 1 + i / 3 * 3) % PALETTE.len()];
        let r: Vec<(f64, f64)> = t.reference.iter().map(|p| (p[0], p[1])).collect();
        fig.polyline(&r, color, true);
        let tr: Vec<(f64, f64)> = t.track.iter().map(|p| (p[0], p[1])).collect();
        fig.polyline(&tr, color, false);
        fig.legend(&format!("{} ({})", cond_label(t.condition), t.operator), color);
    }
    if !chosen.is_empty() {
        fig.legend("dashed: reference", "#fff");
    }
    fig.finish()
}

pub fn plot(a: PlotArgs) -> Result<(), CliError> {
    let got = collect(&a.records)?;
    if got.trials.is_empty() {
        return Err(CliError::Invalid(format!("no trial records or batch summaries in {}", a.records.display())));
    }
    let out = a.out.unwrap_or_else(|| a.records.clone());
    std::fs::create_dir_all(&out).map_err(|e| CliError::Fault(format!("{}: {e}", out.display())))?;
    let seed = match a.seed {
        Some(s) => s,
        None => got.trials.iter().map(|t| t.seed).min().unwrap_or(0),
    };
    let with_track: Vec<TrialSummary> = got.trials.iter().filter(|t| !t.track.is_empty()).cloned().collect();
    let figures = [
        (
            "deviation.svg",
            grouped_bars(
                "Path deviation (mean ± SEM)",
                "mean absolute error (m)",
                &with_track,
                &[("along path", |t| t.metrics.mae_x), ("lateral", |t| t.metrics.mae_y)],
            ),
        ),
        (
            "time.svg",
            grouped_bars(
                "Phase durations (mean ± SEM)",
                "time (s)",
                &got.trials,
                &[("navigation", |t| t.metrics.nav_time), ("manipulation", |t| t.metrics.manip_time)],
            ),
        ),
        ("trajectory.svg", trajectory(&got.trials, seed, got.map.as_ref())),
    ];
    for (name, svg) in figures {
        let p = out.join(name);
        std::fs::write(&p, svg).map_err(|e| CliError::Fault(format!("{}: {e}", p.display())))?;
        println!("{}", p.display());
    }
    Ok(())
}
