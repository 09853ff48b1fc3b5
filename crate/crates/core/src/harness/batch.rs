//! Many seeded trials per condition, summary statistics and paired sign tests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::harness::operator::OperatorKind;
use crate::harness::record::{run_trial, RecordLevel, TrialRecord, TrialSummary};
use crate::harness::session::{Condition, Outcome, SessionError};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    pub sem: f64,
}

/// Mean and standard error of the mean. A single sample has zero SEM.
pub fn mean_sem(xs: &[f64]) -> MeanSem {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return MeanSem { mean: f64::NAN, sem: f64::NAN };
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return MeanSem { mean, sem: 0.0 };
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    MeanSem {
        mean,
        sem: (var / n).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    pub condition: Condition,
    pub n: usize,
    pub completed: usize,
    pub mae_x: MeanSem,
    pub mae_y: MeanSem,
    pub nav_time: MeanSem,
    pub manip_time: MeanSem,
    pub total_time: MeanSem,
    pub collisions: u32,
}

/// One-sided paired sign test of "a < b".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub metric: String,
    pub a: Condition,
    pub b: Condition,
    /// Pairs where a is strictly smaller.
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    pub p_value: f64,
}

/// P(X >= wins) for X ~ Binomial(wins + losses, 1/2). Ties are dropped.
pub fn sign_test_p(wins: u64, losses: u64) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    if wins == 0 {
        1.0
    } else {
        1.0 - b.cdf(wins - 1)
    }
}

pub fn sign_test(metric: &str, a: Condition, b: Condition, pairs: &[(f64, f64)]) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in pairs {
        if x < y {
            wins += 1;
        } else if x > y {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    SignTest {
        metric: metric.to_string(),
        a,
        b,
        wins,
        losses,
        ties,
        p_value: sign_test_p(wins, losses),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub seeds: Vec<u64>,
    pub operator: Option<OperatorKind>,
    pub trials: Vec<TrialSummary>,
    pub conditions: Vec<ConditionStats>,
    pub tests: Vec<SignTest>,
    pub warnings: Vec<String>,
}

impl BatchSummary {
    pub fn stats(&self, c: Condition) -> Option<&ConditionStats> {
        self.conditions.iter().find(|s| s.condition == c)
    }

    pub fn test(&self, metric: &str, a: Condition, b: Condition) -> Option<&SignTest> {
        self.tests.iter().find(|t| t.metric == metric && t.a == a && t.b == b)
    }

    fn paired(&self, a: Condition, b: Condition, f: impl Fn(&TrialSummary) -> f64) -> Vec<(f64, f64)> {
        self.seeds
            .iter()
            .filter_map(|s| {
                let x = self.trials.iter().find(|t| t.seed == *s && t.condition == a)?;
                let y = self.trials.iter().find(|t| t.seed == *s && t.condition == b)?;
                Some((f(x), f(y)))
            })
            .collect()
    }

    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let mut out = String::from("cond  n  done  mae_x (m)          mae_y (m)          nav (s)          manip (s)        total (s)\n");
        for s in &self.conditions {
            let f = |m: &MeanSem| format!("{:>7.4} ± {:<7.4}", m.mean, m.sem);
            out.push_str(&format!(
                "{:>4} {:>2} {:>5}  {}  {}  {}  {}  {}\n",
                s.condition.number(),
                s.n,
                s.completed,
                f(&s.mae_x),
                f(&s.mae_y),
                f(&s.nav_time),
                f(&s.manip_time),
                f(&s.total_time)
            ));
        }
        for t in &self.tests {
            out.push_str(&format!(
                "sign test {} c{} < c{}: {} of {} pairs (ties {}), p = {:.3e}\n",
                t.metric,
                t.a.number(),
                t.b.number(),
                t.wins,
                t.wins + t.losses,
                t.ties,
                t.p_value
            ));
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

/// Runs every (condition, seed) pair in parallel.
pub fn run_batch(
    scenario: &Scenario,
    conditions: &[Condition],
    seeds: &[u64],
    operator: Option<OperatorKind>,
) -> Result<BatchSummary, SessionError> {
    run_batch_with(scenario, conditions, seeds, operator, RecordLevel::Summary, |_| {})
}

/// Like [`run_batch`], handing each finished record to `each` before its
/// rows are dropped.
pub fn run_batch_with<F>(
    scenario: &Scenario,
    conditions: &[Condition],
    seeds: &[u64],
    operator: Option<OperatorKind>,
    level: RecordLevel,
    each: F,
) -> Result<BatchSummary, SessionError>
where
    F: Fn(&TrialRecord) + Sync,
{
    let jobs: Vec<(Condition, u64)> = conditions.iter().flat_map(|c| seeds.iter().map(move |s| (*c, *s))).collect();
    let trials = jobs
        .par_iter()
        .map(|(c, s)| {
            let r = run_trial(scenario, *c, *s, operator, level)?;
            each(&r);
            Ok(r.summary)
        })
        .collect::<Result<Vec<_>, SessionError>>()?;
    Ok(summarize(trials, seeds, operator))
}

pub fn summarize(trials: Vec<TrialSummary>, seeds: &[u64], operator: Option<OperatorKind>) -> BatchSummary {
    let mut warnings = Vec::new();
    if seeds.len() == 1 {
        warnings.push("a single seed per condition: SEM reported as 0".to_string());
    }
    let mut conditions = Vec::new();
    for c in Condition::ALL {
        let ts: Vec<&TrialSummary> = trials.iter().filter(|t| t.condition == c).collect();
        if ts.is_empty() {
            continue;
        }
        let col = |f: &dyn Fn(&TrialSummary) -> f64| ts.iter().map(|t| f(t)).collect::<Vec<_>>();
        let completed = ts.iter().filter(|t| t.outcome == Some(Outcome::Completed)).count();
        if completed < ts.len() {
            warnings.push(format!("condition {}: {} of {} trials did not complete", c.number(), ts.len() - completed, ts.len()));
        }
        conditions.push(ConditionStats {
            condition: c,
            n: ts.len(),
            completed,
            mae_x: mean_sem(&col(&|t| t.metrics.mae_x)),
            mae_y: mean_sem(&col(&|t| t.metrics.mae_y)),
            nav_time: mean_sem(&col(&|t| t.metrics.nav_time)),
            manip_time: mean_sem(&col(&|t| t.metrics.manip_time)),
            total_time: mean_sem(&col(&|t| t.metrics.total_time)),
            collisions: ts.iter().map(|t| t.metrics.collisions).sum(),
        });
    }
    let mut b = BatchSummary {
        seeds: seeds.to_vec(),
        operator,
        trials,
        conditions,
        tests: Vec::new(),
        warnings,
    };
    let (c1, c2, c3) = (Condition::Cues, Condition::NoCues, Condition::DistractedCues);
    type Metric = fn(&TrialSummary) -> f64;
    let comparisons: [(&str, Condition, Condition, Metric); 5] = [
        ("mae_y", c1, c2, |t| t.metrics.mae_y),
        ("mae_x", c1, c2, |t| t.metrics.mae_x),
        ("manip_time", c1, c2, |t| t.metrics.manip_time),
        ("nav_time", c1, c2, |t| t.metrics.nav_time),
        ("mae_y", c3, c2, |t| t.metrics.mae_y),
    ];
    for (name, a, bb, f) in comparisons {
        let pairs = b.paired(a, bb, f);
        if !pairs.is_empty() {
            b.tests.push(sign_test(name, a, bb, &pairs));
        }
    }
    b
}
