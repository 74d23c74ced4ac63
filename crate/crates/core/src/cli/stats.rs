use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::env::is_correct;
use crate::error::{Error, Result};
use crate::router::{routing_stats, RoutingStats};
use crate::trainer::{read_metrics, RolloutRecord};
use crate::types::RoutingDecision;

pub const CROSS_CHECK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRouting {
    pub step: usize,
    pub rollouts: usize,
    pub grpo_frac: f64,
    pub sdpo_frac: f64,
    pub teacher_avail_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub steps: Vec<StepRouting>,
    pub overall: RoutingStats,
    /// Largest deviation from metrics.csv, when one was compared.
    pub max_abs_diff: Option<f64>,
}

fn schema(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Routing decisions per step, read from a rollout log.
pub fn read_decisions(path: &Path) -> Result<BTreeMap<usize, Vec<RoutingDecision>>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut by_step: BTreeMap<usize, Vec<RoutingDecision>> = BTreeMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RolloutRecord = serde_json::from_str(&line).map_err(|e| schema(path, i + 1, e.to_string()))?;
        let d = RoutingDecision {
            correct: is_correct(rec.reward),
            teacher_available: rec.teacher_index.is_some(),
            branch: rec.branch,
            teacher_index: rec.teacher_index,
        };
        d.validate(rec.rollout_index)
            .map_err(|e| schema(path, i + 1, e.to_string()))?;
        by_step.entry(rec.step).or_default().push(d);
    }
    if by_step.is_empty() {
        return Err(schema(path, 0, "no rollout records"));
    }
    Ok(by_step)
}

/// Recomputes routing fractions from a rollout log and, if `metrics` is given,
/// checks them against the logged per-step values.
pub fn routing_report(rollouts: &Path, metrics: Option<&Path>) -> Result<StatsReport> {
    let by_step = read_decisions(rollouts)?;
    let steps = by_step
        .iter()
        .map(|(&step, ds)| {
            let s = routing_stats(ds)?;
            Ok(StepRouting {
                step,
                rollouts: ds.len(),
                grpo_frac: s.grpo_fraction,
                sdpo_frac: s.sdpo_fraction,
                teacher_avail_frac: s.teacher_avail_fraction,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let overall = routing_stats(by_step.values().flatten())?;

    let max_abs_diff = match metrics {
        None => None,
        Some(mpath) => {
            let rows = read_metrics(mpath)?;
            if rows.len() != steps.len() || rows.iter().zip(&steps).any(|(m, s)| m.step != s.step) {
                return Err(Error::InvalidInput(format!(
                    "{} covers {} steps but {} covers {}",
                    mpath.display(),
                    rows.len(),
                    rollouts.display(),
                    steps.len()
                )));
            }
            let mut worst = 0.0f64;
            for (m, s) in rows.iter().zip(&steps) {
                for (a, b) in [
                    (m.grpo_frac, s.grpo_frac),
                    (m.sdpo_frac, s.sdpo_frac),
                    (m.teacher_avail_frac, s.teacher_avail_frac),
                ] {
                    worst = worst.max((a - b).abs());
                }
            }
            if worst > CROSS_CHECK_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "routing fractions differ from {} by {worst:e}",
                    mpath.display()
                )));
            }
            Some(worst)
        }
    };
    Ok(StatsReport {
        steps,
        overall,
        max_abs_diff,
    })
}

/// The metrics file written next to a rollout log, if there is one.
pub fn sibling_metrics(rollouts: &Path) -> Option<PathBuf> {
    let p = rollouts.with_file_name(crate::trainer::METRICS_FILE);
    p.exists().then_some(p)
}
