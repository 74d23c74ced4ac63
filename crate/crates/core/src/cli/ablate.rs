use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::manifest::RunManifest;
use super::plot::sample_std;
use crate::config::{Algorithm, TrainConfig};
use crate::error::{Error, Result};
use crate::trainer::{run_training, RunOptions, StepMetrics};

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub step: usize,
    pub seeds: usize,
    pub eval_mean: f64,
    pub eval_std: f64,
}

#[derive(Debug, Clone)]
pub struct AblationPlan {
    pub base: TrainConfig,
    pub variants: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    /// Steps to tabulate; `None` means every evaluation step all seeds share.
    pub checkpoints: Option<Vec<usize>>,
}

impl AblationPlan {
    pub fn run_dir(out: &Path, variant: Algorithm, seed: u64) -> PathBuf {
        out.join(variant.name()).join(format!("seed_{seed}"))
    }

    pub fn config(&self, variant: Algorithm, seed: u64) -> TrainConfig {
        TrainConfig {
            algorithm: variant,
            seed,
            ..self.base.clone()
        }
    }
}

/// One row per (variant, checkpoint) with mean and sample std of eval accuracy over seeds.
pub fn summarize(variant: Algorithm, runs: &[Vec<StepMetrics>], checkpoints: Option<&[usize]>) -> Vec<SummaryRow> {
    let mut per_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for m in run {
            if let Some(e) = m.eval_avg_at_k {
                per_step.entry(m.step).or_default().push(e);
            }
        }
    }
    per_step
        .into_iter()
        .filter(|(s, vs)| vs.len() == runs.len() && checkpoints.is_none_or(|c| c.contains(s)))
        .map(|(step, vs)| SummaryRow {
            variant: variant.name().to_string(),
            step,
            seeds: vs.len(),
            eval_mean: vs.iter().sum::<f64>() / vs.len() as f64,
            eval_std: sample_std(&vs),
        })
        .collect()
}

/// Trains every (variant, seed) pair into `out/<VARIANT>/seed_<s>` and writes `summary.csv`.
pub fn run_ablation(plan: &AblationPlan, out: &Path, opts: &RunOptions) -> Result<Vec<SummaryRow>> {
    if plan.variants.is_empty() || plan.seeds.is_empty() {
        return Err(Error::InvalidInput(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    for &v in &plan.variants {
        plan.config(v, plan.seeds[0]).validate()?;
    }
    let mut rows = Vec::new();
    for &variant in &plan.variants {
        let mut runs = Vec::new();
        for &seed in &plan.seeds {
            let cfg = plan.config(variant, seed);
            let dir = AblationPlan::run_dir(out, variant, seed);
            let summary = run_training(&cfg, &dir, opts)?;
            RunManifest::collect(&cfg, &dir)?.write(&dir)?;
            runs.push(summary.metrics);
        }
        rows.extend(summarize(variant, &runs, plan.checkpoints.as_deref()));
    }
    let path = out.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(step: usize, eval: Option<f64>) -> StepMetrics {
        StepMetrics {
            step,
            wall_seconds: 0.0,
            mean_loss: 0.0,
            grpo_frac: 1.0,
            sdpo_frac: 0.0,
            teacher_avail_frac: 0.0,
            mean_teacher_entropy: None,
            mean_response_length: 1.0,
            train_accuracy: 0.0,
            eval_avg_at_k: eval,
            grad_norm: 0.0,
            dropped_token_count: 0,
        }
    }

    #[test]
    fn summary_rows_per_checkpoint() {
        let a = vec![m(0, Some(0.1)), m(1, None), m(2, Some(0.5))];
        let b = vec![m(0, Some(0.3)), m(1, None), m(2, Some(0.7))];
        let c = vec![m(0, Some(0.2)), m(1, None), m(2, Some(0.6))];
        let rows = summarize(Algorithm::Srpo, &[a.clone(), b.clone(), c.clone()], None);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].step, 2);
        assert_eq!(rows[1].seeds, 3);
        assert!((rows[1].eval_mean - 0.6).abs() < 1e-12);
        assert!((rows[1].eval_std - 0.1).abs() < 1e-12);
        let only = summarize(Algorithm::Grpo, &[a, b, c], Some(&[2]));
        assert_eq!(only.len(), 1);
        assert_eq!(only[0].variant, "GRPO");
    }
}
