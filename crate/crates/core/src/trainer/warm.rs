use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::optim::{optimizer_update, AdamW};
use super::rng::stream_rng;
use crate::config::TrainConfig;
use crate::env::{gen_task, verify, TeacherContext, EOS};
use crate::error::Result;
use crate::model::{loss_gradient, sample_rollout, LossEvaluator, PolicyParams, ScoredSequence};

/// Mean token-level negative log-likelihood of fixed targets.
pub struct NllLoss {
    pub sequences: Vec<ScoredSequence>,
}

impl LossEvaluator for NllLoss {
    fn sequences(&self) -> &[ScoredSequence] {
        &self.sequences
    }

    fn evaluate(&self, rows: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
        let n: usize = self.sequences.iter().map(|s| s.response.len()).sum();
        let scale = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut adj = Vec::with_capacity(rows.len());
        for (seq, row) in self.sequences.iter().zip(rows) {
            let mut a = Array2::zeros(row.dim());
            for (t, y) in seq.response.iter().enumerate() {
                loss -= row[[t, y.index()]];
                a[[t, y.index()]] = -scale;
            }
            adj.push(a);
        }
        Ok((loss * scale, adj))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStartReport {
    pub steps: usize,
    pub final_nll: Option<f64>,
    /// Sampled accuracy on plain prompts when the warm start stopped.
    pub probe_accuracy: f64,
    /// Sampled accuracy when a correct answer is shown in teacher format.
    pub teacher_format_accuracy: f64,
    pub reached_target: bool,
}

fn probe(params: &PolicyParams, cfg: &TrainConfig) -> Result<f64> {
    let mut rng = stream_rng(cfg.seed, "warm-probe", 0, 0);
    Ok(evaluate(
        params,
        &cfg.env,
        cfg.warm_start.probe_prompts,
        1,
        cfg.rollout_temperature,
        cfg.rollout_top_p,
        cfg.max_response_len,
        &mut rng,
    )?
    .avg_at_k)
}

fn teacher_format_accuracy(params: &PolicyParams, cfg: &TrainConfig) -> Result<f64> {
    let mut rng = stream_rng(cfg.seed, "warm-teacher-probe", 0, 0);
    let n = cfg.warm_start.probe_prompts;
    let mut hits = 0.0;
    for _ in 0..n {
        let task = gen_task(&cfg.env, &mut rng);
        let ctx = TeacherContext::new(&task.prompt, &task.solution, 0);
        let r = sample_rollout(
            params,
            &ctx.tokens,
            cfg.max_response_len,
            cfg.rollout_temperature,
            cfg.rollout_top_p,
            EOS,
            &mut rng,
        )?;
        hits += verify(&cfg.env, &task.prompt, &r.response);
    }
    Ok(hits / n as f64)
}

/// Supervised warm start in two phases: first learn to reproduce an answer
/// shown in teacher format, then mix in verified answers to plain prompts
/// until sampled accuracy reaches the target.
pub fn warm_start(params: &mut PolicyParams, cfg: &TrainConfig) -> Result<WarmStartReport> {
    let ws = &cfg.warm_start;
    let mut opt = AdamW::new(params.len());
    let mut steps = 0;
    let mut final_nll = None;
    let mut accuracy = probe(params, cfg)?;
    let mut copy_accuracy = teacher_format_accuracy(params, cfg)?;
    while steps < ws.max_steps && (accuracy < ws.target_accuracy || copy_accuracy < ws.copy_target_accuracy) {
        let mut rng = stream_rng(cfg.seed, "warm", steps as u64, 0);
        // Copying comes first; plain examples join once it works.
        let frac = if copy_accuracy < ws.copy_target_accuracy {
            1.0
        } else {
            ws.teacher_format_fraction
        };
        let sequences = (0..ws.batch_size)
            .map(|_| {
                let task = gen_task(&cfg.env, &mut rng);
                if rng.gen::<f64>() < frac {
                    // The shown answer belongs to an unrelated task, so this
                    // teaches copying without teaching the task itself.
                    let shown = gen_task(&cfg.env, &mut rng).solution;
                    ScoredSequence::new(TeacherContext::new(&task.prompt, &shown, 0).tokens, shown)
                } else {
                    ScoredSequence::new(task.prompt, task.solution)
                }
            })
            .collect();
        let (loss, mut grad) = loss_gradient(params, &NllLoss { sequences })?;
        optimizer_update(params, &mut grad, &mut opt, ws.learning_rate, 0.0, cfg.grad_clip_norm)?;
        final_nll = Some(loss);
        steps += 1;
        if steps % ws.probe_interval == 0 {
            accuracy = probe(params, cfg)?;
            copy_accuracy = teacher_format_accuracy(params, cfg)?;
        }
    }
    Ok(WarmStartReport {
        steps,
        final_nll,
        probe_accuracy: accuracy,
        teacher_format_accuracy: copy_accuracy,
        reached_target: accuracy >= ws.target_accuracy && copy_accuracy >= ws.copy_target_accuracy,
    })
}
