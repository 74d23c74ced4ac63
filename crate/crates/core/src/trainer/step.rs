use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::optim::{lr_schedule, optimizer_update};
use super::rng::stream_rng;
use super::TrainerState;
use crate::config::{Algorithm, TrainConfig};
use crate::env::{build_teacher_context, gen_task, is_correct, verify, TeacherContext, EOS};
use crate::error::{Error, Result};
use crate::model::{
    ema_update_in_place, logsumexp, loss_gradient_scored, sample_rollout, score_sequences, score_trajectory,
    Distribution, LossEvaluator, PolicyParams, ScoredSequence,
};
use crate::objective::{
    combined_loss, dynamic_weights, group_relative_advantages, grpo_token_terms, is_weight, sdpo_terms,
    teacher_entropy, topk_indices, Divergence,
};
use crate::router::{route_group, routing_stats};
use crate::types::{Branch, RolloutGroup, RoutingDecision, TokenId, TokenObjective};

/// Samples one step's worth of groups from the student.
pub fn collect_rollouts(cfg: &TrainConfig, student: &PolicyParams, step: usize) -> Result<Vec<RolloutGroup>> {
    let mut task_rng = stream_rng(cfg.seed, "tasks", step as u64, cfg.env.seed);
    (0..cfg.question_batch_size)
        .map(|g| {
            let task = gen_task(&cfg.env, &mut task_rng);
            let mut rng = stream_rng(cfg.seed, "rollouts", step as u64, g as u64);
            let rollouts = (0..cfg.group_size)
                .map(|_| {
                    let mut r = sample_rollout(
                        student,
                        &task.prompt,
                        cfg.max_response_len,
                        cfg.rollout_temperature,
                        cfg.rollout_top_p,
                        EOS,
                        &mut rng,
                    )?;
                    r.reward = verify(&cfg.env, &r.prompt, &r.response);
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()?;
            RolloutGroup::new(g, task.prompt, rollouts)
        })
        .collect()
}

/// How one rollout enters the loss.
#[derive(Debug, Clone)]
pub struct RolloutPlan {
    /// Coefficient on the clipped-surrogate term.
    pub grpo_coef: f64,
    /// Coefficient on the distillation term.
    pub sdpo_coef: f64,
    pub advantage: f64,
    /// Prefix the teacher conditions on, when the distillation term is active.
    pub teacher_prefix: Option<Vec<TokenId>>,
}

/// Per-rollout constants that the loss treats as fixed.
#[derive(Debug, Clone)]
pub struct RolloutTerms {
    pub rollout_index: usize,
    pub branch: Branch,
    pub grpo_coef: f64,
    pub sdpo_coef: f64,
    pub advantage: f64,
    pub behavior_logprobs: Vec<f64>,
    pub is_weights: Vec<f64>,
    pub teacher: Option<Vec<Distribution>>,
    pub weights: Vec<f64>,
    pub valid: Vec<bool>,
}

/// The routed objective over one mini-batch.
pub struct MiniBatchLoss {
    pub sequences: Vec<ScoredSequence>,
    pub terms: Vec<RolloutTerms>,
    pub divergence: Divergence,
    pub top_k: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub batch_id: usize,
}

impl MiniBatchLoss {
    pub fn token_count(&self) -> usize {
        self.terms.iter().map(|t| t.valid.iter().filter(|v| **v).count()).sum()
    }
}

impl LossEvaluator for MiniBatchLoss {
    fn sequences(&self) -> &[ScoredSequence] {
        &self.sequences
    }

    fn batch_id(&self) -> usize {
        self.batch_id
    }

    fn evaluate(&self, rows: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut tokens = Vec::new();
        let mut adjoints = Vec::with_capacity(rows.len());
        for ((seq, terms), row) in self.sequences.iter().zip(&self.terms).zip(rows) {
            let mut adj = Array2::<f64>::zeros(row.dim());
            for (t, &y) in seq.response.iter().enumerate() {
                if !terms.valid[t] {
                    continue;
                }
                let y = y.index();
                let is_w = terms.is_weights[t];
                let mut loss = 0.0;
                if terms.grpo_coef > 0.0 {
                    let (l, d) = grpo_token_terms(
                        row[[t, y]],
                        terms.behavior_logprobs[t],
                        terms.advantage,
                        self.eps_low,
                        self.eps_high,
                    );
                    let c = terms.grpo_coef * is_w;
                    loss += c * l;
                    adj[[t, y]] += c * d;
                }
                if terms.sdpo_coef > 0.0 {
                    let teacher = &terms.teacher.as_ref().expect("distillation term has a teacher")[t];
                    let student = Distribution {
                        logprobs: row.row(t).to_vec(),
                    };
                    let st = sdpo_terms(teacher, &student, self.top_k, self.divergence)?;
                    let c = terms.sdpo_coef * terms.weights[t] * is_w;
                    loss += c * st.divergence;
                    for (&v, g) in st.support.indices.iter().zip(&st.logprob_grad) {
                        adj[[t, v]] += c * g;
                    }
                }
                tokens.push(TokenObjective {
                    rollout_index: terms.rollout_index,
                    position: t,
                    branch: terms.branch,
                    loss,
                    weight: terms.weights[t],
                    valid: true,
                });
            }
            adjoints.push(adj);
        }
        let total = combined_loss(&tokens)?;
        let scale = 1.0 / tokens.len() as f64;
        adjoints.iter_mut().for_each(|a| *a *= scale);
        Ok((total, adjoints))
    }
}

/// One distillation token's teacher entropy and dynamic weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpoToken {
    pub mini_batch: usize,
    pub group_id: usize,
    pub rollout_index: usize,
    pub position: usize,
    pub entropy: f64,
    pub weight: f64,
}

/// Everything a step produced besides the parameter update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: usize,
    pub mean_loss: f64,
    pub grpo_frac: f64,
    pub sdpo_frac: f64,
    pub teacher_avail_frac: f64,
    pub mean_teacher_entropy: Option<f64>,
    pub mean_response_length: f64,
    pub train_accuracy: f64,
    pub grad_norm: f64,
    pub dropped_token_count: usize,
    pub decisions: Vec<Vec<RoutingDecision>>,
    pub sdpo_tokens: Vec<SdpoToken>,
}

fn plan_rollouts(
    cfg: &TrainConfig,
    group: &RolloutGroup,
    contexts: &[Option<TeacherContext>],
    decisions: &[RoutingDecision],
) -> Result<Vec<RolloutPlan>> {
    let adv = group_relative_advantages(&group.rewards(), cfg.adv_eps)?;
    let fallback = |i: usize| -> Vec<TokenId> {
        contexts[i]
            .as_ref()
            .map(|c| c.tokens.clone())
            .unwrap_or_else(|| group.prompt.clone())
    };
    Ok((0..group.len())
        .map(|i| {
            let advantage = adv.values[i];
            let (grpo_coef, sdpo_coef, teacher_prefix) = match cfg.algorithm {
                Algorithm::Grpo => (1.0, 0.0, None),
                Algorithm::Srpo | Algorithm::SrpoNoDw => match decisions[i].branch {
                    Branch::Grpo => (1.0, 0.0, None),
                    Branch::Sdpo => (0.0, 1.0, contexts[i].as_ref().map(|c| c.tokens.clone())),
                },
                Algorithm::Sdpo => (0.0, 1.0, Some(fallback(i))),
                Algorithm::AdvMix => (cfg.mix_lambda, 1.0 - cfg.mix_lambda, Some(fallback(i))),
            };
            RolloutPlan {
                grpo_coef,
                sdpo_coef,
                advantage,
                teacher_prefix,
            }
        })
        .collect())
}

/// Renormalized top-K teacher probabilities.
fn teacher_support_probs(teacher: &Distribution, k: usize) -> Vec<f64> {
    let idx = topk_indices(teacher, k);
    let sel: Vec<f64> = idx.iter().map(|&i| teacher.logprobs[i]).collect();
    let lse = logsumexp(&sel);
    sel.iter().map(|lp| (lp - lse).exp()).collect()
}

/// One outer iteration on the given groups: route, build per-mini-batch losses,
/// update the student once per mini-batch, then move the teacher toward it.
/// On error the state is left as it was.
pub fn train_step(state: &mut TrainerState, groups: &[RolloutGroup]) -> Result<StepOutcome> {
    let mut next = state.clone();
    let out = apply_step(&mut next, groups)?;
    *state = next;
    Ok(out)
}

fn apply_step(state: &mut TrainerState, groups: &[RolloutGroup]) -> Result<StepOutcome> {
    let cfg = state.config.clone();
    let step = state.step;
    if groups.is_empty() || !groups.len().is_multiple_of(cfg.mini_batch_size) {
        return Err(Error::InvalidInput(format!(
            "{} groups do not split into mini-batches of {}",
            groups.len(),
            cfg.mini_batch_size
        )));
    }
    for g in groups {
        g.validate()?;
        for r in &g.rollouts {
            r.validate(EOS, cfg.max_response_len)?;
        }
    }

    let mut decisions = Vec::with_capacity(groups.len());
    let mut plans = Vec::with_capacity(groups.len());
    for g in groups {
        let mut rng = stream_rng(cfg.seed, "teacher", step as u64, g.group_id as u64);
        let contexts = (0..g.len())
            .map(|i| build_teacher_context(g, i, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let d = route_group(g, &contexts)?;
        plans.push(plan_rollouts(&cfg, g, &contexts, &d)?);
        decisions.push(d);
    }
    let beta = if cfg.algorithm == Algorithm::Srpo {
        cfg.dw_beta
    } else {
        0.0
    };

    // Teacher rows are fixed for the whole step.
    let teacher_rows: Vec<Vec<Option<Vec<Distribution>>>> = groups
        .iter()
        .zip(&plans)
        .map(|(g, p)| {
            g.rollouts
                .iter()
                .zip(p)
                .map(|(r, plan)| {
                    plan.teacher_prefix
                        .as_ref()
                        .map(|prefix| score_trajectory(&state.teacher, prefix, &r.response))
                        .transpose()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut losses = Vec::new();
    let mut norms = Vec::new();
    let mut sdpo_tokens = Vec::new();
    let mut dropped = 0usize;
    let g_size = cfg.group_size;
    for (mb, chunk) in (0..groups.len())
        .collect::<Vec<_>>()
        .chunks(cfg.mini_batch_size)
        .enumerate()
    {
        let members: Vec<(usize, usize)> = chunk
            .iter()
            .flat_map(|&gi| (0..groups[gi].len()).map(move |i| (gi, i)))
            .collect();
        let sequences: Vec<ScoredSequence> = members
            .iter()
            .map(|&(gi, i)| {
                let r = &groups[gi].rollouts[i];
                ScoredSequence::new(r.prompt.clone(), r.response.clone())
            })
            .collect();
        let scored = score_sequences(&state.student, &sequences)?;
        let mut terms = Vec::with_capacity(members.len());
        for (&(gi, i), rows) in members.iter().zip(&scored.rows) {
            let r = &groups[gi].rollouts[i];
            let plan = &plans[gi][i];
            let n = r.response.len();
            let teacher = teacher_rows[gi][i].clone();
            let mut is_weights = Vec::with_capacity(n);
            let mut valid = vec![true; n];
            for t in 0..n {
                let lp = rows[[t, r.response[t].index()]];
                is_weights.push(is_weight(lp, r.behavior_logprobs[t], cfg.is_clip_rho));
                if let Some(trows) = &teacher {
                    let student = Distribution {
                        logprobs: rows.row(t).to_vec(),
                    };
                    match sdpo_terms(&trows[t], &student, cfg.top_k, cfg.divergence) {
                        Ok(_) => {}
                        Err(Error::InfiniteDivergence { .. }) => {
                            valid[t] = false;
                            dropped += 1;
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            terms.push(RolloutTerms {
                rollout_index: gi * g_size + i,
                branch: decisions[gi][i].branch,
                grpo_coef: plan.grpo_coef,
                sdpo_coef: plan.sdpo_coef,
                advantage: plan.advantage,
                behavior_logprobs: r.behavior_logprobs.clone(),
                is_weights,
                teacher,
                weights: vec![1.0; n],
                valid,
            });
        }

        // Dynamic weights are normalized over the valid distillation tokens of this mini-batch.
        let mut slots = Vec::new();
        let mut entropies = Vec::new();
        for (ri, t) in terms.iter().enumerate() {
            if let (true, Some(rows)) = (t.sdpo_coef > 0.0, &t.teacher) {
                for (pos, row) in rows.iter().enumerate() {
                    if t.valid[pos] {
                        slots.push((ri, pos));
                        entropies.push(teacher_entropy(&teacher_support_probs(row, cfg.top_k)));
                    }
                }
            }
        }
        if let Some(w) = dynamic_weights(&entropies, beta) {
            for (((ri, pos), w), h) in slots.iter().zip(w).zip(&entropies) {
                terms[*ri].weights[*pos] = w;
                let (gi, i) = members[*ri];
                sdpo_tokens.push(SdpoToken {
                    mini_batch: mb,
                    group_id: groups[gi].group_id,
                    rollout_index: i,
                    position: *pos,
                    entropy: *h,
                    weight: w,
                });
            }
        }

        let batch = MiniBatchLoss {
            sequences,
            terms,
            divergence: cfg.divergence,
            top_k: cfg.top_k,
            eps_low: cfg.eps_low,
            eps_high: cfg.eps_high,
            batch_id: step * groups.len().div_ceil(cfg.mini_batch_size) + mb,
        };
        if batch.token_count() == 0 {
            continue;
        }
        let (loss, mut grad) = loss_gradient_scored(&state.student, &scored, &batch)?;
        let lr = lr_schedule(cfg.learning_rate, cfg.warmup_steps, state.optimizer.t);
        let norm = optimizer_update(
            &mut state.student,
            &mut grad,
            &mut state.optimizer,
            lr,
            cfg.weight_decay,
            cfg.grad_clip_norm,
        )?;
        losses.push(loss);
        norms.push(norm);
    }

    ema_update_in_place(&mut state.teacher, &state.student, cfg.ema_rate)?;
    state.step += 1;

    let stats = routing_stats(decisions.iter().flatten())?;
    let all: Vec<_> = groups.iter().flat_map(|g| &g.rollouts).collect();
    let n = all.len() as f64;
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    Ok(StepOutcome {
        step,
        mean_loss: mean(&losses),
        grpo_frac: stats.grpo_fraction,
        sdpo_frac: stats.sdpo_fraction,
        teacher_avail_frac: stats.teacher_avail_fraction,
        mean_teacher_entropy: (!sdpo_tokens.is_empty())
            .then(|| sdpo_tokens.iter().map(|t| t.entropy).sum::<f64>() / sdpo_tokens.len() as f64),
        mean_response_length: all.iter().map(|r| r.response.len() as f64).sum::<f64>() / n,
        train_accuracy: all.iter().filter(|r| is_correct(r.reward)).count() as f64 / n,
        grad_norm: if norms.is_empty() { 0.0 } else { mean(&norms) },
        dropped_token_count: dropped,
        decisions,
        sdpo_tokens,
    })
}
