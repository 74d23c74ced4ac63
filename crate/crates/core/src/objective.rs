//! Loss mathematics for both branches and their combination.
//!
//! Every per-token loss comes in two forms: a plain value function, and a
//! `*_terms` variant that also returns the derivative with respect to the
//! student's log-probability row. The trainer feeds those derivatives to
//! [`crate::model::loss_gradient`]; the teacher side is always a constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Distribution;
use crate::types::{Branch, TokenObjective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Divergence {
    /// KL(student || teacher)
    #[serde(rename = "FKL")]
    ForwardKl,
    /// KL(teacher || student)
    #[serde(rename = "RKL")]
    ReverseKl,
    #[serde(rename = "JS")]
    JensenShannon,
}

/// Group-normalized advantages; values sum to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
}

/// `A_i = (r_i - mean) / (population_std + adv_eps)`.
pub fn group_relative_advantages(rewards: &[f64], adv_eps: f64) -> Result<AdvantageVector> {
    if rewards.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    let denom = std + adv_eps;
    let values = rewards
        .iter()
        .map(|r| {
            let centered = r - mean;
            if centered == 0.0 {
                0.0
            } else {
                centered / denom
            }
        })
        .collect();
    Ok(AdvantageVector { values })
}

/// Truncated importance weight `min(exp(current - behavior), rho)`.
pub fn is_weight(logprob_current: f64, logprob_behavior: f64, rho: f64) -> f64 {
    (logprob_current - logprob_behavior).exp().min(rho)
}

/// Negated clipped surrogate for one token.
pub fn grpo_token_loss(logprob_new: f64, logprob_old: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    grpo_token_terms(logprob_new, logprob_old, advantage, eps_low, eps_high).0
}

/// `(loss, d loss / d logprob_new)` for the clipped surrogate.
pub fn grpo_token_terms(logprob_new: f64, logprob_old: f64, advantage: f64, eps_low: f64, eps_high: f64) -> (f64, f64) {
    let ratio = (logprob_new - logprob_old).exp();
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    let unclipped_term = ratio * advantage;
    let clipped_term = clipped * advantage;
    if unclipped_term <= clipped_term {
        (-unclipped_term, -unclipped_term)
    } else {
        (-clipped_term, 0.0)
    }
}

/// Top-K teacher support with both distributions renormalized over it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSet {
    pub indices: Vec<usize>,
    pub teacher_probs: Vec<f64>,
    pub student_probs: Vec<f64>,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn renormalize(logprobs: &[f64], indices: &[usize]) -> Vec<f64> {
    let sel: Vec<f64> = indices.iter().map(|&i| logprobs[i]).collect();
    let lse = crate::model::logsumexp(&sel);
    sel.iter().map(|lp| (lp - lse).exp()).collect()
}

/// The `k` most probable teacher tokens (ties go to the lower index).
pub fn topk_indices(teacher: &Distribution, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..teacher.len()).collect();
    order.sort_by(|&a, &b| teacher.logprobs[b].total_cmp(&teacher.logprobs[a]));
    order.truncate(k.min(teacher.len()));
    order
}

pub fn topk_support(teacher: &Distribution, student: &Distribution, k: usize) -> Result<SupportSet> {
    if k == 0 {
        return Err(Error::InvalidInput("top_k must be at least 1".into()));
    }
    if teacher.len() != student.len() {
        return Err(Error::InvalidInput(format!(
            "teacher has {} entries, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let indices = topk_indices(teacher, k);
    Ok(SupportSet {
        teacher_probs: renormalize(&teacher.logprobs, &indices),
        student_probs: renormalize(&student.logprobs, &indices),
        indices,
    })
}

fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::InfiniteDivergence { index: i });
            }
            total += pi * (pi.ln() - qi.ln());
        }
    }
    Ok(total)
}

/// KL(student || teacher) over the support, with `0 log 0 = 0`.
pub fn forward_kl(support: &SupportSet) -> Result<f64> {
    kl(&support.student_probs, &support.teacher_probs)
}

/// KL(teacher || student) over the support.
pub fn reverse_kl(support: &SupportSet) -> Result<f64> {
    kl(&support.teacher_probs, &support.student_probs)
}

/// Jensen-Shannon divergence (natural log); bounded by ln 2.
pub fn js_divergence(support: &SupportSet) -> Result<f64> {
    let (p, q) = (&support.student_probs, &support.teacher_probs);
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl(p, &m)? + 0.5 * kl(q, &m)?)
}

pub fn divergence(kind: Divergence, support: &SupportSet) -> Result<f64> {
    match kind {
        Divergence::ForwardKl => forward_kl(support),
        Divergence::ReverseKl => reverse_kl(support),
        Divergence::JensenShannon => js_divergence(support),
    }
}

/// Divergence value and its derivative with respect to the renormalized
/// student probabilities on the support.
fn divergence_prob_grad(kind: Divergence, support: &SupportSet) -> Result<(f64, Vec<f64>)> {
    let value = divergence(kind, support)?;
    let (p, q) = (&support.student_probs, &support.teacher_probs);
    let mut grad = Vec::with_capacity(p.len());
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi <= 0.0 {
            return Err(Error::InfiniteDivergence { index: i });
        }
        grad.push(match kind {
            // the +1 from d(p log p) cancels under renormalization
            Divergence::ForwardKl => pi.ln() - qi.ln(),
            Divergence::ReverseKl => -qi / pi,
            Divergence::JensenShannon => 0.5 * (pi / (0.5 * (pi + qi))).ln(),
        });
    }
    Ok((value, grad))
}

/// A divergence evaluated on the top-K support of a teacher row, with the
/// derivative with respect to the student's full log-probability row.
#[derive(Debug, Clone, PartialEq)]
pub struct SdpoTerms {
    pub support: SupportSet,
    pub divergence: f64,
    /// `d divergence / d student_logprobs[indices[j]]`; zero off the support.
    pub logprob_grad: Vec<f64>,
}

pub fn sdpo_terms(teacher: &Distribution, student: &Distribution, k: usize, kind: Divergence) -> Result<SdpoTerms> {
    let support = topk_support(teacher, student, k)?;
    let (value, dp) = divergence_prob_grad(kind, &support)?;
    let p = &support.student_probs;
    let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
    let logprob_grad = p.iter().zip(&dp).map(|(pi, gi)| pi * (gi - mean)).collect();
    Ok(SdpoTerms {
        support,
        divergence: value,
        logprob_grad,
    })
}

/// Shannon entropy (natural log) of a probability vector, `0 log 0 = 0`.
pub fn teacher_entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `w = exp(-beta H) / mean(exp(-beta H))`; `None` when there are no SDPO tokens.
pub fn dynamic_weights(entropies: &[f64], beta: f64) -> Option<Vec<f64>> {
    if entropies.is_empty() {
        return None;
    }
    let raw: Vec<f64> = entropies.iter().map(|h| (-beta * h).exp()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Some(raw.iter().map(|w| w / mean).collect())
}

/// `weight * is_w * divergence(support)`.
pub fn sdpo_token_loss(support: &SupportSet, kind: Divergence, weight: f64, is_w: f64) -> Result<f64> {
    if !(weight > 0.0) {
        return Err(Error::InvalidInput(format!("SDPO weight {weight} must be positive")));
    }
    Ok(weight * is_w * divergence(kind, support)?)
}

/// Per-index advantage induced by the forward-KL distillation loss:
/// `A(v) = -p(v) (log p(v) - log q(v))`, so that
/// `grad KL = -sum_v grad log p(v) * A(v)`.
pub fn sdpo_logit_advantage(support: &SupportSet) -> Vec<f64> {
    support
        .student_probs
        .iter()
        .zip(&support.teacher_probs)
        .map(|(&p, &q)| if p > 0.0 { -p * (p.ln() - q.ln()) } else { 0.0 })
        .collect()
}

/// `lambda * a_grpo + (1 - lambda) * a_sdpo(v)` for every support index.
pub fn advantage_mix(a_grpo: f64, a_sdpo: &[f64], lambda: f64) -> Vec<f64> {
    a_sdpo.iter().map(|a| lambda * a_grpo + (1.0 - lambda) * a).collect()
}

/// Routed losses summed over valid tokens, divided by the number of valid tokens.
///
/// Tokens are summed in `(rollout_index, position, branch)` order, so the result
/// does not depend on the order of `tokens`.
pub fn combined_loss(tokens: &[TokenObjective]) -> Result<f64> {
    let mut valid: Vec<&TokenObjective> = tokens.iter().filter(|t| t.valid).collect();
    if valid.is_empty() {
        return Err(Error::InvalidInput("combined loss over zero valid tokens".into()));
    }
    valid.sort_by_key(|t| (t.rollout_index, t.position, t.branch == Branch::Sdpo));
    let grpo: f64 = valid.iter().filter(|t| t.branch == Branch::Grpo).map(|t| t.loss).sum();
    let sdpo: f64 = valid.iter().filter(|t| t.branch == Branch::Sdpo).map(|t| t.loss).sum();
    Ok((grpo + sdpo) / valid.len() as f64)
}
