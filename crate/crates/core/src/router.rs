//! Sample-level routing: incorrect rollouts with teacher information go to the
//! self-distillation branch, everything else to the group-relative branch.

use serde::{Deserialize, Serialize};

use crate::env::{is_correct, TeacherContext};
use crate::error::{Error, Result};
use crate::types::{Branch, RolloutGroup, RoutingDecision};

pub fn route_rollout(correct: bool, teacher_available: bool) -> Branch {
    if !correct && teacher_available {
        Branch::Sdpo
    } else {
        Branch::Grpo
    }
}

/// One decision per rollout; `contexts[i]` is the teacher context built for rollout `i`.
pub fn route_group(group: &RolloutGroup, contexts: &[Option<TeacherContext>]) -> Result<Vec<RoutingDecision>> {
    if contexts.len() != group.rollouts.len() {
        return Err(Error::InvalidInput(format!(
            "{} teacher contexts for {} rollouts",
            contexts.len(),
            group.rollouts.len()
        )));
    }
    group
        .rollouts
        .iter()
        .zip(contexts)
        .enumerate()
        .map(|(i, (rollout, ctx))| {
            let correct = is_correct(rollout.reward);
            let teacher_index = ctx.as_ref().map(|c| c.source_rollout);
            let decision = RoutingDecision {
                correct,
                teacher_available: ctx.is_some(),
                branch: route_rollout(correct, ctx.is_some()),
                teacher_index,
            };
            decision.validate(i)?;
            Ok(decision)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub grpo_fraction: f64,
    pub sdpo_fraction: f64,
    pub teacher_avail_fraction: f64,
}

pub fn routing_stats<'a, I>(decisions: I) -> Result<RoutingStats>
where
    I: IntoIterator<Item = &'a RoutingDecision>,
{
    let (mut n, mut sdpo, mut avail) = (0usize, 0usize, 0usize);
    for d in decisions {
        n += 1;
        sdpo += usize::from(d.branch == Branch::Sdpo);
        avail += usize::from(d.teacher_available);
    }
    if n == 0 {
        return Err(Error::InvalidInput("routing statistics of an empty batch".into()));
    }
    let n = n as f64;
    let sdpo_fraction = sdpo as f64 / n;
    Ok(RoutingStats {
        grpo_fraction: 1.0 - sdpo_fraction,
        sdpo_fraction,
        teacher_avail_fraction: avail as f64 / n,
    })
}
