#![allow(dead_code)]

pub mod gradients;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srpo_core::config::{Algorithm, TrainConfig};
use srpo_core::env::{gen_task, verify, EnvSpec};
use srpo_core::model::{
    init_params, loss_gradient, loss_value, score_trajectory, LossEvaluator, ModelConfig, PolicyParams,
};
use srpo_core::types::{Rollout, RolloutGroup, TokenId};

/// 1,646 parameters: small enough for a full finite-difference sweep.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 14,
        context_len: 24,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_expansion: 2,
    }
}

pub fn jittered(cfg: &ModelConfig, seed: u64) -> PolicyParams {
    let mut p = init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for x in p.flat_mut() {
        *x += rng.gen_range(-0.3..0.3);
    }
    p
}

#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_index: usize,
}

/// Compares the analytic gradient against central differences on every coordinate.
#[allow(clippy::needless_range_loop)]
pub fn finite_difference_check(params: &PolicyParams, loss: &dyn LossEvaluator, h: f64) -> FdReport {
    let (_, analytic) = loss_gradient(params, loss).unwrap();
    let mut p = params.clone();
    let mut report = FdReport {
        checked: 0,
        worst_rel: 0.0,
        worst_index: 0,
    };
    for i in 0..p.len() {
        let x0 = p.flat()[i];
        p.flat_mut()[i] = x0 + h;
        let up = loss_value(&p, loss).unwrap();
        p.flat_mut()[i] = x0 - h;
        let down = loss_value(&p, loss).unwrap();
        p.flat_mut()[i] = x0;
        let fd = (up - down) / (2.0 * h);
        let g = analytic[i];
        if g.abs().max(fd.abs()) > 1e-8 {
            report.checked += 1;
            let rel = (g - fd).abs() / g.abs().max(fd.abs());
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_index = i;
            }
        }
    }
    report
}

pub fn assert_close(actual: f64, expected: f64, tol: f64, what: &str) {
    assert!(
        (actual - expected).abs() <= tol,
        "{what}: got {actual}, expected {expected} (tol {tol})"
    );
}

/// A run small enough to train for a few steps inside a unit test.
pub fn tiny_train_config(algorithm: Algorithm) -> TrainConfig {
    let mut c = TrainConfig::desk(algorithm);
    c.model = small_config();
    c.question_batch_size = 4;
    c.group_size = 4;
    c.mini_batch_size = 2;
    c.total_steps = 4;
    c.eval_interval = 2;
    c.checkpoint_interval = 2;
    c.eval_prompts = 4;
    c.eval_rollouts = 2;
    c.warm_start.max_steps = 5;
    c.warm_start.probe_prompts = 8;
    c.warm_start.batch_size = 4;
    c.validate().unwrap();
    c
}

/// A rollout of `response` scored under `params` as if it had been sampled there.
pub fn scored_rollout(params: &PolicyParams, env: &EnvSpec, prompt: &[TokenId], response: Vec<TokenId>) -> Rollout {
    let rows = score_trajectory(params, prompt, &response).unwrap();
    let behavior_logprobs = rows.iter().zip(&response).map(|(d, y)| d.logprobs[y.index()]).collect();
    Rollout {
        prompt: prompt.to_vec(),
        reward: verify(env, prompt, &response),
        response,
        behavior_logprobs,
    }
}

/// The solution with its first digit bumped, which the verifier rejects.
pub fn wrong_answer(solution: &[TokenId]) -> Vec<TokenId> {
    let mut r = solution.to_vec();
    r[0] = TokenId((r[0].0 + 1) % 10);
    r
}

/// `correct[g][i]` decides whether rollout `i` of group `g` answers correctly.
pub fn synthetic_groups(
    cfg: &TrainConfig,
    params: &PolicyParams,
    seed: u64,
    correct: &[Vec<bool>],
) -> Vec<RolloutGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    correct
        .iter()
        .enumerate()
        .map(|(g, pattern)| {
            let task = gen_task(&cfg.env, &mut rng);
            let rollouts = pattern
                .iter()
                .map(|&ok| {
                    let response = if ok {
                        task.solution.clone()
                    } else {
                        wrong_answer(&task.solution)
                    };
                    scored_rollout(params, &cfg.env, &task.prompt, response)
                })
                .collect();
            RolloutGroup::new(g, task.prompt, rollouts).unwrap()
        })
        .collect()
}
