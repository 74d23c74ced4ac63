use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::env::{gen_task, verify, EnvSpec, EOS};
use crate::error::Result;
use crate::model::{sample_rollout, PolicyParams};
use crate::types::TokenId;

/// Anything that can answer a prompt.
pub trait Policy {
    fn respond(
        &self,
        prompt: &[TokenId],
        max_len: usize,
        temperature: f64,
        top_p: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<TokenId>>;
}

impl Policy for PolicyParams {
    fn respond(
        &self,
        prompt: &[TokenId],
        max_len: usize,
        temperature: f64,
        top_p: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<TokenId>> {
        Ok(sample_rollout(self, prompt, max_len, temperature, top_p, EOS, rng)?.response)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean reward over all prompts and samples.
    pub avg_at_k: f64,
    pub per_prompt: Vec<f64>,
    pub mean_response_length: f64,
}

/// avg@k: draws `n_prompts` tasks from `rng`, samples `k` responses each, and
/// averages the verifier rewards.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    env: &EnvSpec,
    n_prompts: usize,
    k: usize,
    temperature: f64,
    top_p: f64,
    max_len: usize,
    rng: &mut dyn RngCore,
) -> Result<EvalReport> {
    let mut per_prompt = Vec::with_capacity(n_prompts);
    let mut total_len = 0usize;
    for _ in 0..n_prompts {
        let task = gen_task(env, rng);
        let mut sum = 0.0;
        for _ in 0..k {
            let resp = policy.respond(&task.prompt, max_len, temperature, top_p, rng)?;
            total_len += resp.len();
            sum += verify(env, &task.prompt, &resp);
        }
        per_prompt.push(sum / k as f64);
    }
    let n = (n_prompts * k).max(1) as f64;
    Ok(EvalReport {
        avg_at_k: per_prompt.iter().sum::<f64>() / n_prompts.max(1) as f64,
        per_prompt,
        mean_response_length: total_len as f64 / n,
    })
}
