use rand::Rng;

use super::{Decoder, Distribution, PolicyParams};
use crate::error::{Error, Result};
use crate::types::{Rollout, TokenId};

/// Temperatures below this are treated as the greedy (argmax) limit.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// Draws one token index: temperature scaling, then nucleus truncation.
pub fn sample_token<R: Rng + ?Sized>(dist: &Distribution, temperature: f64, top_p: f64, rng: &mut R) -> usize {
    if temperature < GREEDY_TEMPERATURE {
        return dist.argmax();
    }
    let scaled: Vec<f64> = dist.logprobs.iter().map(|lp| lp / temperature).collect();
    let probs = Distribution::from_logits(&scaled).probs();

    let mut order: Vec<usize> = (0..probs.len()).collect();
    if top_p < 1.0 {
        // stable sort keeps lower indices first among equal probabilities
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        let mut mass = 0.0;
        let mut keep = 0;
        for &i in &order {
            mass += probs[i];
            keep += 1;
            if mass >= top_p {
                break;
            }
        }
        order.truncate(keep);
    }
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut u = rng.gen::<f64>() * total;
    for &i in &order {
        u -= probs[i];
        if u < 0.0 {
            return i;
        }
    }
    *order.last().expect("nonempty vocabulary")
}

/// Ancestral sampling of one response. The reward is left at 0.0.
///
/// Behavior log-probs are taken from the untruncated temperature-1 policy, so
/// they stay valid importance-ratio denominators whatever sampler settings
/// produced the token.
pub fn sample_rollout<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[TokenId],
    max_len: usize,
    temperature: f64,
    top_p: f64,
    eos: TokenId,
    rng: &mut R,
) -> Result<Rollout> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::InvalidInput(format!("top_p {top_p} outside (0, 1]")));
    }
    if max_len == 0 {
        return Err(Error::InvalidInput("max_len must be positive".into()));
    }
    if prompt.len() + max_len > params.config().context_len + 1 {
        return Err(Error::Model(format!(
            "prompt of {} tokens plus {max_len} response tokens exceeds context_len {}",
            prompt.len(),
            params.config().context_len
        )));
    }
    let mut decoder = Decoder::new(params);
    let mut dist = decoder.prefill(prompt)?;
    let mut response = Vec::with_capacity(max_len);
    let mut behavior_logprobs = Vec::with_capacity(max_len);
    loop {
        let tok = sample_token(&dist, temperature, top_p, rng);
        let id = TokenId(tok as u32);
        response.push(id);
        behavior_logprobs.push(dist.logprobs[tok].min(0.0));
        if id == eos || response.len() == max_len {
            break;
        }
        dist = decoder.push(id)?;
    }
    Ok(Rollout {
        prompt: prompt.to_vec(),
        response,
        behavior_logprobs,
        reward: 0.0,
    })
}
