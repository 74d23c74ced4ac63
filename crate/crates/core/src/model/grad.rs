use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::{backward, forward, Distribution, PolicyParams};
use crate::error::{Error, Result};
use crate::types::TokenId;

/// A fixed trajectory to be scored: distributions are read at every response
/// position, each conditioned on `prefix` and the preceding response tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub prefix: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl ScoredSequence {
    pub fn new(prefix: Vec<TokenId>, response: Vec<TokenId>) -> Self {
        ScoredSequence { prefix, response }
    }

    /// Tokens actually fed to the network (the last response token is never an input).
    fn input(&self) -> Vec<TokenId> {
        let mut t = self.prefix.clone();
        t.extend_from_slice(&self.response[..self.response.len() - 1]);
        t
    }

    fn check(&self, context_len: usize) -> Result<()> {
        if self.prefix.is_empty() || self.response.is_empty() {
            return Err(Error::Model(
                "scored sequences need a nonempty prefix and response".into(),
            ));
        }
        let total = self.prefix.len() + self.response.len();
        if total > context_len {
            return Err(Error::Model(format!(
                "prefix + response of {total} tokens exceeds context_len {context_len}"
            )));
        }
        Ok(())
    }
}

/// A scalar loss over the response-position log-probs of a set of sequences.
///
/// `evaluate` receives one `(response_len x V)` log-prob matrix per sequence, in
/// the order of [`LossEvaluator::sequences`], and returns the loss together with
/// its partial derivatives with respect to each matrix entry. [`loss_gradient`]
/// chains those adjoints through the network.
pub trait LossEvaluator {
    fn sequences(&self) -> &[ScoredSequence];

    fn evaluate(&self, rows: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)>;

    /// Identifies the batch in error reports.
    fn batch_id(&self) -> usize {
        0
    }
}

fn response_rows(params: &PolicyParams, seq: &ScoredSequence) -> Result<(super::Trace, Array2<f64>)> {
    seq.check(params.config().context_len)?;
    let trace = forward(params, &seq.input())?;
    let start = seq.prefix.len() - 1;
    let rows = trace
        .logprobs
        .slice(s![start..start + seq.response.len(), ..])
        .to_owned();
    Ok((trace, rows))
}

/// Loss value only (no backward pass); the finite-difference oracle uses this.
pub fn loss_value(params: &PolicyParams, loss: &dyn LossEvaluator) -> Result<f64> {
    let rows = loss
        .sequences()
        .iter()
        .map(|seq| response_rows(params, seq).map(|(_, r)| r))
        .collect::<Result<Vec<_>>>()?;
    let (value, _) = loss.evaluate(&rows)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            batch_id: loss.batch_id(),
        });
    }
    Ok(value)
}

/// Forward passes over a set of sequences, kept for a later backward pass.
pub struct ScoredBatch {
    traces: Vec<super::Trace>,
    /// Response-position log-prob rows, one matrix per sequence.
    pub rows: Vec<Array2<f64>>,
}

pub fn score_sequences(params: &PolicyParams, sequences: &[ScoredSequence]) -> Result<ScoredBatch> {
    let mut traces = Vec::with_capacity(sequences.len());
    let mut rows = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let (trace, r) = response_rows(params, seq)?;
        traces.push(trace);
        rows.push(r);
    }
    Ok(ScoredBatch { traces, rows })
}

/// Loss and its exact gradient with respect to the flat parameter vector.
///
/// Sequences are back-propagated in order into one accumulator, so the
/// summation order (and therefore the result) is deterministic.
pub fn loss_gradient(params: &PolicyParams, loss: &dyn LossEvaluator) -> Result<(f64, Vec<f64>)> {
    let batch = score_sequences(params, loss.sequences())?;
    loss_gradient_scored(params, &batch, loss)
}

/// [`loss_gradient`] reusing forward passes from [`score_sequences`] over
/// exactly `loss.sequences()` at the same parameters.
pub fn loss_gradient_scored(
    params: &PolicyParams,
    batch: &ScoredBatch,
    loss: &dyn LossEvaluator,
) -> Result<(f64, Vec<f64>)> {
    let rows = &batch.rows;
    if rows.len() != loss.sequences().len() {
        return Err(Error::Model(format!(
            "{} scored sequences for a loss over {}",
            rows.len(),
            loss.sequences().len()
        )));
    }
    let (value, adjoints) = loss.evaluate(rows)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            batch_id: loss.batch_id(),
        });
    }
    if adjoints.len() != rows.len() {
        return Err(Error::Model(format!(
            "loss returned {} adjoints for {} sequences",
            adjoints.len(),
            rows.len()
        )));
    }
    let mut grad = vec![0.0; params.len()];
    for ((seq, trace), adj) in loss.sequences().iter().zip(&batch.traces).zip(&adjoints) {
        if adj.dim() != (seq.response.len(), params.config().vocab_size) {
            return Err(Error::Model(format!("adjoint shape {:?} mismatch", adj.dim())));
        }
        if adj.iter().all(|g| *g == 0.0) {
            continue;
        }
        let mut full = Array2::zeros(trace.logprobs.raw_dim());
        let start = seq.prefix.len() - 1;
        full.slice_mut(s![start..start + seq.response.len(), ..]).assign(adj);
        backward(params, trace, full.view(), &mut grad)?;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            batch_id: loss.batch_id(),
        });
    }
    Ok((value, grad))
}

/// Distribution over the token that follows `context`.
pub fn next_token_distribution(params: &PolicyParams, context: &[TokenId]) -> Result<Distribution> {
    let trace = forward(params, context)?;
    let last = trace.logprobs.row(trace.len() - 1);
    Ok(Distribution {
        logprobs: last.to_vec(),
    })
}

/// Per-position distributions of a fixed response under `prefix`.
pub fn score_trajectory(params: &PolicyParams, prefix: &[TokenId], response: &[TokenId]) -> Result<Vec<Distribution>> {
    let seq = ScoredSequence::new(prefix.to_vec(), response.to_vec());
    let (_, rows) = response_rows(params, &seq)?;
    Ok(rows
        .rows()
        .into_iter()
        .map(|r| Distribution { logprobs: r.to_vec() })
        .collect())
}
