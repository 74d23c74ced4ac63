//! A tiny pre-norm causal transformer with exact reverse-mode gradients.
//!
//! Parameters live in one flat `Vec<f64>`; [`Layout`] maps each named tensor to a
//! contiguous slice of it, so the structured view and the flat view always alias
//! the same storage.

mod decode;
mod forward;
mod grad;
mod sample;

use ndarray::{ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::TokenId;

pub use decode::Decoder;
pub use forward::{backward, forward, Trace};
pub use grad::{
    loss_gradient, loss_gradient_scored, loss_value, next_token_distribution, score_sequences, score_trajectory,
    LossEvaluator, ScoredBatch, ScoredSequence,
};
pub use sample::{sample_rollout, sample_token, GREEDY_TEMPERATURE};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_expansion: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 14,
            context_len: 64,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            mlp_expansion: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab_size", self.vocab_size),
            ("model.context_len", self.context_len),
            ("model.embed_dim", self.embed_dim),
            ("model.num_layers", self.num_layers),
            ("model.num_heads", self.num_heads),
            ("model.mlp_expansion", self.mlp_expansion),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, format!("{field} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "model.num_heads",
                "model.embed_dim must be divisible by model.num_heads",
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_expansion
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, c, d, h) = (self.vocab_size, self.context_len, self.embed_dim, self.hidden_dim());
        let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        v * d + c * d + self.num_layers * per_layer + 2 * d + d * v + v
    }
}

/// Offsets of one transformer block's tensors inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub qkv_weight: usize,
    pub qkv_bias: usize,
    pub out_weight: usize,
    pub out_bias: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub fc_weight: usize,
    pub fc_bias: usize,
    pub proj_weight: usize,
    pub proj_bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub token_embedding: usize,
    pub position_embedding: usize,
    pub blocks: Vec<BlockLayout>,
    pub lnf_gain: usize,
    pub lnf_bias: usize,
    pub head_weight: usize,
    pub head_bias: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, c, d, h) = (cfg.vocab_size, cfg.context_len, cfg.embed_dim, cfg.hidden_dim());
        let mut at = 0usize;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let token_embedding = take(v * d);
        let position_embedding = take(c * d);
        let blocks = (0..cfg.num_layers)
            .map(|_| BlockLayout {
                ln1_gain: take(d),
                ln1_bias: take(d),
                qkv_weight: take(d * 3 * d),
                qkv_bias: take(3 * d),
                out_weight: take(d * d),
                out_bias: take(d),
                ln2_gain: take(d),
                ln2_bias: take(d),
                fc_weight: take(d * h),
                fc_bias: take(h),
                proj_weight: take(h * d),
                proj_bias: take(d),
            })
            .collect();
        let lnf_gain = take(d);
        let lnf_bias = take(d);
        let head_weight = take(d * v);
        let head_bias = take(v);
        Layout {
            token_embedding,
            position_embedding,
            blocks,
            lnf_gain,
            lnf_bias,
            head_weight,
            head_bias,
            total: at,
        }
    }
}

/// Trainable parameters of the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: ModelConfig,
    layout: Layout,
    flat: Vec<f64>,
}

impl PolicyParams {
    pub fn from_flat(config: ModelConfig, flat: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if flat.len() != layout.total {
            return Err(Error::ShapeMismatch {
                expected: layout.total,
                actual: flat.len(),
            });
        }
        Ok(PolicyParams { config, layout, flat })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let n = Layout::new(&config).total;
        Self::from_flat(config, vec![0.0; n])
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub(crate) fn matrix(&self, offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.flat[offset..offset + rows * cols])
            .expect("layout slice matches shape")
    }

    pub(crate) fn vector(&self, offset: usize, len: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.flat[offset..offset + len])
    }

    pub fn token_embedding(&self) -> ArrayView2<'_, f64> {
        let c = &self.config;
        self.matrix(self.layout.token_embedding, c.vocab_size, c.embed_dim)
    }

    pub fn position_embedding(&self) -> ArrayView2<'_, f64> {
        let c = &self.config;
        self.matrix(self.layout.position_embedding, c.context_len, c.embed_dim)
    }

    pub fn head_weight(&self) -> ArrayView2<'_, f64> {
        let c = &self.config;
        self.matrix(self.layout.head_weight, c.embed_dim, c.vocab_size)
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(t) = tokens.iter().find(|t| t.index() >= self.config.vocab_size) {
            return Err(Error::Model(format!(
                "token {} outside vocabulary of size {}",
                t.0, self.config.vocab_size
            )));
        }
        Ok(())
    }
}

/// Deterministic initialization: Gaussian weights scaled by fan-in, zero biases,
/// unit layer-norm gains.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<PolicyParams> {
    cfg.validate()?;
    let mut params = PolicyParams::zeros(cfg.clone())?;
    let layout = params.layout.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, c, d, h) = (cfg.vocab_size, cfg.context_len, cfg.embed_dim, cfg.hidden_dim());
    let residual_scale = 1.0 / ((2 * cfg.num_layers) as f64).sqrt();
    let flat = &mut params.flat;
    let mut fill = |offset: usize, n: usize, std: f64, rng: &mut ChaCha8Rng| {
        let normal = Normal::new(0.0, std).expect("finite std");
        for x in &mut flat[offset..offset + n] {
            *x = normal.sample(rng);
        }
    };
    let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    fill(layout.token_embedding, v * d, 0.5, &mut rng);
    fill(layout.position_embedding, c * d, 0.5, &mut rng);
    for b in &layout.blocks {
        fill(b.qkv_weight, d * 3 * d, inv(d), &mut rng);
        fill(b.out_weight, d * d, inv(d) * residual_scale, &mut rng);
        fill(b.fc_weight, d * h, inv(d), &mut rng);
        fill(b.proj_weight, h * d, inv(h) * residual_scale, &mut rng);
    }
    fill(layout.head_weight, d * v, inv(d), &mut rng);

    let gains: Vec<usize> = layout
        .blocks
        .iter()
        .flat_map(|b| [b.ln1_gain, b.ln2_gain])
        .chain(std::iter::once(layout.lnf_gain))
        .collect();
    for g in gains {
        params.flat[g..g + d].fill(1.0);
    }
    Ok(params)
}

/// Moves every teacher scalar toward the student: `t <- (1 - alpha) * t + alpha * s`.
pub fn ema_update(teacher: &PolicyParams, student: &PolicyParams, alpha: f64) -> Result<PolicyParams> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, alpha)?;
    Ok(out)
}

pub fn ema_update_in_place(teacher: &mut PolicyParams, student: &PolicyParams, alpha: f64) -> Result<()> {
    if teacher.config != student.config || teacher.len() != student.len() {
        return Err(Error::ShapeMismatch {
            expected: teacher.len(),
            actual: student.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("EMA rate {alpha} outside [0, 1]")));
    }
    for (t, s) in teacher.flat.iter_mut().zip(&student.flat) {
        *t = (1.0 - alpha) * *t + alpha * *s;
    }
    Ok(())
}

/// Log-probabilities over the vocabulary for one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub logprobs: Vec<f64>,
}

impl Distribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let lse = logsumexp(logits);
        Distribution {
            logprobs: logits.iter().map(|x| x - lse).collect(),
        }
    }

    /// Builds a distribution from probabilities (which should already sum to one).
    pub fn from_probs(probs: &[f64]) -> Self {
        Distribution {
            logprobs: probs.iter().map(|p| p.ln()).collect(),
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logprobs.iter().map(|lp| lp.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    pub fn log_normalizer(&self) -> f64 {
        logsumexp(&self.logprobs)
    }

    /// Index of the most probable token; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, lp) in self.logprobs.iter().enumerate() {
            if *lp > self.logprobs[best] {
                best = i;
            }
        }
        best
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
