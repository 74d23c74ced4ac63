//! Training configuration: one JSON document, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{EnvSpec, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::Divergence;

/// Environment variable that overrides `seed` when set.
pub const SEED_ENV_VAR: &str = "SRPO_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "GRPO")]
    Grpo,
    #[serde(rename = "SDPO")]
    Sdpo,
    #[serde(rename = "SRPO")]
    Srpo,
    #[serde(rename = "SRPO_NO_DW")]
    SrpoNoDw,
    #[serde(rename = "ADV_MIX")]
    AdvMix,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Grpo,
        Algorithm::Sdpo,
        Algorithm::Srpo,
        Algorithm::SrpoNoDw,
        Algorithm::AdvMix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Grpo => "GRPO",
            Algorithm::Sdpo => "SDPO",
            Algorithm::Srpo => "SRPO",
            Algorithm::SrpoNoDw => "SRPO_NO_DW",
            Algorithm::AdvMix => "ADV_MIX",
        }
    }

    /// Whether rollouts are split between branches by the sample router.
    pub fn routes(self) -> bool {
        matches!(self, Algorithm::Srpo | Algorithm::SrpoNoDw)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("algorithm", format!("unknown algorithm {s:?}")))
    }
}

/// Supervised warm start that turns the random initialization into a weak base policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmStartConfig {
    /// Upper bound on supervised updates; 0 disables the warm start.
    pub max_steps: usize,
    /// Stop once sampled accuracy on the probe prompts reaches this value.
    pub target_accuracy: f64,
    /// Also keep going until answers shown in teacher format are reproduced this often.
    pub copy_target_accuracy: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of examples presented in teacher format (prompt, TEACH, answer, SEP).
    pub teacher_format_fraction: f64,
    pub probe_prompts: usize,
    pub probe_interval: usize,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        WarmStartConfig {
            max_steps: 2000,
            target_accuracy: 0.15,
            copy_target_accuracy: 0.9,
            batch_size: 16,
            learning_rate: 3e-3,
            teacher_format_fraction: 0.5,
            probe_prompts: 64,
            probe_interval: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub group_size: usize,
    pub question_batch_size: usize,
    pub mini_batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub eps_high: f64,
    pub eps_low: f64,
    pub is_clip_rho: f64,
    pub divergence: Divergence,
    pub top_k: usize,
    pub ema_rate: f64,
    pub dw_beta: f64,
    pub adv_eps: f64,
    pub mix_lambda: f64,
    pub rollout_temperature: f64,
    pub rollout_top_p: f64,
    pub eval_temperature: f64,
    pub eval_top_p: f64,
    pub eval_rollouts: usize,
    pub eval_prompts: usize,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub max_prompt_len: usize,
    pub max_response_len: usize,
    pub model: ModelConfig,
    pub env: EnvSpec,
    pub warm_start: WarmStartConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk(Algorithm::Srpo)
    }
}

impl TrainConfig {
    /// Desk-scale preset for CopySort (lengths 3-5) on the default tiny model.
    /// Four inner updates per step over 128 prompts of 8 rollouts each.
    pub fn desk(algorithm: Algorithm) -> Self {
        TrainConfig {
            algorithm,
            group_size: 8,
            question_batch_size: 128,
            mini_batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 10,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            eps_high: 0.28,
            eps_low: 0.2,
            is_clip_rho: 2.0,
            divergence: Divergence::JensenShannon,
            top_k: 100,
            ema_rate: 0.05,
            dw_beta: 1.0,
            adv_eps: 1e-4,
            mix_lambda: 0.9,
            rollout_temperature: 1.0,
            rollout_top_p: 1.0,
            eval_temperature: 0.6,
            eval_top_p: 0.95,
            eval_rollouts: 16,
            eval_prompts: 32,
            eval_interval: 10,
            checkpoint_interval: 50,
            total_steps: 300,
            seed: 0,
            max_prompt_len: 6,
            max_response_len: 8,
            model: ModelConfig::default(),
            env: EnvSpec::default(),
            warm_start: WarmStartConfig::default(),
        }
    }

    /// The published hyperparameter table, applied to the desk-scale model and task.
    pub fn paper(algorithm: Algorithm) -> Self {
        let (learning_rate, mini_batch_size) = match algorithm {
            Algorithm::Grpo => (1e-6, 8),
            Algorithm::Sdpo => (1e-5, 32),
            Algorithm::Srpo | Algorithm::SrpoNoDw | Algorithm::AdvMix => (5e-6, 32),
        };
        TrainConfig {
            question_batch_size: 32,
            mini_batch_size,
            learning_rate,
            ..TrainConfig::desk(algorithm)
        }
    }

    /// Longest self-teacher context: prompt, TEACH, sibling response, SEP, student response.
    pub fn max_teacher_context(&self) -> usize {
        self.max_prompt_len + 2 * self.max_response_len + 2
    }

    /// Checks every invariant, reporting the first violation by field name.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &'static str, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, msg))
            }
        };
        check(self.group_size >= 2, "group_size", "group_size must be ≥ 2")?;
        check(
            self.question_batch_size >= 1,
            "question_batch_size",
            "question_batch_size must be ≥ 1",
        )?;
        check(
            self.mini_batch_size >= 1,
            "mini_batch_size",
            "mini_batch_size must be ≥ 1",
        )?;
        check(
            self.question_batch_size.is_multiple_of(self.mini_batch_size),
            "mini_batch_size",
            "question_batch_size must be divisible by mini_batch_size",
        )?;
        check(self.learning_rate > 0.0, "learning_rate", "learning_rate must be > 0")?;
        check(self.weight_decay >= 0.0, "weight_decay", "weight_decay must be ≥ 0")?;
        check(
            self.grad_clip_norm > 0.0,
            "grad_clip_norm",
            "grad_clip_norm must be > 0",
        )?;
        check(self.eps_high > 0.0, "eps_high", "eps_high must be > 0")?;
        check(
            self.eps_low > 0.0 && self.eps_low < 1.0,
            "eps_low",
            "eps_low must lie in (0, 1)",
        )?;
        check(self.is_clip_rho >= 1.0, "is_clip_rho", "is_clip_rho must be ≥ 1")?;
        check(self.top_k >= 1, "top_k", "top_k must be ≥ 1")?;
        check(
            (0.0..=1.0).contains(&self.ema_rate),
            "ema_rate",
            "ema_rate out of [0,1]",
        )?;
        check(self.dw_beta >= 0.0, "dw_beta", "dw_beta must be ≥ 0")?;
        check(self.adv_eps >= 0.0, "adv_eps", "adv_eps must be ≥ 0")?;
        check(
            (0.0..=1.0).contains(&self.mix_lambda),
            "mix_lambda",
            "mix_lambda out of [0,1]",
        )?;
        check(
            self.rollout_temperature > 0.0,
            "rollout_temperature",
            "rollout_temperature must be > 0",
        )?;
        check(
            self.rollout_top_p > 0.0 && self.rollout_top_p <= 1.0,
            "rollout_top_p",
            "rollout_top_p out of (0,1]",
        )?;
        check(
            self.eval_temperature > 0.0,
            "eval_temperature",
            "eval_temperature must be > 0",
        )?;
        check(
            self.eval_top_p > 0.0 && self.eval_top_p <= 1.0,
            "eval_top_p",
            "eval_top_p out of (0,1]",
        )?;
        check(self.eval_rollouts >= 1, "eval_rollouts", "eval_rollouts must be ≥ 1")?;
        check(self.eval_prompts >= 1, "eval_prompts", "eval_prompts must be ≥ 1")?;
        check(self.eval_interval >= 1, "eval_interval", "eval_interval must be ≥ 1")?;
        check(
            self.checkpoint_interval >= 1,
            "checkpoint_interval",
            "checkpoint_interval must be ≥ 1",
        )?;
        check(
            self.max_response_len >= 1,
            "max_response_len",
            "max_response_len must be ≥ 1",
        )?;
        self.model.validate()?;
        self.env.validate()?;
        check(
            self.model.vocab_size == VOCAB_SIZE,
            "model.vocab_size",
            &format!("model.vocab_size must equal the environment vocabulary ({VOCAB_SIZE})"),
        )?;
        check(
            self.env.max_prompt_len() <= self.max_prompt_len,
            "max_prompt_len",
            "max_prompt_len is shorter than the longest environment prompt",
        )?;
        check(
            self.env.max_solution_len() <= self.max_response_len,
            "max_response_len",
            "max_response_len is shorter than the longest solution",
        )?;
        check(
            self.model.context_len >= self.max_teacher_context(),
            "model.context_len",
            "model.context_len must hold the longest teacher context",
        )?;
        let ws = &self.warm_start;
        check(
            (0.0..=1.0).contains(&ws.target_accuracy),
            "warm_start.target_accuracy",
            "warm_start.target_accuracy out of [0,1]",
        )?;
        check(
            (0.0..=1.0).contains(&ws.copy_target_accuracy),
            "warm_start.copy_target_accuracy",
            "warm_start.copy_target_accuracy out of [0,1]",
        )?;
        check(
            (0.0..=1.0).contains(&ws.teacher_format_fraction),
            "warm_start.teacher_format_fraction",
            "warm_start.teacher_format_fraction out of [0,1]",
        )?;
        if ws.max_steps > 0 {
            check(
                ws.batch_size >= 1,
                "warm_start.batch_size",
                "warm_start.batch_size must be ≥ 1",
            )?;
            check(
                ws.learning_rate > 0.0,
                "warm_start.learning_rate",
                "warm_start.learning_rate must be > 0",
            )?;
            check(
                ws.probe_prompts >= 1 && ws.probe_interval >= 1,
                "warm_start.probe_prompts",
                "warm_start probe settings must be ≥ 1",
            )?;
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file, applies `key=value` overrides (dotted keys reach
    /// nested sections), honors `SRPO_SEED`, then validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(serde_json::from_str(&text)?, overrides)
    }

    /// Applies overrides and `SRPO_SEED` to a config tree, then validates.
    pub fn resolve(mut value: Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if let Ok(seed) = std::env::var(SEED_ENV_VAR) {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV_VAR}={seed:?} is not an integer")))?;
            apply_override(&mut value, &format!("seed={seed}"))?;
        }
        let cfg: TrainConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets `a.b.c=value` inside a JSON tree; the value is parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidInput(format!("override {assignment:?} is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidInput(format!("override {key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
