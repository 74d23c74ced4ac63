//! Domain values shared by the model, environments, router, objective and trainer.
//!
//! Everything here is an immutable value type: `Clone + Send + Sync`, serializable,
//! and validated by an explicit constructor or `validate` method.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a vocabulary of size `V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn checked(value: u32, vocab_size: usize) -> Result<Self> {
        if (value as usize) < vocab_size {
            Ok(TokenId(value))
        } else {
            Err(Error::InvalidInput(format!(
                "token {value} outside vocabulary of size {vocab_size}"
            )))
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

pub fn tokens(ids: &[u32]) -> Vec<TokenId> {
    ids.iter().copied().map(TokenId).collect()
}

/// Which loss a rollout (or token) is optimized with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Branch {
    Grpo,
    Sdpo,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Grpo => "GRPO",
            Branch::Sdpo => "SDPO",
        }
    }
}

/// One sampled trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    /// Natural-log probability of each response token under the untruncated,
    /// temperature-1 policy that was current at sampling time.
    pub behavior_logprobs: Vec<f64>,
    pub reward: f64,
}

impl Rollout {
    /// Checks the structural invariants. `eos` and `max_response_len` describe
    /// how the rollout must terminate.
    pub fn validate(&self, eos: TokenId, max_response_len: usize) -> Result<()> {
        if self.response.is_empty() {
            return Err(Error::InvalidInput("rollout response is empty".into()));
        }
        if self.behavior_logprobs.len() != self.response.len() {
            return Err(Error::InvalidInput(format!(
                "{} behavior logprobs for {} response tokens",
                self.behavior_logprobs.len(),
                self.response.len()
            )));
        }
        if let Some(lp) = self.behavior_logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "behavior logprob {lp} is not a log-probability"
            )));
        }
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(Error::InvalidInput(format!("reward {} outside [0, 1]", self.reward)));
        }
        let ends_at_eos = self.response.last() == Some(&eos);
        let eos_inside = self.response[..self.response.len() - 1].contains(&eos);
        if eos_inside || !(ends_at_eos || self.response.len() == max_response_len) {
            return Err(Error::InvalidInput(
                "response must end at its first EOS or at the length cap".into(),
            ));
        }
        Ok(())
    }
}

/// A prompt plus its `G` sibling rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub group_id: usize,
    pub prompt: Vec<TokenId>,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn new(group_id: usize, prompt: Vec<TokenId>, rollouts: Vec<Rollout>) -> Result<Self> {
        let group = RolloutGroup {
            group_id,
            prompt,
            rollouts,
        };
        group.validate()?;
        Ok(group)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rollouts.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "group {} has {} rollouts; at least 2 are required",
                self.group_id,
                self.rollouts.len()
            )));
        }
        if let Some(i) = self.rollouts.iter().position(|r| r.prompt != self.prompt) {
            return Err(Error::InvalidInput(format!(
                "rollout {i} of group {} does not share the group prompt",
                self.group_id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

/// Per-rollout routing outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub correct: bool,
    pub teacher_available: bool,
    pub branch: Branch,
    pub teacher_index: Option<usize>,
}

impl RoutingDecision {
    pub fn validate(&self, own_index: usize) -> Result<()> {
        let expect_sdpo = !self.correct && self.teacher_available;
        if (self.branch == Branch::Sdpo) != expect_sdpo {
            return Err(Error::InvalidInput(format!(
                "rollout {own_index}: branch {:?} inconsistent with flags",
                self.branch
            )));
        }
        if self.teacher_index.is_some() != self.teacher_available {
            return Err(Error::InvalidInput(format!(
                "rollout {own_index}: teacher index presence disagrees with availability"
            )));
        }
        if self.teacher_index == Some(own_index) {
            return Err(Error::InvalidInput(format!("rollout {own_index} is its own teacher")));
        }
        Ok(())
    }

    pub fn sdpo_mask(&self) -> u8 {
        u8::from(self.branch == Branch::Sdpo)
    }

    pub fn grpo_mask(&self) -> u8 {
        1 - self.sdpo_mask()
    }
}

/// One response token's contribution to the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenObjective {
    pub rollout_index: usize,
    pub position: usize,
    pub branch: Branch,
    pub loss: f64,
    /// Dynamic weight; 1.0 on the GRPO branch. Already folded into `loss`.
    pub weight: f64,
    pub valid: bool,
}

impl TokenObjective {
    pub fn validate(&self) -> Result<()> {
        if self.valid && !(self.weight > 0.0) {
            return Err(Error::InvalidInput(format!(
                "valid token ({}, {}) has non-positive weight {}",
                self.rollout_index, self.position, self.weight
            )));
        }
        Ok(())
    }
}
