//! Toy environments with exact verifiers, and teacher-context construction.
//!
//! Vocabulary layout shared by every environment: digits `0..=9`, then the
//! control tokens `SEP`, `EOS`, `PAD`, `TEACH`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{RolloutGroup, TokenId};

pub const NUM_DIGITS: u32 = 10;
pub const SEP: TokenId = TokenId(10);
pub const EOS: TokenId = TokenId(11);
pub const PAD: TokenId = TokenId(12);
pub const TEACH: TokenId = TokenId(13);
pub const VOCAB_SIZE: usize = 14;

/// Rewards at or above this value count as correct.
pub const CORRECT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    /// Sort a digit string ascending.
    CopySort,
    /// Sum of two digits, mod 10.
    ModArith,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    /// Shortest CopySort digit string.
    pub min_len: usize,
    /// Longest CopySort digit string.
    pub max_len: usize,
    /// Mixed into the task stream so different environments draw different tasks.
    pub seed: u64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec {
            kind: EnvKind::CopySort,
            min_len: 3,
            max_len: 5,
            seed: 0,
        }
    }
}

pub fn is_digit(t: TokenId) -> bool {
    t.0 < NUM_DIGITS
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == EnvKind::CopySort && (self.min_len == 0 || self.min_len > self.max_len) {
            return Err(Error::config(
                "env.min_len",
                "env.min_len must satisfy 1 ≤ min_len ≤ max_len",
            ));
        }
        Ok(())
    }

    /// Longest prompt this environment emits.
    pub fn max_prompt_len(&self) -> usize {
        match self.kind {
            EnvKind::CopySort => self.max_len + 1,
            EnvKind::ModArith => 3,
        }
    }

    /// Longest correct response (including EOS).
    pub fn max_solution_len(&self) -> usize {
        match self.kind {
            EnvKind::CopySort => self.max_len + 1,
            EnvKind::ModArith => 2,
        }
    }

    /// The verified answer for a prompt, or `None` if the prompt is malformed.
    pub fn solution_for(&self, prompt: &[TokenId]) -> Option<Vec<TokenId>> {
        let (sep, digits) = prompt.split_last()?;
        if *sep != SEP || digits.is_empty() || !digits.iter().all(|t| is_digit(*t)) {
            return None;
        }
        let mut out = match self.kind {
            EnvKind::CopySort => {
                let mut s = digits.to_vec();
                s.sort();
                s
            }
            EnvKind::ModArith => {
                if digits.len() != 2 {
                    return None;
                }
                vec![TokenId((digits[0].0 + digits[1].0) % NUM_DIGITS)]
            }
        };
        out.push(EOS);
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub prompt: Vec<TokenId>,
    pub solution: Vec<TokenId>,
}

/// Draws one task. CopySort lengths are uniform in `[min_len, max_len]`.
pub fn gen_task<R: Rng + ?Sized>(env: &EnvSpec, rng: &mut R) -> Task {
    let mut prompt: Vec<TokenId> = match env.kind {
        EnvKind::CopySort => {
            let len = rng.gen_range(env.min_len..=env.max_len);
            (0..len).map(|_| TokenId(rng.gen_range(0..NUM_DIGITS))).collect()
        }
        EnvKind::ModArith => (0..2).map(|_| TokenId(rng.gen_range(0..NUM_DIGITS))).collect(),
    };
    prompt.push(SEP);
    let solution = env.solution_for(&prompt).expect("generated prompts are well formed");
    Task { prompt, solution }
}

/// Binary reward: 1.0 iff the response equals the solution exactly, EOS included.
pub fn verify(env: &EnvSpec, prompt: &[TokenId], response: &[TokenId]) -> f64 {
    match env.solution_for(prompt) {
        Some(sol) if sol == response => 1.0,
        _ => 0.0,
    }
}

pub fn is_correct(reward: f64) -> bool {
    reward >= CORRECT_THRESHOLD
}

/// Enriched prefix for the self-teacher: `prompt TEACH sibling_response SEP`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherContext {
    pub tokens: Vec<TokenId>,
    pub source_rollout: usize,
}

impl TeacherContext {
    pub fn new(prompt: &[TokenId], sibling_response: &[TokenId], source_rollout: usize) -> Self {
        let mut tokens = Vec::with_capacity(prompt.len() + sibling_response.len() + 2);
        tokens.extend_from_slice(prompt);
        tokens.push(TEACH);
        tokens.extend_from_slice(sibling_response);
        tokens.push(SEP);
        TeacherContext { tokens, source_rollout }
    }
}

/// Indices of correct siblings of rollout `i` (never `i` itself).
pub fn correct_siblings(group: &RolloutGroup, i: usize) -> Vec<usize> {
    group
        .rollouts
        .iter()
        .enumerate()
        .filter(|(j, r)| *j != i && is_correct(r.reward))
        .map(|(j, _)| j)
        .collect()
}

/// Picks a correct sibling uniformly at random and wraps its response as teacher
/// information; `None` when no sibling other than `i` is correct.
pub fn build_teacher_context<R: Rng + ?Sized>(
    group: &RolloutGroup,
    i: usize,
    rng: &mut R,
) -> Result<Option<TeacherContext>> {
    if i >= group.rollouts.len() {
        return Err(Error::InvalidInput(format!(
            "rollout index {i} out of range for group of {}",
            group.rollouts.len()
        )));
    }
    let siblings = correct_siblings(group, i);
    if siblings.is_empty() {
        return Ok(None);
    }
    let j = siblings[rng.gen_range(0..siblings.len())];
    Ok(Some(TeacherContext::new(&group.prompt, &group.rollouts[j].response, j)))
}
