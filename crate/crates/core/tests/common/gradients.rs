//! Shared fixtures for gradient exactness checks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srpo_core::env::{SEP, TEACH};
use srpo_core::model::{
    logsumexp, loss_gradient, score_trajectory, Distribution, LossEvaluator, PolicyParams, ScoredSequence,
};
use srpo_core::objective::*;
use srpo_core::trainer::step::{MiniBatchLoss, RolloutTerms};
use srpo_core::types::{Branch, TokenId};
use srpo_core::Result;

use super::{finite_difference_check, jittered, small_config, FdReport};

#[derive(Clone, Copy)]
pub enum Variant {
    Grpo,
    Distill(Divergence),
    WeightedDistill,
    Combined,
    Mix,
}

/// Four rollouts on the small model with teacher rows from a second network.
pub fn fixture(seed: u64, variant: Variant, top_k: usize) -> (PolicyParams, MiniBatchLoss) {
    let cfg = small_config();
    let student = jittered(&cfg, seed);
    let teacher = jittered(&cfg, seed + 100);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let mut sequences = Vec::new();
    let mut terms = Vec::new();
    let responses: Vec<Vec<TokenId>> = (0..4)
        .map(|_| {
            let n = rng.gen_range(2..5);
            let mut r: Vec<TokenId> = (0..n).map(|_| TokenId(rng.gen_range(0..10))).collect();
            r.push(TokenId(11));
            r
        })
        .collect();
    let mut all_entropies = Vec::new();
    for (i, response) in responses.iter().enumerate() {
        let mut prompt: Vec<TokenId> = (0..3).map(|_| TokenId(rng.gen_range(0..10))).collect();
        prompt.push(SEP);
        let current = score_trajectory(&student, &prompt, response).unwrap();
        let behavior: Vec<f64> = current
            .iter()
            .zip(response)
            .map(|(d, y)| {
                // Interior of either regime, away from the clip kinks.
                let delta = match rng.gen_range(0..4) {
                    0 => 0.6,
                    1 => -0.6,
                    _ => rng.gen_range(-0.15..0.15),
                };
                d.logprobs[y.index()] + delta
            })
            .collect();
        let mut tprefix = prompt.clone();
        tprefix.push(TEACH);
        tprefix.extend_from_slice(&responses[(i + 1) % 4]);
        tprefix.push(SEP);
        let trows = score_trajectory(&teacher, &tprefix, response).unwrap();
        let (grpo_coef, sdpo_coef) = match variant {
            Variant::Grpo => (1.0, 0.0),
            Variant::Distill(_) | Variant::WeightedDistill => (0.0, 1.0),
            Variant::Combined => {
                if i % 2 == 0 {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            Variant::Mix => (0.9, 0.1),
        };
        if sdpo_coef > 0.0 {
            for row in &trows {
                let idx = topk_indices(row, top_k);
                let sel: Vec<f64> = idx.iter().map(|&j| row.logprobs[j]).collect();
                let lse = logsumexp(&sel);
                all_entropies.push((
                    i,
                    teacher_entropy(&sel.iter().map(|l| (l - lse).exp()).collect::<Vec<_>>()),
                ));
            }
        }
        let n = response.len();
        terms.push(RolloutTerms {
            rollout_index: i,
            branch: if sdpo_coef > 0.0 && grpo_coef == 0.0 {
                Branch::Sdpo
            } else {
                Branch::Grpo
            },
            grpo_coef,
            sdpo_coef,
            advantage: rng.gen_range(-1.5..1.5),
            behavior_logprobs: behavior,
            is_weights: (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
            teacher: (sdpo_coef > 0.0).then_some(trows),
            weights: vec![1.0; n],
            valid: vec![true; n],
        });
        sequences.push(ScoredSequence::new(prompt, response.clone()));
    }
    let beta = match variant {
        Variant::WeightedDistill | Variant::Combined => 1.0,
        _ => 0.0,
    };
    let h: Vec<f64> = all_entropies.iter().map(|(_, h)| *h).collect();
    if let Some(w) = dynamic_weights(&h, beta) {
        let mut it = w.into_iter();
        for t in terms.iter_mut().filter(|t| t.sdpo_coef > 0.0) {
            for slot in t.weights.iter_mut() {
                *slot = it.next().unwrap();
            }
        }
    }
    let divergence = match variant {
        Variant::Distill(kind) => kind,
        _ => Divergence::JensenShannon,
    };
    let loss = MiniBatchLoss {
        sequences,
        terms,
        divergence,
        top_k,
        eps_low: 0.2,
        eps_high: 0.28,
        batch_id: 0,
    };
    (student, loss)
}

/// Every loss family at full and truncated top-K support.
pub const FD_CASES: [(&str, Variant, usize); 10] = [
    ("GRPO", Variant::Grpo, 100),
    ("FKL", Variant::Distill(Divergence::ForwardKl), 100),
    ("FKL top-4", Variant::Distill(Divergence::ForwardKl), 4),
    ("RKL", Variant::Distill(Divergence::ReverseKl), 100),
    ("RKL top-4", Variant::Distill(Divergence::ReverseKl), 4),
    ("JS", Variant::Distill(Divergence::JensenShannon), 100),
    ("JS top-4", Variant::Distill(Divergence::JensenShannon), 4),
    ("DW-SDPO", Variant::WeightedDistill, 6),
    ("combined", Variant::Combined, 100),
    ("advantage mix", Variant::Mix, 100),
];

pub fn fd_report(variant: Variant, top_k: usize) -> FdReport {
    let (params, loss) = fixture(11, variant, top_k);
    finite_difference_check(&params, &loss, 1e-5)
}

/// `sum_v c_v * log p~(v)` where `p~` is the student renormalized over `indices`.
pub struct WeightedLogProb {
    seq: Vec<ScoredSequence>,
    indices: Vec<usize>,
    coefs: Vec<f64>,
}

impl LossEvaluator for WeightedLogProb {
    fn sequences(&self) -> &[ScoredSequence] {
        &self.seq
    }

    fn evaluate(&self, rows: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
        let row = rows[0].row(0);
        let sel: Vec<f64> = self.indices.iter().map(|&i| row[i]).collect();
        let lse = logsumexp(&sel);
        let p: Vec<f64> = sel.iter().map(|l| (l - lse).exp()).collect();
        let csum: f64 = self.coefs.iter().sum();
        let mut adj = Array2::zeros(rows[0].dim());
        let mut value = 0.0;
        for (j, &i) in self.indices.iter().enumerate() {
            value += self.coefs[j] * (sel[j] - lse);
            adj[[0, i]] += self.coefs[j] - p[j] * csum;
        }
        Ok((value, vec![adj]))
    }
}

/// Forward KL against a fixed teacher at one position.
pub struct OneTokenKl {
    seq: Vec<ScoredSequence>,
    teacher: Distribution,
    top_k: usize,
}

impl LossEvaluator for OneTokenKl {
    fn sequences(&self) -> &[ScoredSequence] {
        &self.seq
    }

    fn evaluate(&self, rows: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
        let student = Distribution {
            logprobs: rows[0].row(0).to_vec(),
        };
        let t = sdpo_terms(&self.teacher, &student, self.top_k, Divergence::ForwardKl)?;
        let mut adj = Array2::zeros(rows[0].dim());
        for (&i, g) in t.support.indices.iter().zip(&t.logprob_grad) {
            adj[[0, i]] = *g;
        }
        Ok((t.divergence, vec![adj]))
    }
}

/// Largest coordinate gap between the forward-KL gradient and its logit-advantage
/// decomposition, one entry per random instance.
pub fn decomposition_gaps(instances: u64) -> Vec<f64> {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    (0..instances)
        .map(|instance| {
            let params = jittered(&cfg, 1000 + instance);
            let prefix: Vec<TokenId> = (0..rng.gen_range(2..8))
                .map(|_| TokenId(rng.gen_range(0..14)))
                .collect();
            let seq = vec![ScoredSequence::new(prefix.clone(), vec![TokenId(0)])];
            let logits: Vec<f64> = (0..14).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let teacher = Distribution::from_logits(&logits);
            let top_k = if instance % 2 == 0 { 14 } else { rng.gen_range(2..14) };

            let kl = OneTokenKl {
                seq: seq.clone(),
                teacher: teacher.clone(),
                top_k,
            };
            let (_, g_kl) = loss_gradient(&params, &kl).unwrap();

            let student = score_trajectory(&params, &prefix, &[TokenId(0)]).unwrap().remove(0);
            let s = topk_support(&teacher, &student, top_k).unwrap();
            let adv = sdpo_logit_advantage(&s);
            let decomposition = WeightedLogProb {
                seq,
                indices: s.indices.clone(),
                coefs: adv.iter().map(|a| -a).collect(),
            };
            let (_, g_dec) = loss_gradient(&params, &decomposition).unwrap();
            g_kl.iter().zip(&g_dec).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .collect()
}
