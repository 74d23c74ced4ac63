//! Hand-derived reference values for the objective, checked by `srpo golden`.

use crate::model::Distribution;
use crate::objective::*;
use crate::types::{Branch, TokenObjective};

pub const GOLDEN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenCase {
    pub name: &'static str,
    pub actual: f64,
    pub expected: f64,
}

impl GoldenCase {
    pub fn passed(&self) -> bool {
        (self.actual - self.expected).abs() <= GOLDEN_TOLERANCE
    }
}

fn case(name: &'static str, actual: crate::Result<f64>, expected: f64) -> GoldenCase {
    GoldenCase {
        name,
        actual: actual.unwrap_or(f64::NAN),
        expected,
    }
}

fn support(p: &[f64], q: &[f64]) -> SupportSet {
    SupportSet {
        indices: (0..p.len()).collect(),
        student_probs: p.to_vec(),
        teacher_probs: q.to_vec(),
    }
}

fn tok(rollout_index: usize, position: usize, branch: Branch, loss: f64) -> TokenObjective {
    TokenObjective {
        rollout_index,
        position,
        branch,
        loss,
        weight: 1.0,
        valid: true,
    }
}

pub fn cases() -> Vec<GoldenCase> {
    let ln2 = std::f64::consts::LN_2;
    let mut out = Vec::new();

    let adv = |r: &[f64], eps: f64, i: usize| group_relative_advantages(r, eps).map(|a| a.values[i]);
    let two_of_eight = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    out.push(case("advantage/all-equal", adv(&[1.0; 8], 1e-4, 3), 0.0));
    out.push(case("advantage/[1,0] first", adv(&[1.0, 0.0], 0.0, 0), 1.0));
    out.push(case("advantage/[1,0] second", adv(&[1.0, 0.0], 0.0, 1), -1.0));
    out.push(case(
        "advantage/2-of-8 correct",
        adv(&two_of_eight, 0.0, 0),
        0.75 / 0.1875f64.sqrt(),
    ));
    out.push(case(
        "advantage/2-of-8 incorrect",
        adv(&two_of_eight, 0.0, 5),
        -0.25 / 0.1875f64.sqrt(),
    ));

    out.push(case("is_weight/equal", Ok(is_weight(-2.0, -2.0, 2.0)), 1.0));
    out.push(case("is_weight/ln4 clipped", Ok(is_weight(4f64.ln(), 0.0, 2.0)), 2.0));
    out.push(case("is_weight/ln0.5", Ok(is_weight(0.5f64.ln(), 0.0, 2.0)), 0.5));

    out.push(case(
        "grpo/ratio 1",
        Ok(grpo_token_loss(0.0, 0.0, 2.0, 0.2, 0.28)),
        -2.0,
    ));
    out.push(case(
        "grpo/upper clip",
        Ok(grpo_token_loss(1.5f64.ln(), 0.0, 1.0, 0.2, 0.28)),
        -1.28,
    ));
    out.push(case(
        "grpo/lower clip",
        Ok(grpo_token_loss(0.5f64.ln(), 0.0, -1.0, 0.2, 0.28)),
        0.8,
    ));

    let teacher = Distribution::from_probs(&[0.5, 0.3, 0.1, 0.1]);
    let uniform = Distribution::from_probs(&[0.25; 4]);
    let top2 = |i: usize| topk_support(&teacher, &uniform, 2).map(|s| s.teacher_probs[i]);
    out.push(case("topk/K=2 first", top2(0), 0.625));
    out.push(case("topk/K=2 second", top2(1), 0.375));
    let tie = topk_support(&teacher, &uniform, 3).map(|s| s.indices[2] as f64);
    out.push(case("topk/tie keeps lower index", tie, 2.0));
    let full = topk_support(&teacher, &uniform, 100).map(|s| s.teacher_probs.iter().sum::<f64>());
    out.push(case("topk/K>=V mass", full, 1.0));

    let same = support(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]);
    out.push(case("fkl/p=q", forward_kl(&same), 0.0));
    out.push(case("rkl/p=q", reverse_kl(&same), 0.0));
    out.push(case("js/p=q", js_divergence(&same), 0.0));
    out.push(case(
        "fkl/one-hot vs uniform",
        forward_kl(&support(&[1.0, 0.0], &[0.5, 0.5])),
        ln2,
    ));
    out.push(case(
        "fkl/[.5,.5] vs [.25,.75]",
        forward_kl(&support(&[0.5, 0.5], &[0.25, 0.75])),
        0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln(),
    ));
    out.push(case(
        "js/disjoint",
        js_divergence(&support(&[1.0, 0.0], &[0.0, 1.0])),
        ln2,
    ));
    out.push(case(
        "js/one-hot vs uniform",
        js_divergence(&support(&[1.0, 0.0], &[0.5, 0.5])),
        0.5 * (4.0f64 / 3.0).ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2f64.ln(),
    ));

    out.push(case("entropy/uniform 4", Ok(teacher_entropy(&[0.25; 4])), 4f64.ln()));
    out.push(case("entropy/one-hot", Ok(teacher_entropy(&[1.0, 0.0, 0.0])), 0.0));
    out.push(case(
        "entropy/[.5,.5,0,0]",
        Ok(teacher_entropy(&[0.5, 0.5, 0.0, 0.0])),
        ln2,
    ));

    let w = |h: &[f64], beta: f64, i: usize| Ok(dynamic_weights(h, beta).map_or(f64::NAN, |w| w[i]));
    out.push(case("weights/beta 0", w(&[0.1, 2.0], 0.0, 1), 1.0));
    out.push(case("weights/equal entropies", w(&[0.9, 0.9, 0.9], 1.0, 2), 1.0));
    out.push(case("weights/[0,ln2] first", w(&[0.0, ln2], 1.0, 0), 4.0 / 3.0));
    out.push(case("weights/[0,ln2] second", w(&[0.0, ln2], 1.0, 1), 2.0 / 3.0));

    let s = support(&[0.5, 0.5], &[0.25, 0.75]);
    let raw = js_divergence(&s).unwrap_or(f64::NAN);
    out.push(case(
        "sdpo_loss/unit weight",
        sdpo_token_loss(&s, Divergence::JensenShannon, 1.0, 1.0),
        raw,
    ));
    out.push(case(
        "sdpo_loss/weight 4/3",
        sdpo_token_loss(&s, Divergence::JensenShannon, 4.0 / 3.0, 1.0).map(|l| l / raw * 0.3),
        0.4,
    ));
    out.push(case(
        "sdpo_loss/p=q",
        sdpo_token_loss(&same, Divergence::ForwardKl, 3.0, 1.0),
        0.0,
    ));

    out.push(case("logit_adv/p=q", Ok(sdpo_logit_advantage(&same)[1]), 0.0));
    out.push(case("logit_adv/first", Ok(sdpo_logit_advantage(&s)[0]), -0.5 * ln2));
    out.push(case(
        "logit_adv/second",
        Ok(sdpo_logit_advantage(&s)[1]),
        -0.5 * (2.0f64 / 3.0).ln(),
    ));

    let grpo_only = [tok(0, 0, Branch::Grpo, 1.0), tok(0, 1, Branch::Grpo, 3.0)];
    let sdpo_only = [tok(1, 0, Branch::Sdpo, 0.5), tok(1, 1, Branch::Sdpo, 1.5)];
    let mixed = [
        tok(0, 0, Branch::Grpo, 1.0),
        tok(0, 1, Branch::Grpo, 3.0),
        tok(1, 0, Branch::Sdpo, 2.0),
        tok(1, 1, Branch::Sdpo, 2.0),
    ];
    out.push(case("combined/grpo only", combined_loss(&grpo_only), 2.0));
    out.push(case("combined/sdpo only", combined_loss(&sdpo_only), 1.0));
    out.push(case("combined/2+2 tokens", combined_loss(&mixed), 2.0));

    out.push(case("mix/lambda 1", Ok(advantage_mix(0.7, &[0.1], 1.0)[0]), 0.7));
    out.push(case("mix/lambda 0", Ok(advantage_mix(0.7, &[0.1], 0.0)[0]), 0.1));
    out.push(case("mix/lambda 0.9", Ok(advantage_mix(1.0, &[-0.5], 0.9)[0]), 0.85));
    out
}
