use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srpo_core::model::{
    forward, init_params, loss_gradient, loss_value, next_token_distribution, sample_rollout, score_trajectory,
    Decoder, Distribution, LossEvaluator, ModelConfig, PolicyParams, ScoredSequence,
};
use srpo_core::types::{tokens, TokenId};
use srpo_core::Result;

fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 14,
        context_len: 24,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_expansion: 2,
    }
}

/// Initialized params with every scalar (including biases and gains) jittered.
fn jittered(cfg: &ModelConfig, seed: u64) -> PolicyParams {
    let mut p = init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for x in p.flat_mut() {
        *x += rng.gen_range(-0.3..0.3);
    }
    p
}

// ---------------------------------------------------------------------------
// Independent dense forward pass: plain nested loops, its own offset walk.
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    flat: &'a [f64],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [f64] {
        let s = &self.flat[self.at..self.at + n];
        self.at += n;
        s
    }
}

fn oracle_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) * inv * g[i] + b[i]).collect()
}

fn oracle_affine(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    (0..out)
        .map(|j| b[j] + (0..x.len()).map(|i| x[i] * w[i * out + j]).sum::<f64>())
        .collect()
}

fn oracle_next_logprobs(cfg: &ModelConfig, flat: &[f64], ctx: &[usize]) -> Vec<f64> {
    let (v, d, nh) = (cfg.vocab_size, cfg.embed_dim, cfg.num_heads);
    let dh = d / nh;
    let hid = d * cfg.mlp_expansion;
    let mut c = Cursor { flat, at: 0 };
    let wte = c.take(v * d);
    let wpe = c.take(cfg.context_len * d);
    let mut xs: Vec<Vec<f64>> = ctx
        .iter()
        .enumerate()
        .map(|(t, &tok)| (0..d).map(|j| wte[tok * d + j] + wpe[t * d + j]).collect())
        .collect();
    for _ in 0..cfg.num_layers {
        let (g1, b1) = (c.take(d), c.take(d));
        let (wqkv, bqkv) = (c.take(d * 3 * d), c.take(3 * d));
        let (wo, bo) = (c.take(d * d), c.take(d));
        let (g2, b2) = (c.take(d), c.take(d));
        let (wfc, bfc) = (c.take(d * hid), c.take(hid));
        let (wpr, bpr) = (c.take(hid * d), c.take(d));
        let qkv: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| oracle_affine(&oracle_layer_norm(x, g1, b1), wqkv, bqkv, 3 * d))
            .collect();
        let mut next = Vec::new();
        for t in 0..xs.len() {
            let mut heads = vec![0.0; d];
            for h in 0..nh {
                let scores: Vec<f64> = (0..=t)
                    .map(|u| {
                        (0..dh)
                            .map(|k| qkv[t][h * dh + k] * qkv[u][d + h * dh + k])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (u, s) in scores.iter().enumerate() {
                    let a = (s - m).exp() / z;
                    for k in 0..dh {
                        heads[h * dh + k] += a * qkv[u][2 * d + h * dh + k];
                    }
                }
            }
            let o = oracle_affine(&heads, wo, bo, d);
            let mid: Vec<f64> = (0..d).map(|j| xs[t][j] + o[j]).collect();
            let u = oracle_affine(&oracle_layer_norm(&mid, g2, b2), wfc, bfc, hid);
            let act: Vec<f64> = u
                .iter()
                .map(|&z| 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh()))
                .collect();
            let m = oracle_affine(&act, wpr, bpr, d);
            next.push((0..d).map(|j| mid[j] + m[j]).collect());
        }
        xs = next;
    }
    let (gf, bf) = (c.take(d), c.take(d));
    let (wh, bh) = (c.take(d * v), c.take(v));
    assert_eq!(c.at, flat.len(), "oracle walked every parameter");
    let last = oracle_layer_norm(xs.last().unwrap(), gf, bf);
    let logits = oracle_affine(&last, wh, bh, v);
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

#[test]
fn forward_matches_dense_oracle() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 0).unwrap();
    let got = next_token_distribution(&params, &tokens(&[3, 1, 2])).unwrap();
    let want = oracle_next_logprobs(&cfg, params.flat(), &[3, 1, 2]);
    for (g, w) in got.logprobs.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }

    let p = jittered(&small_config(), 5);
    let ctx = [13usize, 0, 9, 9, 4, 10, 11];
    let got = next_token_distribution(&p, &ctx.iter().map(|&t| TokenId(t as u32)).collect::<Vec<_>>()).unwrap();
    let want = oracle_next_logprobs(&small_config(), p.flat(), &ctx);
    for (g, w) in got.logprobs.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn distributions_normalize() {
    let p = jittered(&ModelConfig::default(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for len in 1..=20 {
        let ctx: Vec<TokenId> = (0..len).map(|_| TokenId(rng.gen_range(0..14))).collect();
        let d = next_token_distribution(&p, &ctx).unwrap();
        assert!(d.log_normalizer().abs() <= 1e-9);
        assert_eq!(d.len(), 14);
    }
}

#[test]
fn causality_by_truncation() {
    let p = jittered(&small_config(), 2);
    let full = tokens(&[5, 4, 3, 10, 3, 4, 5, 11]);
    let trace = srpo_core::model::forward(&p, &full).unwrap();
    for t in 0..full.len() {
        let truncated = next_token_distribution(&p, &full[..=t]).unwrap();
        for (a, b) in truncated.logprobs.iter().zip(trace.logprobs.row(t)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn context_overflow_is_an_error() {
    let p = init_params(&small_config(), 0).unwrap();
    assert!(next_token_distribution(&p, &[TokenId(1); 25]).is_err());
    assert!(next_token_distribution(&p, &[]).is_err());
    assert!(next_token_distribution(&p, &[TokenId(14)]).is_err());
    assert!(score_trajectory(&p, &[TokenId(1); 20], &tokens(&[1, 2, 3, 4, 5])).is_err());
}

#[test]
fn score_trajectory_matches_sequential_calls() {
    let p = jittered(&small_config(), 3);
    let prefix = tokens(&[7, 2, 10]);
    let response = tokens(&[2, 7, 11]);

    let single = score_trajectory(&p, &prefix, &response[..1]).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0], next_token_distribution(&p, &prefix).unwrap());

    let scored = score_trajectory(&p, &prefix, &response).unwrap();
    let mut ctx = prefix.clone();
    for (t, dist) in scored.iter().enumerate() {
        let seq = next_token_distribution(&p, &ctx).unwrap();
        for (a, b) in dist.logprobs.iter().zip(&seq.logprobs) {
            assert!((a - b).abs() < 1e-12);
        }
        ctx.push(response[t]);
    }

    // a teacher prefix equal to the student prefix scores identically
    let teacher = score_trajectory(&p, &prefix.clone(), &response).unwrap();
    assert_eq!(teacher, scored);
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// sum_i sum_t sum_v coef[i][t][v] * lp + quadratic term, a smooth generic loss.
struct Probe {
    seqs: Vec<ScoredSequence>,
    coefs: Vec<Array2<f64>>,
}

impl LossEvaluator for Probe {
    fn sequences(&self) -> &[ScoredSequence] {
        &self.seqs
    }

    fn evaluate(&self, rows: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut loss = 0.0;
        let mut adj = Vec::new();
        for (r, c) in rows.iter().zip(&self.coefs) {
            let p = r.mapv(f64::exp);
            loss += (c * r).sum() + 0.5 * (&p * &p).sum();
            adj.push(c + &(&p * &p));
        }
        Ok((loss, adj))
    }
}

struct Constant(Vec<ScoredSequence>);

impl LossEvaluator for Constant {
    fn sequences(&self) -> &[ScoredSequence] {
        &self.0
    }
    fn evaluate(&self, rows: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
        Ok((3.5, rows.iter().map(|r| Array2::zeros(r.raw_dim())).collect()))
    }
}

fn probe(seed: u64, vocab: usize) -> Probe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = vec![
        ScoredSequence::new(tokens(&[3, 1, 2, 10]), tokens(&[1, 2, 3, 11])),
        ScoredSequence::new(tokens(&[9, 10, 13, 9, 11, 10]), tokens(&[8, 9])),
    ];
    let coefs = seqs
        .iter()
        .map(|s| Array2::from_shape_fn((s.response.len(), vocab), |_| rng.gen_range(-1.0..1.0)))
        .collect();
    Probe { seqs, coefs }
}

fn finite_difference(params: &PolicyParams, loss: &dyn LossEvaluator, h: f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.len())
        .map(|i| {
            let x = p.flat()[i];
            p.flat_mut()[i] = x + h;
            let up = loss_value(&p, loss).unwrap();
            p.flat_mut()[i] = x - h;
            let down = loss_value(&p, loss).unwrap();
            p.flat_mut()[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn gradient_matches_finite_differences() {
    let cfg = small_config();
    assert!(cfg.param_count() <= 5000);
    for seed in 0..2 {
        let params = jittered(&cfg, seed);
        let loss = probe(seed + 100, cfg.vocab_size);
        let (_, grad) = loss_gradient(&params, &loss).unwrap();
        let fd = finite_difference(&params, &loss, 1e-5);
        let mut checked = 0;
        for (i, (a, n)) in grad.iter().zip(&fd).enumerate() {
            if a.abs() > 1e-8 {
                let rel = (a - n).abs() / a.abs().max(n.abs());
                assert!(rel <= 1e-4, "coord {i}: analytic {a} numeric {n} rel {rel}");
                checked += 1;
            } else {
                assert!(n.abs() < 1e-6, "coord {i}: analytic {a} numeric {n}");
            }
        }
        assert!(checked > cfg.param_count() / 2);
    }
}

#[test]
fn constant_loss_has_zero_gradient() {
    let p = jittered(&small_config(), 4);
    let loss = Constant(probe(0, 14).seqs);
    let (value, grad) = loss_gradient(&p, &loss).unwrap();
    assert_eq!(value, 3.5);
    assert!(grad.iter().all(|g| *g == 0.0));
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let p = jittered(&small_config(), 6);
    let a = probe(1, 14);
    let b = probe(2, 14);
    let sum = Probe {
        seqs: a.seqs.iter().chain(&b.seqs).cloned().collect(),
        coefs: a.coefs.iter().chain(&b.coefs).cloned().collect(),
    };
    let (_, ga) = loss_gradient(&p, &a).unwrap();
    let (_, gb) = loss_gradient(&p, &b).unwrap();
    let (_, gs) = loss_gradient(&p, &sum).unwrap();
    for ((x, y), s) in ga.iter().zip(&gb).zip(&gs) {
        assert!((x + y - s).abs() <= 1e-10);
    }
}

#[test]
fn non_finite_loss_reports_batch() {
    struct Bad(Vec<ScoredSequence>);
    impl LossEvaluator for Bad {
        fn sequences(&self) -> &[ScoredSequence] {
            &self.0
        }
        fn evaluate(&self, rows: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
            Ok((f64::NAN, rows.to_vec()))
        }
        fn batch_id(&self) -> usize {
            17
        }
    }
    let p = init_params(&small_config(), 0).unwrap();
    let err = loss_gradient(&p, &Bad(probe(0, 14).seqs)).unwrap_err();
    assert!(err.to_string().contains("batch 17"), "{err}");
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

#[test]
fn first_token_frequencies_match_policy() {
    let p = jittered(&small_config(), 8);
    let prompt = tokens(&[4, 2, 10]);
    let dist = next_token_distribution(&p, &prompt).unwrap();
    let probs = dist.probs();
    let n = 100_000usize;
    let mut counts = [0usize; 14];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..n {
        let r = sample_rollout(&p, &prompt, 1, 1.0, 1.0, TokenId(11), &mut rng).unwrap();
        counts[r.response[0].index()] += 1;
        assert!((r.behavior_logprobs[0] - dist.logprobs[r.response[0].index()]).abs() < 1e-12);
    }
    for (c, pr) in counts.iter().zip(&probs) {
        let mean = n as f64 * pr;
        let sd = (n as f64 * pr * (1.0 - pr)).sqrt();
        assert!(
            (*c as f64 - mean).abs() <= 3.0 * sd + 1e-9,
            "count {c} expected {mean} ± {sd}"
        );
    }
}

#[test]
fn greedy_and_seeded_sampling_are_deterministic() {
    let p = jittered(&small_config(), 9);
    let prompt = tokens(&[1, 2, 10]);
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(2);
    let g1 = sample_rollout(&p, &prompt, 8, 1e-9, 1.0, TokenId(11), &mut r1).unwrap();
    let g2 = sample_rollout(&p, &prompt, 8, 1e-9, 0.5, TokenId(11), &mut r2).unwrap();
    assert_eq!(g1.response, g2.response);
    let mut ctx = prompt.clone();
    for tok in &g1.response {
        assert_eq!(next_token_distribution(&p, &ctx).unwrap().argmax(), tok.index());
        ctx.push(*tok);
    }

    let a = sample_rollout(
        &p,
        &prompt,
        8,
        0.6,
        0.95,
        TokenId(11),
        &mut ChaCha8Rng::seed_from_u64(5),
    )
    .unwrap();
    let b = sample_rollout(
        &p,
        &prompt,
        8,
        0.6,
        0.95,
        TokenId(11),
        &mut ChaCha8Rng::seed_from_u64(5),
    )
    .unwrap();
    assert_eq!(a, b);
    a.validate(TokenId(11), 8).unwrap();
}

#[test]
fn nucleus_truncation_restricts_support() {
    let dist = Distribution::from_probs(&[0.5, 0.3, 0.15, 0.05]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut seen = [0usize; 4];
    for _ in 0..20_000 {
        seen[srpo_core::model::sample_token(&dist, 1.0, 0.75, &mut rng)] += 1;
    }
    assert_eq!(seen[2] + seen[3], 0);
    let frac0 = seen[0] as f64 / 20_000.0;
    assert!((frac0 - 0.625).abs() < 0.02, "{frac0}");
}

#[test]
fn cached_decoder_matches_full_forward() {
    for (cfg, params) in [
        (ModelConfig::default(), init_params(&ModelConfig::default(), 3).unwrap()),
        (small_config(), jittered(&small_config(), 9)),
    ] {
        let ctx: Vec<TokenId> = (0..cfg.context_len.min(20))
            .map(|i| TokenId((i * 7 % 14) as u32))
            .collect();
        let trace = forward(&params, &ctx).unwrap();
        let mut dec = Decoder::new(&params);
        for (t, tok) in ctx.iter().enumerate() {
            let dist = dec.push(*tok).unwrap();
            for (a, b) in dist.logprobs.iter().zip(trace.logprobs.row(t)) {
                assert!((a - b).abs() < 1e-12, "position {t}: {a} vs {b}");
            }
        }
        assert_eq!(dec.len(), ctx.len());
    }
    let params = init_params(&ModelConfig::default(), 0).unwrap();
    let mut dec = Decoder::new(&params);
    for _ in 0..64 {
        dec.push(TokenId(1)).unwrap();
    }
    assert!(dec.push(TokenId(1)).is_err());
    assert!(Decoder::new(&params).push(TokenId(14)).is_err());
}
