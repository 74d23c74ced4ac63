use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

use super::{PolicyParams, LN_EPS};
use crate::error::{Error, Result};
use crate::types::TokenId;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct BlockTrace {
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Activations of one forward pass, kept for the backward pass.
pub struct Trace {
    tokens: Vec<TokenId>,
    blocks: Vec<BlockTrace>,
    lnf: LnCache,
    hf: Array2<f64>,
    /// Row `t` is the log-softmax over the token following position `t`.
    pub logprobs: Array2<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn layer_norm(x: &Array2<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * &gain + bias;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: ArrayView1<f64>,
    mut dgain: ArrayViewMut1<f64>,
    mut dbias: ArrayViewMut1<f64>,
) -> Array2<f64> {
    dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * &gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for t in 0..dy.nrows() {
        let g = dxhat.row(t);
        let xh = cache.xhat.row(t);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let r = cache.rstd[t];
        for ((o, gv), xv) in dx.row_mut(t).iter_mut().zip(g).zip(xh) {
            *o = r * (gv - mean_g - xv * mean_gx);
        }
    }
    dx
}

fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    x.dot(&w) + b
}

/// `w_offset` addresses the weight gradient; the bias gradient follows it directly.
fn linear_backward(
    dout: &Array2<f64>,
    input: &Array2<f64>,
    w: ArrayView2<f64>,
    grad: &mut [f64],
    w_offset: usize,
) -> Array2<f64> {
    let (rows, cols) = w.dim();
    let (wpart, bpart) = grad[w_offset..].split_at_mut(rows * cols);
    let mut dw = ArrayViewMut2::from_shape((rows, cols), wpart).expect("layout slice matches shape");
    let mut db = ArrayViewMut1::from(&mut bpart[..cols]);
    general_mat_mul(1.0, &input.t(), dout, 1.0, &mut dw);
    db += &dout.sum_axis(Axis(0));
    dout.dot(&w.t())
}

pub(super) fn layer_norm_row(x: ArrayView1<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let mean = x.sum() / d;
    let centered = &x - mean;
    let var = centered.iter().map(|v| v * v).sum::<f64>() / d;
    let r = 1.0 / (var + LN_EPS).sqrt();
    &(centered * r) * &gain + bias
}

pub(super) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row -= lse;
    }
    out
}

/// Runs the policy over `tokens`, returning per-position next-token log-probs
/// together with the activations needed by [`backward`].
pub fn forward(params: &PolicyParams, tokens: &[TokenId]) -> Result<Trace> {
    let cfg = params.config();
    if tokens.is_empty() {
        return Err(Error::Model("empty context".into()));
    }
    if tokens.len() > cfg.context_len {
        return Err(Error::Model(format!(
            "context of {} tokens exceeds context_len {}",
            tokens.len(),
            cfg.context_len
        )));
    }
    params.check_tokens(tokens)?;
    let layout = params.layout();
    let (t_len, d, hid) = (tokens.len(), cfg.embed_dim, cfg.hidden_dim());
    let (heads, dh) = (cfg.num_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    let wte = params.token_embedding();
    let wpe = params.position_embedding();
    let mut x = Array2::zeros((t_len, d));
    for (t, tok) in tokens.iter().enumerate() {
        let mut row = x.row_mut(t);
        row += &wte.row(tok.index());
        row += &wpe.row(t);
    }

    let mut blocks = Vec::with_capacity(cfg.num_layers);
    for bl in &layout.blocks {
        let (h1, ln1) = layer_norm(&x, params.vector(bl.ln1_gain, d), params.vector(bl.ln1_bias, d));
        let qkv = linear(
            &h1,
            params.matrix(bl.qkv_weight, d, 3 * d),
            params.vector(bl.qkv_bias, 3 * d),
        );
        let mut attn = Array2::zeros((t_len, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = q.dot(&k.t());
            for (t, mut row) in p.rows_mut().into_iter().enumerate() {
                let mut max = f64::NEG_INFINITY;
                for u in 0..=t {
                    row[u] *= scale;
                    max = max.max(row[u]);
                }
                let mut z = 0.0;
                for u in 0..=t {
                    row[u] = (row[u] - max).exp();
                    z += row[u];
                }
                for u in 0..t_len {
                    row[u] = if u <= t { row[u] / z } else { 0.0 };
                }
            }
            attn.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let attn_out = linear(&attn, params.matrix(bl.out_weight, d, d), params.vector(bl.out_bias, d));
        let x_mid = x + &attn_out;
        let (h2, ln2) = layer_norm(&x_mid, params.vector(bl.ln2_gain, d), params.vector(bl.ln2_bias, d));
        let pre_act = linear(&h2, params.matrix(bl.fc_weight, d, hid), params.vector(bl.fc_bias, hid));
        let act = pre_act.mapv(gelu);
        let mlp_out = linear(
            &act,
            params.matrix(bl.proj_weight, hid, d),
            params.vector(bl.proj_bias, d),
        );
        x = x_mid + &mlp_out;
        blocks.push(BlockTrace {
            ln1,
            h1,
            qkv,
            probs,
            attn,
            ln2,
            h2,
            pre_act,
            act,
        });
    }

    let (hf, lnf) = layer_norm(&x, params.vector(layout.lnf_gain, d), params.vector(layout.lnf_bias, d));
    let logits = linear(
        &hf,
        params.matrix(layout.head_weight, d, cfg.vocab_size),
        params.vector(layout.head_bias, cfg.vocab_size),
    );
    let logprobs = log_softmax_rows(&logits);
    Ok(Trace {
        tokens: tokens.to_vec(),
        blocks,
        lnf,
        hf,
        logprobs,
    })
}

/// Accumulates into `grad` the gradient of `sum(dlogprobs * trace.logprobs)`
/// with respect to the flat parameter vector.
pub fn backward(params: &PolicyParams, trace: &Trace, dlogprobs: ArrayView2<f64>, grad: &mut [f64]) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            actual: grad.len(),
        });
    }
    if dlogprobs.dim() != trace.logprobs.dim() {
        return Err(Error::Model(format!(
            "adjoint shape {:?} does not match logprobs {:?}",
            dlogprobs.dim(),
            trace.logprobs.dim()
        )));
    }
    let cfg = params.config();
    let layout = params.layout();
    let (d, hid, v) = (cfg.embed_dim, cfg.hidden_dim(), cfg.vocab_size);
    let (heads, dh) = (cfg.num_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    // log-softmax: dlogits = dlp - softmax * rowsum(dlp)
    let mut dlogits = dlogprobs.to_owned();
    for (mut row, lp) in dlogits.rows_mut().into_iter().zip(trace.logprobs.rows()) {
        let total = row.sum();
        if total != 0.0 {
            for (g, l) in row.iter_mut().zip(lp) {
                *g -= l.exp() * total;
            }
        }
    }

    let dhf = linear_backward(
        &dlogits,
        &trace.hf,
        params.matrix(layout.head_weight, d, v),
        grad,
        layout.head_weight,
    );
    let (dg, db) = split_two(grad, layout.lnf_gain, layout.lnf_bias, d);
    let mut dx = layer_norm_backward(&dhf, &trace.lnf, params.vector(layout.lnf_gain, d), dg, db);

    for (bl, bt) in layout.blocks.iter().zip(&trace.blocks).rev() {
        // MLP branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
        let dact = linear_backward(
            &dx,
            &bt.act,
            params.matrix(bl.proj_weight, hid, d),
            grad,
            bl.proj_weight,
        );
        let mut dpre = dact;
        dpre.zip_mut_with(&bt.pre_act, |g, u| *g *= gelu_grad(*u));
        let dh2 = linear_backward(&dpre, &bt.h2, params.matrix(bl.fc_weight, d, hid), grad, bl.fc_weight);
        let (dg, db) = split_two(grad, bl.ln2_gain, bl.ln2_bias, d);
        let dx_mid = dx + &layer_norm_backward(&dh2, &bt.ln2, params.vector(bl.ln2_gain, d), dg, db);

        // attention branch: x_mid = x_in + out(attn(ln1(x_in)))
        let dattn = linear_backward(
            &dx_mid,
            &bt.attn,
            params.matrix(bl.out_weight, d, d),
            grad,
            bl.out_weight,
        );
        let mut dqkv = Array2::zeros(bt.qkv.raw_dim());
        for h in 0..heads {
            let q = bt.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = bt.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let val = bt.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = &bt.probs[h];
            let dy = dattn.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = dy.dot(&val.t());
            let dv = p.t().dot(&dy);
            let mut ds = p * &dp;
            for (t, mut row) in ds.rows_mut().into_iter().enumerate() {
                let inner: f64 = row.sum();
                for (u, x) in row.iter_mut().enumerate() {
                    *x -= p[[t, u]] * inner;
                }
            }
            ds *= scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
        let dh1 = linear_backward(
            &dqkv,
            &bt.h1,
            params.matrix(bl.qkv_weight, d, 3 * d),
            grad,
            bl.qkv_weight,
        );
        let (dg, db) = split_two(grad, bl.ln1_gain, bl.ln1_bias, d);
        dx = dx_mid + &layer_norm_backward(&dh1, &bt.ln1, params.vector(bl.ln1_gain, d), dg, db);
    }

    for (t, tok) in trace.tokens.iter().enumerate() {
        let row = dx.row(t);
        let te = layout.token_embedding + tok.index() * d;
        let pe = layout.position_embedding + t * d;
        for (j, g) in row.iter().enumerate() {
            grad[te + j] += g;
            grad[pe + j] += g;
        }
    }
    Ok(())
}

/// Two disjoint `len`-long gradient slices at `a < b`.
fn split_two(grad: &mut [f64], a: usize, b: usize, len: usize) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
    debug_assert!(a + len <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (
        ArrayViewMut1::from(&mut lo[a..a + len]),
        ArrayViewMut1::from(&mut hi[..len]),
    )
}
