use ndarray::{s, Array1, Array2};

use super::forward::{gelu, layer_norm_row};
use super::{Distribution, PolicyParams};
use crate::error::{Error, Result};
use crate::types::TokenId;

/// Incremental decoding with cached keys and values, one token at a time.
///
/// Produces the same distributions as [`super::forward`] (up to summation
/// order) at a cost linear in the context length per token.
pub struct Decoder<'a> {
    params: &'a PolicyParams,
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    len: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a PolicyParams) -> Self {
        let cfg = params.config();
        let empty = || Array2::zeros((cfg.context_len, cfg.embed_dim));
        Decoder {
            params,
            keys: (0..cfg.num_layers).map(|_| empty()).collect(),
            values: (0..cfg.num_layers).map(|_| empty()).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` and returns the distribution over the token after it.
    pub fn push(&mut self, token: TokenId) -> Result<Distribution> {
        let p = self.params;
        let cfg = p.config();
        if self.len >= cfg.context_len {
            return Err(Error::Model(format!(
                "context of {} tokens exceeds context_len {}",
                self.len + 1,
                cfg.context_len
            )));
        }
        p.check_tokens(&[token])?;
        let layout = p.layout();
        let (d, hid) = (cfg.embed_dim, cfg.hidden_dim());
        let (heads, dh) = (cfg.num_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let t = self.len;

        let mut x: Array1<f64> = &p.token_embedding().row(token.index()) + &p.position_embedding().row(t);
        for (l, bl) in layout.blocks.iter().enumerate() {
            let h1 = layer_norm_row(x.view(), p.vector(bl.ln1_gain, d), p.vector(bl.ln1_bias, d));
            let qkv = h1.dot(&p.matrix(bl.qkv_weight, d, 3 * d)) + p.vector(bl.qkv_bias, 3 * d);
            self.keys[l].row_mut(t).assign(&qkv.slice(s![d..2 * d]));
            self.values[l].row_mut(t).assign(&qkv.slice(s![2 * d..]));
            let mut attn = Array1::zeros(d);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let q = qkv.slice(s![cols.clone()]);
                let k = self.keys[l].slice(s![..=t, cols.clone()]);
                let v = self.values[l].slice(s![..=t, cols.clone()]);
                let mut w = k.dot(&q) * scale;
                let max = w.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
                w.mapv_inplace(|z| (z - max).exp());
                let z = w.sum();
                w /= z;
                attn.slice_mut(s![cols]).assign(&w.dot(&v));
            }
            let x_mid = &x + &(attn.dot(&p.matrix(bl.out_weight, d, d)) + p.vector(bl.out_bias, d));
            let h2 = layer_norm_row(x_mid.view(), p.vector(bl.ln2_gain, d), p.vector(bl.ln2_bias, d));
            let act = (h2.dot(&p.matrix(bl.fc_weight, d, hid)) + p.vector(bl.fc_bias, hid)).mapv(gelu);
            x = &x_mid + &(act.dot(&p.matrix(bl.proj_weight, hid, d)) + p.vector(bl.proj_bias, d));
        }
        let hf = layer_norm_row(x.view(), p.vector(layout.lnf_gain, d), p.vector(layout.lnf_bias, d));
        let logits = hf.dot(&p.head_weight()) + p.vector(layout.head_bias, cfg.vocab_size);
        self.len += 1;
        Ok(Distribution::from_logits(logits.as_slice().expect("contiguous logits")))
    }

    /// Feeds a whole prefix; returns the distribution after its last token.
    pub fn prefill(&mut self, tokens: &[TokenId]) -> Result<Distribution> {
        let mut last = None;
        for &t in tokens {
            last = Some(self.push(t)?);
        }
        last.ok_or_else(|| Error::Model("empty context".into()))
    }
}
