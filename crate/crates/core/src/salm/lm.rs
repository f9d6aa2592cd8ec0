//! Single-block causal decoder with prefix conditioning.
//!
//! The input sequence is the projected query tokens followed by the
//! embeddings of `BOS, c₀, …, c_{n−2}`; positions after the prefix predict
//! `c₀, …, c_{n−1}`. One causal self-attention head and one perceptron, each
//! with a residual connection, then logits through the tied embedding table.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SalmError, BOS};
use crate::nn::{self, Linear, LEAKY_SLOPE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLm {
    /// `vocab × width`, shared with the output projection.
    pub embed: Array2<f64>,
    /// `context × width`
    pub positions: Array2<f64>,
    pub w_query: Array2<f64>,
    pub w_key: Array2<f64>,
    pub w_value: Array2<f64>,
    pub w_out: Array2<f64>,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Debug, Clone)]
pub struct LmCache {
    pub prefix_len: usize,
    pub inputs: Vec<usize>,
    pub x0: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub attention: Array2<f64>,
    pub mixed: Array2<f64>,
    pub x1: Array2<f64>,
    pub h_pre: Array2<f64>,
    pub h_act: Array2<f64>,
    pub x2: Array2<f64>,
    /// `caption_len × vocab`
    pub logits: Array2<f64>,
}

impl TinyLm {
    pub fn zeros(vocab: usize, context: usize, width: usize, hidden: usize) -> TinyLm {
        TinyLm {
            embed: Array2::zeros((vocab, width)),
            positions: Array2::zeros((context, width)),
            w_query: Array2::zeros((width, width)),
            w_key: Array2::zeros((width, width)),
            w_value: Array2::zeros((width, width)),
            w_out: Array2::zeros((width, width)),
            mlp_in: Linear::zeros(width, hidden),
            mlp_out: Linear::zeros(hidden, width),
        }
    }

    pub fn random<R: Rng>(vocab: usize, context: usize, width: usize, hidden: usize, rng: &mut R) -> TinyLm {
        let sw = 1.0 / (width as f64).sqrt();
        TinyLm {
            embed: nn::gaussian((vocab, width), 0.5, rng),
            positions: nn::gaussian((context, width), 0.1, rng),
            w_query: nn::gaussian((width, width), sw, rng),
            w_key: nn::gaussian((width, width), sw, rng),
            w_value: nn::gaussian((width, width), sw, rng),
            w_out: nn::gaussian((width, width), sw, rng),
            mlp_in: Linear::random(width, hidden, rng),
            mlp_out: Linear::random(hidden, width, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.embed.nrows()
    }

    pub fn width(&self) -> usize {
        self.embed.ncols()
    }

    fn scale(&self) -> f64 {
        1.0 / (self.width() as f64).sqrt()
    }

    /// Teacher-forced forward pass over `prefix` and `caption`.
    pub fn forward(&self, prefix: ArrayView2<f64>, caption: &[usize]) -> Result<LmCache, SalmError> {
        let vocab = self.vocab();
        if let Some(&token) = caption.iter().find(|&&t| t >= vocab) {
            return Err(SalmError::TokenOutOfVocab { token, vocab });
        }
        if caption.is_empty() {
            return Err(SalmError::ShapeMismatch("empty caption".into()));
        }
        if prefix.ncols() != self.width() {
            return Err(SalmError::ShapeMismatch(format!("prefix width {} vs {}", prefix.ncols(), self.width())));
        }
        let prefix_len = prefix.nrows();
        let len = prefix_len + caption.len();
        if len > self.positions.nrows() {
            return Err(SalmError::ShapeMismatch(format!(
                "sequence length {len} exceeds context {}",
                self.positions.nrows()
            )));
        }
        let inputs: Vec<usize> = std::iter::once(BOS).chain(caption[..caption.len() - 1].iter().copied()).collect();
        let mut tokens = Array2::zeros((inputs.len(), self.width()));
        for (mut row, &t) in tokens.rows_mut().into_iter().zip(&inputs) {
            row.assign(&self.embed.row(t));
        }
        let x0 = concatenate(Axis(0), &[prefix, tokens.view()]).expect("equal widths") + self.positions.slice(s![..len, ..]);

        let q = x0.dot(&self.w_query);
        let k = x0.dot(&self.w_key);
        let v = x0.dot(&self.w_value);
        let mut scores = q.dot(&k.t()) * self.scale();
        for i in 0..len {
            for j in i + 1..len {
                scores[[i, j]] = f64::NEG_INFINITY;
            }
        }
        let attention = nn::softmax_rows(&scores);
        let mixed = attention.dot(&v);
        let x1 = &x0 + &mixed.dot(&self.w_out);
        let h_pre = self.mlp_in.forward(x1.view());
        let h_act = nn::leaky_relu_mat(&h_pre, LEAKY_SLOPE);
        let x2 = &x1 + &self.mlp_out.forward(h_act.view());
        let logits = x2.slice(s![prefix_len.., ..]).dot(&self.embed.t());
        Ok(LmCache { prefix_len, inputs, x0, q, k, v, attention, mixed, x1, h_pre, h_act, x2, logits })
    }

    /// Accumulates parameter gradients for `dL/dlogits` and returns `dL/dprefix`.
    pub fn backward(&self, cache: &LmCache, d_logits: &Array2<f64>, grad: &mut TinyLm) -> Array2<f64> {
        let p = cache.prefix_len;
        let len = cache.x0.nrows();
        grad.embed += &d_logits.t().dot(&cache.x2.slice(s![p.., ..]));
        let mut dx2 = Array2::zeros(cache.x2.raw_dim());
        dx2.slice_mut(s![p.., ..]).assign(&d_logits.dot(&self.embed));

        let d_act = self.mlp_out.backward(cache.h_act.view(), &dx2, &mut grad.mlp_out);
        let d_pre = nn::leaky_relu_backward(&cache.h_pre, &d_act, LEAKY_SLOPE);
        let dx1 = dx2 + self.mlp_in.backward(cache.x1.view(), &d_pre, &mut grad.mlp_in);

        grad.w_out += &cache.mixed.t().dot(&dx1);
        let d_mixed = dx1.dot(&self.w_out.t());
        let d_attention = d_mixed.dot(&cache.v.t());
        let dv = cache.attention.t().dot(&d_mixed);
        let d_scores = nn::softmax_rows_backward(&cache.attention, &d_attention) * self.scale();
        let dq = d_scores.dot(&cache.k);
        let dk = d_scores.t().dot(&cache.q);
        grad.w_query += &cache.x0.t().dot(&dq);
        grad.w_key += &cache.x0.t().dot(&dk);
        grad.w_value += &cache.x0.t().dot(&dv);
        let dx0 = dx1 + dq.dot(&self.w_query.t()) + dk.dot(&self.w_key.t()) + dv.dot(&self.w_value.t());

        let mut dpos = grad.positions.slice_mut(s![..len, ..]);
        dpos += &dx0;
        for (i, &t) in cache.inputs.iter().enumerate() {
            let mut row = grad.embed.row_mut(t);
            row += &dx0.row(p + i);
        }
        dx0.slice(s![..p, ..]).to_owned()
    }
}
