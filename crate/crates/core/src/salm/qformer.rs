//! Learned-query cross-attention over visual tokens.
//!
//! `out = softmax(Q Kᵀ / √d) V · W_out` with `K = T W_key`, `V = T W_value`,
//! where `T` are the flattened visual tokens and `Q` the learned query bank.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SalmError;
use crate::nn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFormer {
    /// `n_queries × attn_dim`
    pub queries: Array2<f64>,
    /// `feat_channels × attn_dim`
    pub w_key: Array2<f64>,
    /// `feat_channels × attn_dim`
    pub w_value: Array2<f64>,
    /// `attn_dim × query_channels`
    pub w_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct QFormerCache {
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    pub attention: Array2<f64>,
    pub mixed: Array2<f64>,
    pub output: Array2<f64>,
}

impl QFormer {
    pub fn zeros(n_queries: usize, feat: usize, attn: usize, out: usize) -> QFormer {
        QFormer {
            queries: Array2::zeros((n_queries, attn)),
            w_key: Array2::zeros((feat, attn)),
            w_value: Array2::zeros((feat, attn)),
            w_out: Array2::zeros((attn, out)),
        }
    }

    pub fn random<R: Rng>(n_queries: usize, feat: usize, attn: usize, out: usize, rng: &mut R) -> QFormer {
        QFormer {
            queries: nn::gaussian((n_queries, attn), 1.0, rng),
            w_key: nn::gaussian((feat, attn), 1.0 / (feat as f64).sqrt(), rng),
            w_value: nn::gaussian((feat, attn), 1.0 / (feat as f64).sqrt(), rng),
            w_out: nn::gaussian((attn, out), 1.0 / (attn as f64).sqrt(), rng),
        }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.queries.ncols() as f64).sqrt()
    }

    pub fn forward(&self, tokens: ArrayView2<f64>) -> Result<QFormerCache, SalmError> {
        if tokens.ncols() != self.w_key.nrows() || tokens.nrows() == 0 {
            return Err(SalmError::ShapeMismatch(format!(
                "visual tokens {:?} vs key map {:?}",
                tokens.dim(),
                self.w_key.dim()
            )));
        }
        let keys = tokens.dot(&self.w_key);
        let values = tokens.dot(&self.w_value);
        let scores = self.queries.dot(&keys.t()) * self.scale();
        let attention = nn::softmax_rows(&scores);
        let mixed = attention.dot(&values);
        let output = mixed.dot(&self.w_out);
        Ok(QFormerCache { keys, values, attention, mixed, output })
    }

    /// Accumulates parameter gradients for upstream `d_out`.
    pub fn backward(&self, tokens: ArrayView2<f64>, cache: &QFormerCache, d_out: &Array2<f64>, grad: &mut QFormer) {
        grad.w_out += &cache.mixed.t().dot(d_out);
        let d_mixed = d_out.dot(&self.w_out.t());
        let d_attention = d_mixed.dot(&cache.values.t());
        let d_values = cache.attention.t().dot(&d_mixed);
        let d_scores = nn::softmax_rows_backward(&cache.attention, &d_attention) * self.scale();
        grad.queries += &d_scores.dot(&cache.keys);
        let d_keys = d_scores.t().dot(&self.queries);
        grad.w_key += &tokens.t().dot(&d_keys);
        grad.w_value += &tokens.t().dot(&d_values);
    }
}

/// Runs the cross-attention and returns the attended queries.
pub fn cross_attend(qformer: &QFormer, tokens: ArrayView2<f64>) -> Result<Array2<f64>, SalmError> {
    Ok(qformer.forward(tokens)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::concatenate;
    use ndarray::Axis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_returns_value_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = QFormer::random(5, 4, 3, 2, &mut rng);
        let t = nn::gaussian((1, 4), 1.0, &mut rng);
        let out = cross_attend(&q, t.view()).unwrap();
        let expect = t.dot(&q.w_value).dot(&q.w_out);
        for row in out.rows() {
            assert!((&row - &expect.row(0)).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn duplicated_token_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = QFormer::random(5, 4, 3, 2, &mut rng);
        let t = nn::gaussian((1, 4), 1.0, &mut rng);
        let twice = concatenate(Axis(0), &[t.view(), t.view()]).unwrap();
        let a = cross_attend(&q, t.view()).unwrap();
        let b = cross_attend(&q, twice.view()).unwrap();
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn attention_rows_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = QFormer::random(8, 6, 5, 4, &mut rng);
            let t = nn::gaussian((17, 6), 3.0, &mut rng);
            let c = q.forward(t.view()).unwrap();
            for row in c.attention.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        let q = QFormer::random(2, 6, 5, 4, &mut rng);
        assert!(q.forward(nn::gaussian((3, 5), 1.0, &mut rng).view()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = QFormer::random(3, 4, 3, 2, &mut rng);
        let t = nn::gaussian((6, 4), 1.0, &mut rng);
        let c = nn::gaussian((3, 2), 1.0, &mut rng);
        let loss = |q: &QFormer| (cross_attend(q, t.view()).unwrap() * &c).sum();
        let cache = q.forward(t.view()).unwrap();
        let mut grad = QFormer::zeros(3, 4, 3, 2);
        q.backward(t.view(), &cache, &c, &mut grad);
        let eps = 1e-5;
        let fields: [fn(&mut QFormer) -> &mut Array2<f64>; 4] =
            [|q| &mut q.queries, |q| &mut q.w_key, |q| &mut q.w_value, |q| &mut q.w_out];
        for field in fields {
            let analytic = field(&mut grad).clone();
            for idx in 0..analytic.len() {
                let (r, cc) = (idx / analytic.ncols(), idx % analytic.ncols());
                let mut p = q.clone();
                field(&mut p)[[r, cc]] += eps;
                let mut m = q.clone();
                field(&mut m)[[r, cc]] -= eps;
                let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
                let a = analytic[[r, cc]];
                assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "fd {fd} vs {a}");
            }
        }
    }
}
