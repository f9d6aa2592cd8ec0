//! Small dense-layer toolkit shared by the hypergraph and language-model
//! stand-ins. Matrices are `Array2<f64>`, row-major, one example per row;
//! biases are `1 × out` rows broadcast over the batch.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x < 0.0 {
        slope * x
    } else {
        x
    }
}

/// Derivative of [`leaky_relu`]; 1 at exactly zero.
pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x < 0.0 {
        slope
    } else {
        1.0
    }
}

pub fn leaky_relu_mat(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| leaky_relu(v, slope))
}

/// `upstream ⊙ σ'(pre)`.
pub fn leaky_relu_backward(pre: &Array2<f64>, upstream: &Array2<f64>, slope: f64) -> Array2<f64> {
    let mut out = upstream.clone();
    out.zip_mut_with(pre, |g, &z| *g *= leaky_relu_grad(z, slope));
    out
}

/// Row-wise softmax with max subtraction. Entries equal to `-inf` get zero
/// weight.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward of a row softmax: given `p = softmax(s)` and `dL/dp`, returns
/// `dL/ds = p ⊙ (dp − rowsum(dp ⊙ p))`.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(p.raw_dim());
    for ((p_row, dp_row), mut ds_row) in p.rows().into_iter().zip(dp.rows()).zip(ds.rows_mut()) {
        let dot: f64 = p_row.iter().zip(dp_row.iter()).map(|(a, b)| a * b).sum();
        for ((d, &pv), &dpv) in ds_row.iter_mut().zip(p_row.iter()).zip(dp_row.iter()) {
            *d = pv * (dpv - dot);
        }
    }
    ds
}

/// `log Σ exp(row)` computed stably.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of `logits` (rows) against class indices and the
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    assert_eq!(logits.nrows(), targets.len(), "one target per logit row");
    let n = targets.len() as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, (&t, row)) in targets.iter().zip(logits.rows()).enumerate() {
        let lse = log_sum_exp(row.as_slice().expect("contiguous"));
        loss += lse - row[t];
        grad[[i, t]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n);
    (loss / n, grad)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Affine map `x·W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Linear {
        Linear { weight: Array2::zeros((input, output)), bias: Array2::zeros((1, output)) }
    }

    /// Gaussian init with standard deviation `1/sqrt(in)`, zero bias.
    pub fn random<R: Rng>(input: usize, output: usize, rng: &mut R) -> Linear {
        Linear { weight: gaussian((input, output), 1.0 / (input as f64).sqrt(), rng), bias: Array2::zeros((1, output)) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

pub fn gaussian<R: Rng>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || normal.sample(rng))
}

/// Mean over rows, as a `1 × cols` matrix.
pub fn mean_rows(x: ArrayView2<f64>) -> Array2<f64> {
    x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))
}

pub fn all_finite(x: &Array2<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}
