//! Trainable attention adapter shared by every feature stream.
//!
//! `adapt(X) = softmax(X W_Q (X W_K)ᵀ / √d_h) · X W_V · W_O` with no biases,
//! no residual connection and no normalisation. With more than one head the
//! inner width is split evenly and `d_h = d̃ / heads`.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{gaussian_matrix, seeded_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub heads: usize,
}

impl AdapterParams {
    pub fn token_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn inner_dim(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn num_weights(&self) -> usize {
        self.w_q.len() + self.w_k.len() + self.w_v.len() + self.w_o.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_q: Array2::zeros(self.w_q.raw_dim()),
            w_k: Array2::zeros(self.w_k.raw_dim()),
            w_v: Array2::zeros(self.w_v.raw_dim()),
            w_o: Array2::zeros(self.w_o.raw_dim()),
            heads: self.heads,
        }
    }

    pub fn tensors(&self) -> [&Array2<f64>; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, di) = (self.token_dim(), self.inner_dim());
        if di == 0 || d == 0 {
            return Err(Error::config("adapter dimensions must be positive"));
        }
        if self.w_k.dim() != (d, di) || self.w_v.dim() != (d, di) || self.w_o.dim() != (di, d) {
            return Err(Error::config("adapter projection shapes are inconsistent"));
        }
        if self.heads == 0 || di % self.heads != 0 {
            return Err(Error::config(format!(
                "inner width {di} is not divisible by {} heads",
                self.heads
            )));
        }
        if !self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::numeric("adapter weights contain non-finite values"));
        }
        Ok(())
    }
}

/// Seeded scaled-Gaussian initialisation (`std = 1/√fan_in`).
pub fn init_adapter(d: usize, inner: usize, heads: usize, seed: u64) -> Result<AdapterParams> {
    if d == 0 || inner == 0 {
        return Err(Error::config("adapter dimensions must be positive"));
    }
    let mut rng = seeded_rng(seed);
    let in_std = 1.0 / (d as f64).sqrt();
    let params = AdapterParams {
        w_q: gaussian_matrix(&mut rng, d, inner, in_std),
        w_k: gaussian_matrix(&mut rng, d, inner, in_std),
        w_v: gaussian_matrix(&mut rng, d, inner, in_std),
        w_o: gaussian_matrix(&mut rng, inner, d, 1.0 / (inner as f64).sqrt()),
        heads,
    };
    params.validate()?;
    Ok(params)
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AdaptCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head attention matrices, each `n × n` with rows summing to 1.
    pub attention: Vec<Array2<f64>>,
    mixed: Array2<f64>,
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub fn adapt(tokens: ArrayView2<f64>, params: &AdapterParams) -> Result<Array2<f64>> {
    adapt_with_cache(tokens, params).map(|(y, _)| y)
}

pub fn adapt_with_cache(tokens: ArrayView2<f64>, params: &AdapterParams) -> Result<(Array2<f64>, AdaptCache)> {
    if tokens.ncols() != params.token_dim() {
        return Err(Error::config(format!(
            "adapter expects width {}, got {}",
            params.token_dim(),
            tokens.ncols()
        )));
    }
    let q = tokens.dot(&params.w_q);
    let k = tokens.dot(&params.w_k);
    let v = tokens.dot(&params.w_v);
    let head_dim = params.inner_dim() / params.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut mixed = Array2::zeros(q.raw_dim());
    let mut attention = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        mixed.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        attention.push(scores);
    }
    let out = mixed.dot(&params.w_o);
    if !out.iter().all(|x| x.is_finite()) {
        return Err(Error::numeric("adapter produced non-finite output"));
    }
    Ok((
        out,
        AdaptCache {
            x: tokens.to_owned(),
            q,
            k,
            v,
            attention,
            mixed,
        },
    ))
}

/// Returns parameter gradients and the gradient with respect to the input
/// tokens, given `∂L/∂adapt(X)`.
pub fn adapt_backward(params: &AdapterParams, cache: &AdaptCache, grad_out: ArrayView2<f64>) -> (AdapterParams, Array2<f64>) {
    let head_dim = params.inner_dim() / params.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let grad_w_o = cache.mixed.t().dot(&grad_out);
    let grad_mixed = grad_out.dot(&params.w_o.t());
    let mut grad_q = Array2::zeros(cache.q.raw_dim());
    let mut grad_k = Array2::zeros(cache.k.raw_dim());
    let mut grad_v = Array2::zeros(cache.v.raw_dim());
    for (h, attn) in cache.attention.iter().enumerate() {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let g_mixed = grad_mixed.slice(cols);
        let grad_attn = g_mixed.dot(&cache.v.slice(cols).t());
        grad_v.slice_mut(cols).assign(&attn.t().dot(&g_mixed));
        // softmax Jacobian, row-wise
        let row_dot = (&grad_attn * attn).sum_axis(Axis(1)).insert_axis(Axis(1));
        let grad_scores = attn * &(&grad_attn - &row_dot) * scale;
        grad_q.slice_mut(cols).assign(&grad_scores.dot(&cache.k.slice(cols)));
        grad_k.slice_mut(cols).assign(&grad_scores.t().dot(&cache.q.slice(cols)));
    }
    let x_t = cache.x.t();
    let grads = AdapterParams {
        w_q: x_t.dot(&grad_q),
        w_k: x_t.dot(&grad_k),
        w_v: x_t.dot(&grad_v),
        w_o: grad_w_o,
        heads: params.heads,
    };
    let grad_x = grad_q.dot(&params.w_q.t()) + grad_k.dot(&params.w_k.t()) + grad_v.dot(&params.w_v.t());
    (grads, grad_x)
}
