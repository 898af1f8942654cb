//! Scaled dot-product and multi-head self-attention.
//!
//! `Attention(Q, K, V) = softmax(Q K^T / sqrt(d_k)) V`, computed per head on
//! column blocks of the projected Q/K/V matrices.

use rand::Rng;

use super::linear::Linear;
use super::param::{GradStore, ParamStore};
use super::tensor::{gemm, MatMut, MatRef, Tensor};
use crate::error::{Error, Result};

/// Row softmax over the first `n_keys` columns; later columns are zeroed.
fn softmax_rows(scores: &mut [f64], rows: usize, cols: usize, n_keys: usize) {
    for r in 0..rows {
        let row = &mut scores[r * cols..(r + 1) * cols];
        let (live, masked) = row.split_at_mut(n_keys);
        let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in live.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in live.iter_mut() {
            *v /= sum;
        }
        masked.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Writes the attention weights into `weights` (`q.rows x k.rows`) and the
/// attended values into `out`.
fn attend(q: MatRef, k: MatRef, v: MatRef, n_keys: usize, weights: &mut [f64], out: MatMut) {
    let (tq, tk) = (q.rows(), k.rows());
    let scale = 1.0 / (q.cols() as f64).sqrt();
    gemm(scale, q, k.t(), 0.0, MatMut::new(weights, tq, tk));
    softmax_rows(weights, tq, tk, n_keys);
    gemm(1.0, MatRef::new(weights, tq, tk), v, 0.0, out);
}

/// Gradients of [`attend`] with respect to q, k and v.
#[allow(clippy::too_many_arguments)]
fn attend_backward(
    q: MatRef,
    k: MatRef,
    v: MatRef,
    weights: &[f64],
    dout: MatRef,
    dq: MatMut,
    dk: MatMut,
    dv: MatMut,
) {
    let (tq, tk) = (q.rows(), k.rows());
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let a = MatRef::new(weights, tq, tk);
    gemm(1.0, a.t(), dout, 0.0, dv);

    let mut ds = vec![0.0; tq * tk];
    gemm(1.0, dout, v.t(), 0.0, MatMut::new(&mut ds, tq, tk));
    for r in 0..tq {
        let w = &weights[r * tk..(r + 1) * tk];
        let d = &mut ds[r * tk..(r + 1) * tk];
        let dot: f64 = w.iter().zip(d.iter()).map(|(a, b)| a * b).sum();
        for (dv, &wv) in d.iter_mut().zip(w) {
            *dv = wv * (*dv - dot);
        }
    }
    let ds = MatRef::new(&ds, tq, tk);
    gemm(scale, ds, k, 0.0, dq);
    gemm(scale, ds.t(), q, 0.0, dk);
}

/// Returns `(softmax(Q K^T / sqrt(d_k)) V, weights)`.
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let dk = q.cols();
    if dk == 0 {
        return Err(Error::Shape("attention key dimension d_k is zero".into()));
    }
    if k.cols() != dk || k.rows() != v.rows() || k.rows() == 0 {
        return Err(Error::Shape(format!(
            "attention: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (tq, tk, dv) = (q.rows(), k.rows(), v.cols());
    let mut weights = Tensor::zeros(&[tq, tk]);
    let mut out = Tensor::zeros(&[tq, dv]);
    attend(
        q.as_mat(),
        k.as_mat(),
        v.as_mat(),
        tk,
        weights.data_mut(),
        MatMut::new(out.data_mut(), tq, dv),
    );
    Ok((out, weights))
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    context: Tensor,
    /// Per-head `T x T` attention weights.
    pub weights: Vec<Tensor>,
}

/// Multi-head self-attention with separate Q/K/V/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    n_heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::Config(format!(
                "embedding dimension {dim} is not divisible by {n_heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            n_heads,
            dim,
        })
    }

    pub fn n_params(dim: usize) -> usize {
        4 * Linear::n_params(dim, dim)
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Self-attention over `x: [T, dim]`. Only the first `n_keys` positions
    /// are attended to (`None` = all).
    pub fn forward(
        &self,
        p: &ParamStore,
        x: &Tensor,
        n_keys: Option<usize>,
    ) -> Result<(Tensor, MhaCache)> {
        let t = x.rows();
        let n_keys = n_keys.unwrap_or(t).clamp(1, t.max(1));
        let q = self.q.forward(p, x)?;
        let k = self.k.forward(p, x)?;
        let v = self.v.forward(p, x)?;
        let hd = self.head_dim();
        let mut context = Tensor::zeros(&[t, self.dim]);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let mut w = Tensor::zeros(&[t, t]);
            attend(
                q.as_mat().col_block(h * hd, hd),
                k.as_mat().col_block(h * hd, hd),
                v.as_mat().col_block(h * hd, hd),
                n_keys,
                w.data_mut(),
                MatMut::new(context.data_mut(), t, self.dim).col_block(h * hd, hd),
            );
            weights.push(w);
        }
        let y = self.out.forward(p, &context)?;
        Ok((
            y,
            MhaCache {
                q,
                k,
                v,
                context,
                weights,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        x: &Tensor,
        cache: &MhaCache,
        dy: &Tensor,
        g: &mut GradStore,
    ) -> Tensor {
        let t = x.rows();
        let hd = self.head_dim();
        let dcontext = self.out.backward(p, &cache.context, dy, g);
        let mut dq = Tensor::zeros(&[t, self.dim]);
        let mut dk = Tensor::zeros(&[t, self.dim]);
        let mut dv = Tensor::zeros(&[t, self.dim]);
        for h in 0..self.n_heads {
            attend_backward(
                cache.q.as_mat().col_block(h * hd, hd),
                cache.k.as_mat().col_block(h * hd, hd),
                cache.v.as_mat().col_block(h * hd, hd),
                cache.weights[h].data(),
                dcontext.as_mat().col_block(h * hd, hd),
                MatMut::new(dq.data_mut(), t, self.dim).col_block(h * hd, hd),
                MatMut::new(dk.data_mut(), t, self.dim).col_block(h * hd, hd),
                MatMut::new(dv.data_mut(), t, self.dim).col_block(h * hd, hd),
            );
        }
        let mut dx = self.q.backward(p, x, &dq, g);
        dx.add_assign(&self.k.backward(p, x, &dk, g));
        dx.add_assign(&self.v.backward(p, x, &dv, g));
        dx
    }
}
