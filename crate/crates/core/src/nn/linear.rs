use rand::Rng;

use super::param::{init_uniform, GradStore, ParamId, ParamStore};
use super::tensor::{matmul, matmul_acc, Tensor};
use crate::error::{Error, Result};

/// `y = x W + b` for `x: [rows, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 || x.cols() != w.shape()[0] || b.len() != w.shape()[1] {
        return Err(Error::Shape(format!(
            "linear: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut y = matmul(x.as_mat(), w.as_mat());
    let out = w.shape()[1];
    for r in 0..y.rows() {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("x has at least one dimension") = out;
    Tensor::from_vec(&shape, y.into_data())
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[in_dim, out_dim], in_dim),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn n_params(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<Tensor> {
        linear(x, p.value(self.weight), p.value(self.bias))
    }

    /// Accumulates dW and db; returns dx.
    pub fn backward(&self, p: &ParamStore, x: &Tensor, dy: &Tensor, g: &mut GradStore) -> Tensor {
        let x2 = x.as_mat();
        let dy2 = dy.as_mat();
        matmul_acc(x2.t(), dy2, g.get_mut(self.weight));
        let db = g.get_mut(self.bias).data_mut();
        for r in 0..dy.rows() {
            for (a, b) in db.iter_mut().zip(dy.row(r)) {
                *a += b;
            }
        }
        let dx = matmul(dy2, p.value(self.weight).as_mat().t());
        Tensor::from_vec(x.shape(), dx.into_data()).expect("dx has the shape of x")
    }
}
