//! Unidirectional LSTM layer with zero initial state.
//!
//! Gate layout along the `4 * hidden` axis is input, forget, cell, output.

use rand::Rng;

use super::param::{init_uniform, GradStore, ParamId, ParamStore};
use super::tensor::{gemm, matmul, matmul_acc, MatMut, MatRef, Tensor};
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Tensor,
    /// Post-activation gates, `[T, 4H]`.
    gates: Vec<f64>,
    /// Cell states `c_0..c_T`, `[(T+1), H]` with `c_0 = 0`.
    cells: Vec<f64>,
    /// Hidden states `h_0..h_T`, `[(T+1), H]` with `h_0 = 0`.
    hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    in_dim: usize,
    hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_ih = store.add(
            format!("{name}.w_ih"),
            init_uniform(rng, &[in_dim, 4 * hidden], in_dim),
        );
        let w_hh = store.add(
            format!("{name}.w_hh"),
            init_uniform(rng, &[hidden, 4 * hidden], hidden),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[4 * hidden]));
        Lstm {
            w_ih,
            w_hh,
            bias,
            in_dim,
            hidden,
        }
    }

    /// `4 * (hidden * (in + hidden) + hidden)`.
    pub fn n_params(in_dim: usize, hidden: usize) -> usize {
        4 * (hidden * (in_dim + hidden) + hidden)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// Runs the recurrence over `x: [T, in]`, returning all hidden states `[T, H]`.
    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<(Tensor, LstmCache)> {
        if x.cols() != self.in_dim {
            return Err(Error::Shape(format!(
                "LSTM expects {} input features, got {}",
                self.in_dim,
                x.cols()
            )));
        }
        let t_len = x.rows();
        let h = self.hidden;
        let g4 = 4 * h;
        let mut gates = matmul(x.as_mat(), p.value(self.w_ih).as_mat()).into_data();
        let bias = p.value(self.bias).data();
        for row in gates.chunks_mut(g4) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        let w_hh = p.value(self.w_hh).as_mat();
        let mut cells = vec![0.0; (t_len + 1) * h];
        let mut hidden = vec![0.0; (t_len + 1) * h];
        for t in 0..t_len {
            let (h_prev, _) = hidden.split_at(h * (t + 1));
            let h_prev = MatRef::new(&h_prev[h * t..], 1, h);
            let row = &mut gates[t * g4..(t + 1) * g4];
            gemm(1.0, h_prev, w_hh, 1.0, MatMut::new(row, 1, g4));
            for j in 0..h {
                row[j] = sigmoid(row[j]);
                row[h + j] = sigmoid(row[h + j]);
                row[2 * h + j] = row[2 * h + j].tanh();
                row[3 * h + j] = sigmoid(row[3 * h + j]);
            }
            for j in 0..h {
                let c = row[h + j] * cells[t * h + j] + row[j] * row[2 * h + j];
                cells[(t + 1) * h + j] = c;
                hidden[(t + 1) * h + j] = row[3 * h + j] * c.tanh();
            }
        }
        let out = Tensor::matrix(t_len, h, hidden[h..].to_vec())?;
        Ok((
            out,
            LstmCache {
                x: x.clone(),
                gates,
                cells,
                hidden,
            },
        ))
    }

    /// Backpropagation through time. Accumulates parameter gradients and
    /// returns dx.
    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &LstmCache,
        dh_all: &Tensor,
        g: &mut GradStore,
    ) -> Tensor {
        let t_len = cache.x.rows();
        let h = self.hidden;
        let g4 = 4 * h;
        let w_hh = p.value(self.w_hh).as_mat();
        let mut dgates = vec![0.0; t_len * g4];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for t in (0..t_len).rev() {
            let gate = &cache.gates[t * g4..(t + 1) * g4];
            let c_prev = &cache.cells[t * h..(t + 1) * h];
            let c = &cache.cells[(t + 1) * h..(t + 2) * h];
            let dg_row = &mut dgates[t * g4..(t + 1) * g4];
            let dh_in = dh_all.row(t);
            for j in 0..h {
                let (i, f, gg, o) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                let dh = dh_in[j] + dh_next[j];
                let tc = c[j].tanh();
                let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                dg_row[j] = dc * gg * i * (1.0 - i);
                dg_row[h + j] = dc * c_prev[j] * f * (1.0 - f);
                dg_row[2 * h + j] = dc * i * (1.0 - gg * gg);
                dg_row[3 * h + j] = dh * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            gemm(
                1.0,
                MatRef::new(dg_row, 1, g4),
                w_hh.t(),
                0.0,
                MatMut::new(&mut dh_next, 1, h),
            );
        }
        let dg = MatRef::new(&dgates, t_len, g4);
        matmul_acc(cache.x.as_mat().t(), dg, g.get_mut(self.w_ih));
        let h_prev = MatRef::new(&cache.hidden[..t_len * h], t_len, h);
        matmul_acc(h_prev.t(), dg, g.get_mut(self.w_hh));
        let db = g.get_mut(self.bias).data_mut();
        for row in dgates.chunks(g4) {
            for (a, b) in db.iter_mut().zip(row) {
                *a += b;
            }
        }
        matmul(dg, p.value(self.w_ih).as_mat().t())
    }
}
