use super::param::{GradStore, ParamId, ParamStore};
use super::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNormCache {
    /// Rows normalized to zero mean and unit variance, before scale and shift.
    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }
}

/// Normalizes each row of `x`; returns the affine output and the cache.
pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, LayerNormCache) {
    let d = x.cols();
    assert!(d >= 1, "layer norm needs at least one feature");
    assert_eq!(gamma.len(), d);
    let mut normalized = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let base = r * d;
        for j in 0..d {
            let n = (row[j] - mean) * is;
            normalized.data_mut()[base + j] = n;
            out.data_mut()[base + j] = n * gamma[j] + beta[j];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::from_vec(&[dim], vec![1.0; dim]).expect("gamma shape"),
        );
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta, dim }
    }

    pub fn n_params(dim: usize) -> usize {
        2 * dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> (Tensor, LayerNormCache) {
        layer_norm(x, p.value(self.gamma).data(), p.value(self.beta).data())
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &LayerNormCache,
        dy: &Tensor,
        g: &mut GradStore,
    ) -> Tensor {
        let d = self.dim;
        let gamma = p.value(self.gamma).data();
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut dx = Tensor::zeros(dy.shape());
        let mut dxhat = vec![0.0; d];
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            let xh = cache.normalized.row(r);
            for j in 0..d {
                dgamma[j] += dyr[j] * xh[j];
                dbeta[j] += dyr[j];
                dxhat[j] = dyr[j] * gamma[j];
            }
            let sum: f64 = dxhat.iter().sum();
            let sum_x: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
            let k = cache.inv_std[r] / d as f64;
            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = k * (d as f64 * dxhat[j] - sum - xh[j] * sum_x);
            }
        }
        for (a, b) in g.get_mut(self.gamma).data_mut().iter_mut().zip(&dgamma) {
            *a += b;
        }
        for (a, b) in g.get_mut(self.beta).data_mut().iter_mut().zip(&dbeta) {
            *a += b;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_row_normalizes_to_shift() {
        let x = Tensor::matrix(1, 4, vec![3.0; 4]).unwrap();
        let (y, _) = layer_norm(&x, &[2.0; 4], &[0.5; 4]);
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let x = Tensor::matrix(2, 5, vec![1.0, 4.0, -2.0, 8.0, 0.5, 10.0, 11.0, 9.0, 10.5, 30.0]).unwrap();
        let (_, cache) = layer_norm(&x, &[1.0; 5], &[0.0; 5]);
        for r in 0..2 {
            let row = cache.normalized().row(r);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-12);
            // eps shifts the variance slightly below one
            assert!((var - 1.0).abs() < 1e-6, "{var}");
        }
    }
}
