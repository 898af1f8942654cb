//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::MultiHeadAttention;
use super::layer_norm::LayerNorm;
use super::linear::Linear;
use super::lstm::Lstm;
use super::param::{init_uniform, GradStore, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// A scalar function of the parameters in a store.
pub trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn loss(&self) -> Result<f64>;
    fn loss_and_grad(&self) -> Result<(f64, GradStore)>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Check at most this many coordinates per tensor, chosen at random.
    /// `None` checks every coordinate.
    pub max_per_param: Option<usize>,
    pub seed: u64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is zero do not divide by zero.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_per_param: None,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub fn gradient_check<O: Objective>(obj: &mut O, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (_, grads) = obj.loss_and_grad()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        n_checked: 0,
    };
    let n_params = obj.params().len();
    for pi in 0..n_params {
        let (name, len) = {
            let p = obj.params().iter().nth(pi).expect("index in range");
            (p.name.clone(), p.value.len())
        };
        let indices: Vec<usize> = match opts.max_per_param {
            Some(m) if m < len => {
                let mut v = sample(&mut rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for i in indices {
            let orig = value_at(obj, pi, i);
            set_value(obj, pi, i, orig + opts.step);
            let plus = obj.loss()?;
            set_value(obj, pi, i, orig - opts.step);
            let minus = obj.loss()?;
            set_value(obj, pi, i, orig);
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grads.tensors()[pi].data()[i];
            let rel = relative_error(analytic, numeric, opts.floor);
            report.n_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn value_at<O: Objective>(obj: &O, pi: usize, i: usize) -> f64 {
    obj.params().iter().nth(pi).expect("index in range").value.data()[i]
}

fn set_value<O: Objective>(obj: &mut O, pi: usize, i: usize, v: f64) {
    obj.params_mut().iter_mut().nth(pi).expect("index in range").value.data_mut()[i] = v;
}

#[derive(Debug, Clone)]
enum ProbeLayer {
    Linear(Linear),
    LayerNorm(LayerNorm),
    Attention(MultiHeadAttention, Option<usize>),
    Lstm(Lstm),
}

/// A single layer wrapped in the loss `sum(y * R)` for a fixed random `R`.
///
/// The input is stored as a parameter too, so the check also covers the
/// gradient flowing back to the layer input.
#[derive(Debug, Clone)]
pub struct LayerProbe {
    store: ParamStore,
    input: ParamId,
    layer: ProbeLayer,
    weights: Tensor,
}

impl LayerProbe {
    fn build(
        seed: u64,
        t: usize,
        in_dim: usize,
        out_dim: usize,
        make: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<ProbeLayer>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = store.add("input", random_tensor(&mut rng, &[t, in_dim], 1.0));
        let layer = make(&mut store, &mut rng)?;
        // Non-trivial biases and affine terms exercise every gradient path.
        for p in store.iter_mut().skip(1) {
            let shape = p.value.shape().to_vec();
            p.value = random_tensor(&mut rng, &shape, 0.5);
        }
        let weights = random_tensor(&mut rng, &[t, out_dim], 1.0);
        Ok(LayerProbe {
            store,
            input,
            layer,
            weights,
        })
    }

    pub fn linear(seed: u64, t: usize, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::build(seed, t, in_dim, out_dim, |s, r| {
            Ok(ProbeLayer::Linear(Linear::new(s, "linear", in_dim, out_dim, r)))
        })
    }

    pub fn layer_norm(seed: u64, t: usize, dim: usize) -> Result<Self> {
        Self::build(seed, t, dim, dim, |s, _| {
            Ok(ProbeLayer::LayerNorm(LayerNorm::new(s, "ln", dim)))
        })
    }

    pub fn attention(
        seed: u64,
        t: usize,
        dim: usize,
        heads: usize,
        n_keys: Option<usize>,
    ) -> Result<Self> {
        Self::build(seed, t, dim, dim, |s, r| {
            Ok(ProbeLayer::Attention(
                MultiHeadAttention::new(s, "mha", dim, heads, r)?,
                n_keys,
            ))
        })
    }

    pub fn lstm(seed: u64, t: usize, in_dim: usize, hidden: usize) -> Result<Self> {
        Self::build(seed, t, in_dim, hidden, |s, r| {
            Ok(ProbeLayer::Lstm(Lstm::new(s, "lstm", in_dim, hidden, r)))
        })
    }

    fn weighted_sum(&self, y: &Tensor) -> f64 {
        y.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum()
    }
}

impl Objective for LayerProbe {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn loss(&self) -> Result<f64> {
        let p = &self.store;
        let x = p.value(self.input);
        let y = match &self.layer {
            ProbeLayer::Linear(l) => l.forward(p, x)?,
            ProbeLayer::LayerNorm(l) => l.forward(p, x).0,
            ProbeLayer::Attention(l, n) => l.forward(p, x, *n)?.0,
            ProbeLayer::Lstm(l) => l.forward(p, x)?.0,
        };
        Ok(self.weighted_sum(&y))
    }

    fn loss_and_grad(&self) -> Result<(f64, GradStore)> {
        let p = &self.store;
        let x = p.value(self.input);
        let mut g = p.zeros_like();
        let dy = &self.weights;
        let (y, dx) = match &self.layer {
            ProbeLayer::Linear(l) => {
                let y = l.forward(p, x)?;
                let dx = l.backward(p, x, dy, &mut g);
                (y, dx)
            }
            ProbeLayer::LayerNorm(l) => {
                let (y, cache) = l.forward(p, x);
                let dx = l.backward(p, &cache, dy, &mut g);
                (y, dx)
            }
            ProbeLayer::Attention(l, n) => {
                let (y, cache) = l.forward(p, x, *n)?;
                let dx = l.backward(p, x, &cache, dy, &mut g);
                (y, dx)
            }
            ProbeLayer::Lstm(l) => {
                let (y, cache) = l.forward(p, x)?;
                let dx = l.backward(p, &cache, dy, &mut g);
                (y, dx)
            }
        };
        g.get_mut(self.input).add_assign(&dx);
        Ok((self.weighted_sum(&y), g))
    }
}

fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let mut t = init_uniform(rng, shape, 1);
    t.scale(scale);
    t
}
