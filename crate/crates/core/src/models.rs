//! The LSTM, Transformer and hybrid segmentation networks.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Sequence, SEQUENCE_LEN};
use crate::error::{Error, Result};
use crate::nn::gradcheck::Objective;
use crate::nn::loss::{argmax, cross_entropy_sum};
use crate::nn::{
    GradStore, LayerNorm, Linear, Lstm, MhaCache, MultiHeadAttention, ParamId, ParamStore, Tensor,
};
use crate::nn::layer_norm::LayerNormCache;
use crate::nn::lstm::LstmCache;
use crate::nn::positional::positional_encoding;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KSEGCKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// The eight named architectures.
pub const MODEL_NAMES: [&str; 8] = [
    "LSTM1",
    "LSTM3",
    "Trans3",
    "Trans6",
    "Trans10",
    "Trans3LSTM1",
    "Trans6LSTM1",
    "Trans3LSTM3",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lstm,
    Transformer,
    Hybrid,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_trans_layers: usize,
    pub n_lstm_layers: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub lstm_hidden: usize,
    pub n_channels: usize,
    pub n_classes: usize,
    /// Keep zero-padded frames out of the attention keys.
    #[serde(default = "default_true")]
    pub key_padding_mask: bool,
}

impl ModelConfig {
    pub fn new(
        n_trans_layers: usize,
        n_lstm_layers: usize,
        n_channels: usize,
        n_classes: usize,
    ) -> Result<Self> {
        let kind = match (n_trans_layers, n_lstm_layers) {
            (0, 0) => return Err(Error::Config("a model needs at least one layer".into())),
            (0, _) => ModelKind::Lstm,
            (_, 0) => ModelKind::Transformer,
            _ => ModelKind::Hybrid,
        };
        let cfg = ModelConfig {
            kind,
            n_trans_layers,
            n_lstm_layers,
            embed_dim: 128,
            n_heads: 8,
            d_ff: 64,
            lstm_hidden: 256,
            n_channels,
            n_classes,
            key_padding_mask: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses names such as `Trans3`, `LSTM1` or `Trans3LSTM1`.
    pub fn from_name(name: &str, n_channels: usize, n_classes: usize) -> Result<Self> {
        let bad = || Error::Config(format!("unknown model name {name:?}"));
        let (trans, rest) = match name.strip_prefix("Trans") {
            Some(rest) => {
                let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
                let n: usize = rest[..digits].parse().map_err(|_| bad())?;
                (n, &rest[digits..])
            }
            None => (0, name),
        };
        let lstm = if rest.is_empty() {
            0
        } else {
            let digits = rest.strip_prefix("LSTM").ok_or_else(bad)?;
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            digits.parse().map_err(|_| bad())?
        };
        if (name.starts_with("Trans") && trans == 0) || (!rest.is_empty() && lstm == 0) {
            return Err(bad());
        }
        Self::new(trans, lstm, n_channels, n_classes).map_err(|_| bad())
    }

    pub fn name(&self) -> String {
        let mut s = String::new();
        if self.n_trans_layers > 0 {
            s += &format!("Trans{}", self.n_trans_layers);
        }
        if self.n_lstm_layers > 0 {
            s += &format!("LSTM{}", self.n_lstm_layers);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let layers_ok = match self.kind {
            ModelKind::Lstm => self.n_trans_layers == 0 && self.n_lstm_layers >= 1,
            ModelKind::Transformer => self.n_trans_layers >= 1 && self.n_lstm_layers == 0,
            ModelKind::Hybrid => self.n_trans_layers >= 1 && self.n_lstm_layers >= 1,
        };
        if !layers_ok {
            return Err(Error::Config(format!(
                "{:?} model cannot have {} transformer and {} LSTM layers",
                self.kind, self.n_trans_layers, self.n_lstm_layers
            )));
        }
        if self.n_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.lstm_hidden == 0 || self.n_channels == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.n_classes == 0 || self.n_classes > 255 {
            return Err(Error::Config(format!(
                "n_classes must be in 1..=255, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn has_attention(&self) -> bool {
        self.n_trans_layers > 0
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

fn encoder_block_params(dim: usize, d_ff: usize) -> usize {
    MultiHeadAttention::n_params(dim)
        + 2 * LayerNorm::n_params(dim)
        + Linear::n_params(dim, d_ff)
        + Linear::n_params(d_ff, dim)
}

/// Closed-form parameter count; equals the number of scalars [`Model::build`] allocates.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let mut n = 0;
    let mut width = cfg.n_channels;
    if cfg.n_trans_layers > 0 {
        n += Linear::n_params(cfg.n_channels, cfg.embed_dim);
        n += cfg.n_trans_layers * encoder_block_params(cfg.embed_dim, cfg.d_ff);
        width = cfg.embed_dim;
    }
    for _ in 0..cfg.n_lstm_layers {
        n += Lstm::n_params(width, cfg.lstm_hidden);
        width = cfg.lstm_hidden;
    }
    n + Linear::n_params(width, cfg.n_classes)
}

/// Per-channel z-scoring of the raw coordinates, fitted on training data.
///
/// Applied to valid frames only, so zero padding stays zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(n_channels: usize) -> Self {
        InputNorm {
            mean: vec![0.0; n_channels],
            std: vec![1.0; n_channels],
        }
    }

    pub fn fit(sequences: &[&Sequence]) -> Result<Self> {
        let c = sequences
            .first()
            .map(|s| s.n_channels())
            .ok_or_else(|| Error::Config("cannot fit input normalization on no data".into()))?;
        let mut sum = vec![0.0; c];
        let mut sum_sq = vec![0.0; c];
        let mut n = 0usize;
        for s in sequences {
            if s.n_channels() != c {
                return Err(Error::Shape(format!(
                    "sequence {} has {} channels, expected {c}",
                    s.id,
                    s.n_channels()
                )));
            }
            for t in 0..s.valid_len() {
                for (j, &v) in s.row(t).iter().enumerate() {
                    sum[j] += v;
                    sum_sq[j] += v * v;
                }
            }
            n += s.valid_len();
        }
        if n == 0 {
            return Ok(Self::identity(c));
        }
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let sd = (sq / n - m * m).max(0.0).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(InputNorm { mean, std })
    }

    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    /// Normalized copy of the first `valid_len` rows of `values`; later rows are zero.
    pub fn apply(&self, values: &Tensor, valid_len: usize) -> Tensor {
        let mut out = Tensor::zeros(values.shape());
        for t in 0..valid_len.min(values.rows()) {
            for (j, (o, v)) in out.row_mut(t).iter_mut().zip(values.row(t)).enumerate() {
                *o = (v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// Post-norm transformer encoder layer with a ReLU feed-forward sublayer.
#[derive(Debug, Clone)]
struct EncoderBlock {
    mha: MultiHeadAttention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

#[derive(Debug, Clone)]
struct BlockCache {
    x: Tensor,
    mha: MhaCache,
    ln1: LayerNormCache,
    h1: Tensor,
    pre: Tensor,
    act: Tensor,
    ln2: LayerNormCache,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(EncoderBlock {
            mha: MultiHeadAttention::new(store, &format!("{name}.mha"), d, cfg.n_heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.d_ff, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.d_ff, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
        })
    }

    fn forward(&self, p: &ParamStore, x: Tensor, n_keys: Option<usize>) -> Result<(Tensor, BlockCache)> {
        let (mut r1, mha) = self.mha.forward(p, &x, n_keys)?;
        r1.add_assign(&x);
        let (h1, ln1) = self.ln1.forward(p, &r1);
        let pre = self.ff1.forward(p, &h1)?;
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut r2 = self.ff2.forward(p, &act)?;
        r2.add_assign(&h1);
        let (out, ln2) = self.ln2.forward(p, &r2);
        Ok((
            out,
            BlockCache {
                x,
                mha,
                ln1,
                h1,
                pre,
                act,
                ln2,
            },
        ))
    }

    fn backward(&self, p: &ParamStore, c: &BlockCache, dout: &Tensor, g: &mut GradStore) -> Tensor {
        let dr2 = self.ln2.backward(p, &c.ln2, dout, g);
        let mut dact = self.ff2.backward(p, &c.act, &dr2, g);
        for (d, &z) in dact.data_mut().iter_mut().zip(c.pre.data()) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        let mut dh1 = self.ff1.backward(p, &c.h1, &dact, g);
        dh1.add_assign(&dr2);
        let dr1 = self.ln1.backward(p, &c.ln1, &dh1, g);
        let mut dx = self.mha.backward(p, &c.x, &c.mha, &dr1, g);
        dx.add_assign(&dr1);
        dx
    }
}

/// Attention weights of every head in every encoder layer, `[T, T]` each.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionTrace {
    /// Elementwise mean over the heads of the last layer.
    pub fn final_layer_mean(&self) -> Option<Tensor> {
        let heads = self.layers.last()?;
        let mut mean = Tensor::zeros(heads.first()?.shape());
        for h in heads {
            mean.add_assign(h);
        }
        mean.scale(1.0 / heads.len() as f64);
        Some(mean)
    }
}

struct ForwardCache {
    embed_in: Tensor,
    blocks: Vec<BlockCache>,
    lstms: Vec<LstmCache>,
    head_in: Tensor,
}

/// Summed loss and gradients for one sequence.
#[derive(Debug, Clone)]
pub struct SequenceGrad {
    pub loss_sum: f64,
    pub count: usize,
    pub correct: usize,
    pub grads: GradStore,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    input_proj: Option<Linear>,
    blocks: Vec<EncoderBlock>,
    lstms: Vec<Lstm>,
    head: Linear,
    input_norm: InputNorm,
    /// Positional table for the standard sequence length.
    pe: Tensor,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    input_norm: InputNorm,
    tensors: Vec<TensorHeader>,
}

impl Model {
    /// Builds a freshly initialized model; the same seed gives the same weights.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut width = config.n_channels;
        let mut input_proj = None;
        let mut blocks = Vec::new();
        if config.n_trans_layers > 0 {
            input_proj = Some(Linear::new(
                &mut store,
                "input_proj",
                config.n_channels,
                config.embed_dim,
                &mut rng,
            ));
            for i in 0..config.n_trans_layers {
                blocks.push(EncoderBlock::new(&mut store, &format!("encoder{i}"), &config, &mut rng)?);
            }
            width = config.embed_dim;
        }
        let mut lstms = Vec::new();
        for i in 0..config.n_lstm_layers {
            lstms.push(Lstm::new(&mut store, &format!("lstm{i}"), width, config.lstm_hidden, &mut rng));
            width = config.lstm_hidden;
        }
        let head = Linear::new(&mut store, "head", width, config.n_classes, &mut rng);
        let input_norm = InputNorm::identity(config.n_channels);
        let pe = if config.has_attention() {
            positional_encoding(SEQUENCE_LEN, config.embed_dim)
        } else {
            Tensor::zeros(&[0, 0])
        };
        Ok(Model {
            config,
            store,
            input_proj,
            blocks,
            lstms,
            head,
            input_norm,
            pe,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn name(&self) -> String {
        self.config.name()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn n_params(&self) -> usize {
        self.store.n_scalars()
    }

    pub fn input_norm(&self) -> &InputNorm {
        &self.input_norm
    }

    pub fn set_input_norm(&mut self, norm: InputNorm) -> Result<()> {
        if norm.n_channels() != self.config.n_channels {
            return Err(Error::Shape(format!(
                "input normalization has {} channels, model expects {}",
                norm.n_channels(),
                self.config.n_channels
            )));
        }
        self.input_norm = norm;
        Ok(())
    }

    /// Weight of the first layer that sees the raw channels, `[C, width]`.
    pub fn input_weight(&self) -> ParamId {
        match &self.input_proj {
            Some(l) => l.weight,
            None => self.lstms[0].w_ih,
        }
    }

    fn check_input(&self, values: &Tensor) -> Result<()> {
        if values.shape().len() != 2 || values.cols() != self.config.n_channels {
            return Err(Error::Shape(format!(
                "model expects [T, {}] input, got {:?}",
                self.config.n_channels,
                values.shape()
            )));
        }
        Ok(())
    }

    fn forward_impl(&self, x: &Tensor, n_keys: Option<usize>) -> Result<(Tensor, ForwardCache)> {
        let p = &self.store;
        let t = x.rows();
        let mut h = x.clone();
        let mut embed_in = Tensor::zeros(&[0, 0]);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        if let Some(proj) = &self.input_proj {
            let mut e = proj.forward(p, x)?;
            if t <= self.pe.rows() {
                let n = e.len();
                for (v, pe) in e.data_mut().iter_mut().zip(&self.pe.data()[..n]) {
                    *v += pe;
                }
            } else {
                e.add_assign(&positional_encoding(t, self.config.embed_dim));
            }
            for block in &self.blocks {
                let (out, cache) = block.forward(p, e, n_keys)?;
                blocks.push(cache);
                e = out;
            }
            embed_in = x.clone();
            h = e;
        }
        let mut lstms = Vec::with_capacity(self.lstms.len());
        for lstm in &self.lstms {
            let (out, cache) = lstm.forward(p, &h)?;
            lstms.push(cache);
            h = out;
        }
        let logits = self.head.forward(p, &h)?;
        Ok((
            logits,
            ForwardCache {
                embed_in,
                blocks,
                lstms,
                head_in: h,
            },
        ))
    }

    fn backward_impl(&self, cache: &ForwardCache, dlogits: &Tensor, g: &mut GradStore) {
        let p = &self.store;
        let mut dh = self.head.backward(p, &cache.head_in, dlogits, g);
        for (lstm, c) in self.lstms.iter().zip(&cache.lstms).rev() {
            dh = lstm.backward(p, c, &dh, g);
        }
        if let Some(proj) = &self.input_proj {
            for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
                dh = block.backward(p, c, &dh, g);
            }
            // The positional table is constant; the embedding gradient flows
            // straight into the projection.
            proj.backward(p, &cache.embed_in, &dh, g);
        }
    }

    fn key_limit(&self, valid_len: usize) -> Option<usize> {
        self.config.key_padding_mask.then_some(valid_len)
    }

    /// Rows the loss depends on when only the first `valid_len` frames are
    /// scored. With masked keys (or no attention) later frames cannot affect
    /// earlier ones, so the tail is skipped.
    fn effective_len(&self, total: usize, valid_len: usize) -> usize {
        if self.config.key_padding_mask || !self.config.has_attention() {
            valid_len.clamp(1, total)
        } else {
            total
        }
    }

    /// Per-frame logits for raw `values: [T, C]` whose first `valid_len` rows
    /// are real frames.
    pub fn forward(&self, values: &Tensor, valid_len: usize) -> Result<Tensor> {
        self.check_input(values)?;
        let x = self.input_norm.apply(values, valid_len);
        Ok(self.forward_impl(&x, self.key_limit(valid_len))?.0)
    }

    /// As [`Model::forward`], also returning every attention map.
    pub fn forward_traced(&self, values: &Tensor, valid_len: usize) -> Result<(Tensor, AttentionTrace)> {
        self.check_input(values)?;
        let x = self.input_norm.apply(values, valid_len);
        let (logits, cache) = self.forward_impl(&x, self.key_limit(valid_len))?;
        let layers = cache.blocks.into_iter().map(|b| b.mha.weights).collect();
        Ok((logits, AttentionTrace { layers }))
    }

    pub fn sequence_tensor(&self, seq: &Sequence) -> Result<Tensor> {
        Tensor::matrix(seq.len(), seq.n_channels(), seq.values.clone())
    }

    pub fn forward_sequence(&self, seq: &Sequence) -> Result<Tensor> {
        self.forward(&self.sequence_tensor(seq)?, seq.valid_len())
    }

    /// Argmax class of each of the first `valid_len` frames.
    pub fn predict(&self, values: &Tensor, valid_len: usize) -> Result<Vec<u8>> {
        self.check_input(values)?;
        let valid = valid_len.min(values.rows());
        let x = self.truncated_input(values, valid)?;
        let (logits, _) = self.forward_impl(&x, self.key_limit(valid))?;
        Ok((0..valid).map(|t| argmax(logits.row(t)) as u8).collect())
    }

    /// Normalized input cut to the rows that valid-frame outputs depend on.
    fn truncated_input(&self, values: &Tensor, valid_len: usize) -> Result<Tensor> {
        let t = self.effective_len(values.rows(), valid_len);
        let mut x = self.input_norm.apply(values, valid_len).into_data();
        x.truncate(t * values.cols());
        Tensor::matrix(t, values.cols(), x)
    }

    pub fn predict_sequence(&self, seq: &Sequence) -> Result<Vec<u8>> {
        self.predict(&self.sequence_tensor(seq)?, seq.valid_len())
    }

    /// Summed cross-entropy over the labelled frames of `seq`, its gradient,
    /// and the number of correctly classified frames.
    pub fn sequence_grad(&self, seq: &Sequence, ignore_index: u8) -> Result<SequenceGrad> {
        let values = self.sequence_tensor(seq)?;
        self.check_input(&values)?;
        let valid = seq.valid_len();
        let x = self.truncated_input(&values, valid)?;
        let t = x.rows();
        let (logits, cache) = self.forward_impl(&x, self.key_limit(valid))?;
        let ce = cross_entropy_sum(&logits, &seq.labels[..t], ignore_index)?;
        let mut grads = self.store.zeros_like();
        if ce.count > 0 {
            self.backward_impl(&cache, &ce.dlogits, &mut grads);
        }
        Ok(SequenceGrad {
            loss_sum: ce.loss_sum,
            count: ce.count,
            correct: ce.correct,
            grads,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            input_norm: self.input_norm.clone(),
            tensors: self
                .store
                .iter()
                .map(|p| TensorHeader {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(24 + json.len() + 8 * self.store.n_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        bytes.read_exact(&mut word).map_err(|_| bad("truncated"))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let mut len = [0u8; 8];
        bytes.read_exact(&mut len).map_err(|_| bad("truncated"))?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header too large"))?;
        if bytes.len() < len {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..len])?;
        bytes = &bytes[len..];
        let mut model = Model::build(header.config, 0)?;
        model.set_input_norm(header.input_norm)?;
        if header.tensors.len() != model.store.len() {
            return Err(bad("tensor list does not match the configuration"));
        }
        for (p, th) in model.store.iter_mut().zip(&header.tensors) {
            if p.name != th.name || p.value.shape() != th.shape.as_slice() {
                return Err(bad(&format!("unexpected tensor {} {:?}", th.name, th.shape)));
            }
            for v in p.value.data_mut() {
                let mut b = [0u8; 8];
                bytes.read_exact(&mut b).map_err(|_| bad("truncated tensor data"))?;
                *v = f64::from_le_bytes(b);
            }
        }
        if !bytes.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

/// Mean masked cross-entropy of a model on one labelled input, as an
/// [`Objective`] for gradient checking.
#[derive(Debug, Clone)]
pub struct SequenceObjective {
    pub model: Model,
    pub sequence: Sequence,
    pub ignore_index: u8,
}

impl Objective for SequenceObjective {
    fn params(&self) -> &ParamStore {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }

    fn loss(&self) -> Result<f64> {
        let g = self.model.sequence_grad(&self.sequence, self.ignore_index)?;
        if g.count == 0 {
            return Err(Error::EmptyLoss);
        }
        Ok(g.loss_sum / g.count as f64)
    }

    fn loss_and_grad(&self) -> Result<(f64, GradStore)> {
        let g = self.model.sequence_grad(&self.sequence, self.ignore_index)?;
        if g.count == 0 {
            return Err(Error::EmptyLoss);
        }
        let n = g.count as f64;
        let mut grads = g.grads;
        for t in grads.tensors_mut() {
            t.scale(1.0 / n);
        }
        Ok((g.loss_sum / n, grads))
    }
}
