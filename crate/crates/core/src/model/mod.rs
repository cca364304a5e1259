//! Byte-level single-head decoder-only transformer.
//!
//! Block layout (pre-norm):
//! `x = LN1(h); h' = h + Attn(xW_Q, xW_K, xW_V)·W_O; h'' = h' + MLP(LN2(h'))`.
//! The trace exposes `h` (block input), `x` (attention input) and the base
//! `Q/K/V`, which the retrieval branch reuses instead of recomputing.

mod pretrain;
mod tokens;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::tensor::{dot, row_times_matrix, seeded_init, softmax_in_place, InitScheme, Matrix, Seed};

pub use pretrain::{pretrain, pretrain_loss_and_grad, PretrainConfig, PretrainReport};
pub use tokens::{
    detokenize, tokenize, tokenize_candidate, TokenSequence, BOS, BYTE_VOCAB, CANDIDATE_PREFIX,
    MIN_VOCAB,
};

const LN_EPS: f64 = 1e-5;
const MODEL_MAGIC: [u8; 8] = *b"SRGMODL\0";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: MIN_VOCAB,
            d_model: 64,
            n_layers: 2,
            max_seq_len: 320,
            mlp_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.mlp_hidden == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {} below minimum {MIN_VOCAB}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    pub fn index(self) -> usize {
        match self {
            Projection::Query => 0,
            Projection::Key => 1,
            Projection::Value => 2,
        }
    }
}

/// Additive change to a base projection, evaluated inside the generation path.
/// Only the vanilla-LoRA contrast mode uses this.
pub trait ProjectionDelta {
    fn delta(&self, layer: usize, proj: Projection, attn_input: &Matrix) -> Result<Matrix>;
}

/// Frozen weights of one block. Read-only outside this module.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    ln1_gain: Matrix,
    ln1_bias: Matrix,
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    w_o: Matrix,
    ln2_gain: Matrix,
    ln2_bias: Matrix,
    w_up: Matrix,
    b_up: Matrix,
    w_down: Matrix,
    b_down: Matrix,
}

impl LayerWeights {
    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }
    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }
    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }
    pub fn w_o(&self) -> &Matrix {
        &self.w_o
    }

    pub fn projection(&self, p: Projection) -> &Matrix {
        match p {
            Projection::Query => &self.w_q,
            Projection::Key => &self.w_k,
            Projection::Value => &self.w_v,
        }
    }

    fn tensors(&self) -> [&Matrix; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }
}

const LAYER_TENSOR_NAMES: [&str; 12] = [
    "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w_up", "b_up",
    "w_down", "b_down",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    config: ModelConfig,
    tok_emb: Matrix,
    pos_emb: Matrix,
    layers: Vec<LayerWeights>,
    lnf_gain: Matrix,
    lnf_bias: Matrix,
}

/// Per-layer quantities the retrieval branch consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Residual-stream input to the block, `h`.
    pub block_input: Matrix,
    /// `LN1(h)`, the matrix the Q/K/V projections multiply.
    pub attn_input: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub logits: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    /// Only the token budget applies.
    Budget,
    /// Stop after emitting the n-th newline.
    Lines(usize),
}

#[cfg(test)]
thread_local! {
    pub(crate) static PROJECT_CALLS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// `h · w`.
pub fn project(h: &Matrix, w: &Matrix) -> Result<Matrix> {
    #[cfg(test)]
    PROJECT_CALLS.with(|c| c.set(c.get() + 1));
    h.matmul(w)
}

/// Single-head scaled dot-product attention.
pub fn self_attention(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Result<Matrix> {
    if q.cols() != k.cols() || k.rows() != v.rows() || (causal && q.rows() > k.rows()) {
        return Err(Error::ShapeMismatch {
            op: "self_attention",
            left: q.shape(),
            right: k.shape(),
        });
    }
    let scale = (q.cols() as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut probs = Vec::new();
    for i in 0..q.rows() {
        let visible = if causal { i + 1 } else { k.rows() };
        attend_row(q.row(i), k, v, visible, scale, &mut probs, out.row_mut(i));
    }
    Ok(out)
}

/// Softmax attention of one query row over the first `visible` key/value rows.
/// Leaves the attention weights in `probs`.
#[inline]
pub(crate) fn attend_row(
    q: &[f64],
    k: &Matrix,
    v: &Matrix,
    visible: usize,
    scale: f64,
    probs: &mut Vec<f64>,
    out: &mut [f64],
) {
    probs.clear();
    probs.extend((0..visible).map(|j| dot(q, k.row(j)) / scale));
    softmax_in_place(probs);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &p) in probs.iter().enumerate() {
        for (o, &vj) in out.iter_mut().zip(v.row(j)) {
            *o += p * vj;
        }
    }
}

pub(crate) struct LnCache {
    pub xhat: Matrix,
    pub rstd: Vec<f64>,
}

fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], xhat: &mut [f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = xhat[i] * gain[i] + bias[i];
    }
    rstd
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LnCache) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut rstd = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let mut xh = vec![0.0; x.cols()];
        rstd.push(layer_norm_row(x.row(i), gain.data(), bias.data(), &mut xh, out.row_mut(i)));
        xhat.row_mut(i).copy_from_slice(&xh);
    }
    (out, LnCache { xhat, rstd })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

fn add_bias_rows(m: &mut Matrix, bias: &Matrix) {
    for i in 0..m.rows() {
        for (v, b) in m.row_mut(i).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

/// Everything the backward pass needs from one block.
pub(crate) struct LayerActs {
    pub block_input: Matrix,
    pub ln1: LnCache,
    pub attn_input: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<Vec<f64>>,
    pub attn: Matrix,
    pub ln2: LnCache,
    pub mlp_input: Matrix,
    pub pre_act: Matrix,
    pub act: Matrix,
}

pub(crate) struct Activations {
    pub layers: Vec<LayerActs>,
    pub lnf: LnCache,
    pub final_norm: Matrix,
    pub logits: Option<Matrix>,
}

impl Transformer {
    pub fn init(config: ModelConfig, seed: Seed) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let m = config.mlp_hidden;
        let weight = |fan_in: usize, fan_out: usize, tag: u64| -> Result<Matrix> {
            // seeded_init scales by 1/sqrt(cols); rescale to 1/sqrt(fan_in).
            let w = seeded_init(fan_in, fan_out, seed.derive(tag), InitScheme::UniformScaled)?;
            Ok(w.scale((fan_out as f64 / fan_in as f64).sqrt()))
        };
        let ones = |n: usize| Matrix::new(1, n, vec![1.0; n]);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let base = 100 + 16 * l as u64;
            let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
            layers.push(LayerWeights {
                ln1_gain: ones(d)?,
                ln1_bias: Matrix::zeros(1, d),
                w_q: weight(d, d, base)?,
                w_k: weight(d, d, base + 1)?,
                w_v: weight(d, d, base + 2)?,
                w_o: weight(d, d, base + 3)?.scale(residual_scale),
                ln2_gain: ones(d)?,
                ln2_bias: Matrix::zeros(1, d),
                w_up: weight(d, m, base + 4)?,
                b_up: Matrix::zeros(1, m),
                w_down: weight(m, d, base + 5)?.scale(residual_scale),
                b_down: Matrix::zeros(1, d),
            });
        }
        Ok(Self {
            config,
            tok_emb: seeded_init(config.vocab_size, d, seed.derive(1), InitScheme::UniformScaled)?
                .scale(4.0),
            pos_emb: seeded_init(config.max_seq_len, d, seed.derive(2), InitScheme::UniformScaled)?
                .scale(4.0),
            layers,
            lnf_gain: ones(d)?,
            lnf_bias: Matrix::zeros(1, d),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.layers[l]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::WindowOverflow {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.ids().iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed_tokens(&self, ids: &[u32]) -> Matrix {
        let d = self.config.d_model;
        let mut h = Matrix::zeros(ids.len(), d);
        for (t, &id) in ids.iter().enumerate() {
            let tok = self.tok_emb.row(id as usize);
            let pos = self.pos_emb.row(t);
            for ((o, a), b) in h.row_mut(t).iter_mut().zip(tok).zip(pos) {
                *o = a + b;
            }
        }
        h
    }

    pub(crate) fn run(
        &self,
        tokens: &TokenSequence,
        delta: Option<&dyn ProjectionDelta>,
        with_logits: bool,
    ) -> Result<Activations> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let scale = (d as f64).sqrt();
        let mut h = self.embed_tokens(tokens.ids());
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, w) in self.layers.iter().enumerate() {
            let (x, ln1) = layer_norm(&h, &w.ln1_gain, &w.ln1_bias);
            let mut q = project(&x, &w.w_q)?;
            let mut k = project(&x, &w.w_k)?;
            let mut v = project(&x, &w.w_v)?;
            if let Some(delta) = delta {
                q.add_assign(&delta.delta(l, Projection::Query, &x)?)?;
                k.add_assign(&delta.delta(l, Projection::Key, &x)?)?;
                v.add_assign(&delta.delta(l, Projection::Value, &x)?)?;
            }
            let t = x.rows();
            let mut attn = Matrix::zeros(t, d);
            let mut probs = Vec::with_capacity(t);
            let mut row_probs = Vec::with_capacity(t);
            for i in 0..t {
                attend_row(q.row(i), &k, &v, i + 1, scale, &mut row_probs, attn.row_mut(i));
                probs.push(row_probs.clone());
            }
            let mid = h.add(&attn.matmul(&w.w_o)?)?;
            let (y, ln2) = layer_norm(&mid, &w.ln2_gain, &w.ln2_bias);
            let mut pre_act = y.matmul(&w.w_up)?;
            add_bias_rows(&mut pre_act, &w.b_up);
            let act = Matrix::from_fn(pre_act.rows(), pre_act.cols(), |i, j| gelu(pre_act.get(i, j)));
            let mut mlp = act.matmul(&w.w_down)?;
            add_bias_rows(&mut mlp, &w.b_down);
            let out = mid.add(&mlp)?;
            layers.push(LayerActs {
                block_input: std::mem::replace(&mut h, out),
                ln1,
                attn_input: x,
                q,
                k,
                v,
                probs,
                attn,
                ln2,
                mlp_input: y,
                pre_act,
                act,
            });
        }
        let (final_norm, lnf) = layer_norm(&h, &self.lnf_gain, &self.lnf_bias);
        let logits = if with_logits {
            Some(final_norm.matmul_t(&self.tok_emb)?)
        } else {
            None
        };
        Ok(Activations {
            layers,
            lnf,
            final_norm,
            logits,
        })
    }

    fn trace_from(acts: Activations) -> ForwardTrace {
        ForwardTrace {
            logits: acts.logits.unwrap_or_else(|| Matrix::zeros(0, 0)),
            layers: acts
                .layers
                .into_iter()
                .map(|a| LayerTrace {
                    block_input: a.block_input,
                    attn_input: a.attn_input,
                    q: a.q,
                    k: a.k,
                    v: a.v,
                })
                .collect(),
        }
    }

    pub fn forward(&self, tokens: &TokenSequence) -> Result<ForwardTrace> {
        Ok(Self::trace_from(self.run(tokens, None, true)?))
    }

    /// Layer traces only; skips the output projection to the vocabulary.
    pub fn forward_layers(&self, tokens: &TokenSequence) -> Result<Vec<LayerTrace>> {
        Ok(Self::trace_from(self.run(tokens, None, false)?).layers)
    }

    /// Forward pass with `delta` added to Q/K/V inside the self-attention.
    pub fn forward_with_delta(
        &self,
        tokens: &TokenSequence,
        delta: &dyn ProjectionDelta,
    ) -> Result<ForwardTrace> {
        Ok(Self::trace_from(self.run(tokens, Some(delta), true)?))
    }

    pub fn greedy_generate(&self, prompt: &TokenSequence, max_new: usize, stop: StopRule) -> Result<TokenSequence> {
        self.decode(prompt, max_new, stop, |logits| argmax_bytes(logits))
    }

    pub fn sample_generate(
        &self,
        prompt: &TokenSequence,
        max_new: usize,
        temperature: f64,
        seed: Seed,
        stop: StopRule,
    ) -> Result<TokenSequence> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let mut rng = seed.rng();
        self.decode(prompt, max_new, stop, |logits| {
            let bytes = &logits[..BYTE_VOCAB];
            let max = bytes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = bytes.iter().map(|l| ((l - max) / temperature).exp()).collect();
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                return argmax_bytes(logits);
            }
            let mut u = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                u -= w;
                if u < 0.0 {
                    return i as u32;
                }
            }
            argmax_bytes(logits)
        })
    }

    fn decode(
        &self,
        prompt: &TokenSequence,
        max_new: usize,
        stop: StopRule,
        mut choose: impl FnMut(&[f64]) -> u32,
    ) -> Result<TokenSequence> {
        self.check_tokens(prompt)?;
        if prompt.len() + max_new > self.config.max_seq_len {
            return Err(Error::WindowOverflow {
                len: prompt.len() + max_new,
                max: self.config.max_seq_len,
            });
        }
        let mut ids = prompt.ids().to_vec();
        if max_new == 0 {
            return Ok(TokenSequence::from_ids_unchecked(ids));
        }
        let mut state = DecodeState::new(self);
        let mut logits = Vec::new();
        for (pos, &id) in prompt.ids().iter().enumerate() {
            logits = state.step(self, id, pos, pos + 1 == prompt.len())?;
        }
        let mut newlines = 0;
        for _ in 0..max_new {
            let next = choose(&logits);
            ids.push(next);
            if next == u32::from(b'\n') {
                newlines += 1;
                if let StopRule::Lines(n) = stop {
                    if newlines >= n {
                        break;
                    }
                }
            }
            if ids.len() >= prompt.len() + max_new {
                break;
            }
            logits = state.step(self, next, ids.len() - 1, true)?;
        }
        Ok(TokenSequence::from_ids_unchecked(ids))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (c, hash) = Container::load(path)?;
        Ok((Self::from_container(c, path)?, hash))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub(crate) fn to_container(&self) -> Container {
        let c = &self.config;
        let meta = vec![
            ("vocab_size".into(), c.vocab_size.to_string()),
            ("d_model".into(), c.d_model.to_string()),
            ("n_layers".into(), c.n_layers.to_string()),
            ("max_seq_len".into(), c.max_seq_len.to_string()),
            ("mlp_hidden".into(), c.mlp_hidden.to_string()),
        ];
        let mut tensors = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (l, w) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSOR_NAMES.iter().zip(w.tensors()) {
                tensors.push((format!("layer{l}.{name}"), t.clone()));
            }
        }
        tensors.push(("lnf_gain".into(), self.lnf_gain.clone()));
        tensors.push(("lnf_bias".into(), self.lnf_bias.clone()));
        Container {
            magic: MODEL_MAGIC,
            version: MODEL_VERSION,
            meta,
            tensors,
        }
    }

    fn from_container(mut c: Container, path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if c.magic != MODEL_MAGIC {
            return Err(corrupt("not a model checkpoint (bad magic)".into()));
        }
        if c.version != MODEL_VERSION {
            return Err(corrupt(format!("unsupported model checkpoint version {}", c.version)));
        }
        let field = |c: &Container, k: &str| -> Result<usize> {
            c.meta_value(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| corrupt(format!("missing or invalid header field {k}")))
        };
        let config = ModelConfig {
            vocab_size: field(&c, "vocab_size")?,
            d_model: field(&c, "d_model")?,
            n_layers: field(&c, "n_layers")?,
            max_seq_len: field(&c, "max_seq_len")?,
            mlp_hidden: field(&c, "mlp_hidden")?,
        };
        config.validate()?;
        // Shapes come from a freshly initialised model of the same config.
        let mut model = Transformer::init(config, Seed(0))?;
        let mut take = |name: &str, target: &mut Matrix| -> Result<()> {
            let t = c.take_tensor(name).map_err(|_| corrupt(format!("missing tensor {name}")))?;
            if t.shape() != target.shape() {
                return Err(corrupt(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    target.shape()
                )));
            }
            *target = t;
            Ok(())
        };
        take("tok_emb", &mut model.tok_emb)?;
        take("pos_emb", &mut model.pos_emb)?;
        for l in 0..config.n_layers {
            for (name, t) in LAYER_TENSOR_NAMES.iter().zip(model.layers[l].tensors_mut()) {
                take(&format!("layer{l}.{name}"), t)?;
            }
        }
        take("lnf_gain", &mut model.lnf_gain)?;
        take("lnf_bias", &mut model.lnf_bias)?;
        if !c.tensors.is_empty() {
            return Err(corrupt(format!("unexpected tensor {}", c.tensors[0].0)));
        }
        Ok(model)
    }

    /// Flat parameter list in a fixed order (used by pretraining).
    pub(crate) fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for w in &self.layers {
            out.extend(w.tensors());
        }
        out.push(&self.lnf_gain);
        out.push(&self.lnf_bias);
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for w in &mut self.layers {
            out.extend(w.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }
}

/// Lowest-id argmax over byte tokens; specials are never emitted.
fn argmax_bytes(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &l) in logits[..BYTE_VOCAB].iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Incremental decoding state. Each step performs exactly the row computations
/// of a full forward pass, so results are bit-identical to re-running `forward`.
struct DecodeState {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl DecodeState {
    fn new(model: &Transformer) -> Self {
        let d = model.config.d_model;
        Self {
            keys: (0..model.layers.len()).map(|_| Matrix::zeros(0, d)).collect(),
            values: (0..model.layers.len()).map(|_| Matrix::zeros(0, d)).collect(),
        }
    }

    fn step(&mut self, model: &Transformer, id: u32, pos: usize, want_logits: bool) -> Result<Vec<f64>> {
        let d = model.config.d_model;
        let scale = (d as f64).sqrt();
        let mut h: Vec<f64> = model
            .tok_emb
            .row(id as usize)
            .iter()
            .zip(model.pos_emb.row(pos))
            .map(|(a, b)| a + b)
            .collect();
        let mut xhat = vec![0.0; d];
        let mut x = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut attn = vec![0.0; d];
        let mut o = vec![0.0; d];
        let mut probs = Vec::new();
        for (l, w) in model.layers.iter().enumerate() {
            layer_norm_row(&h, w.ln1_gain.data(), w.ln1_bias.data(), &mut xhat, &mut x);
            row_times_matrix(&x, &w.w_q, &mut q);
            row_times_matrix(&x, &w.w_k, &mut k);
            row_times_matrix(&x, &w.w_v, &mut v);
            self.keys[l].push_row(&k)?;
            self.values[l].push_row(&v)?;
            let visible = self.keys[l].rows();
            attend_row(&q, &self.keys[l], &self.values[l], visible, scale, &mut probs, &mut attn);
            row_times_matrix(&attn, &w.w_o, &mut o);
            let mid: Vec<f64> = h.iter().zip(&o).map(|(a, b)| a + b).collect();
            let mut y = vec![0.0; d];
            layer_norm_row(&mid, w.ln2_gain.data(), w.ln2_bias.data(), &mut xhat, &mut y);
            let mut pre = vec![0.0; w.w_up.cols()];
            row_times_matrix(&y, &w.w_up, &mut pre);
            for (p, b) in pre.iter_mut().zip(w.b_up.data()) {
                *p += b;
            }
            let act: Vec<f64> = pre.iter().map(|&p| gelu(p)).collect();
            let mut mlp = vec![0.0; d];
            row_times_matrix(&act, &w.w_down, &mut mlp);
            for (m, b) in mlp.iter_mut().zip(w.b_down.data()) {
                *m += b;
            }
            h = mid.iter().zip(&mlp).map(|(a, b)| a + b).collect();
        }
        if !want_logits {
            return Ok(Vec::new());
        }
        let mut z = vec![0.0; d];
        layer_norm_row(&h, model.lnf_gain.data(), model.lnf_bias.data(), &mut xhat, &mut z);
        Ok((0..model.config.vocab_size)
            .map(|t| dot(&z, model.tok_emb.row(t)))
            .collect())
    }
}

#[cfg(test)]
mod tests;
