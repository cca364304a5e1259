//! Information-need expression: low-rank retrieval projections on every
//! layer's Q/K/V, a parallel last-token attention per layer, and mean pooling
//! of the per-layer outputs into one retrieval vector.
//!
//! The branch only reads the frozen model's trace. Nothing it computes is fed
//! back into the generation path, so logits are unaffected by any adapter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::model::{
    tokenize, tokenize_candidate, ForwardTrace, LayerTrace, ModelConfig, Projection, ProjectionDelta,
    TokenSequence, Transformer, BOS, CANDIDATE_PREFIX,
};
use crate::tensor::{dot, seeded_init, softmax_in_place, InitScheme, Matrix, Seed};

const ADAPTER_MAGIC: [u8; 8] = *b"SRGADPT\0";
const ADAPTER_VERSION: u32 = 1;

pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_ALPHA: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    /// The code being completed; embedded as-is.
    Context,
    /// A retrieval candidate; gets the candidate prefix token after BOS.
    Candidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRepresentation {
    pub vector: Vec<f64>,
    pub kind: EmbedKind,
}

impl RetrievalRepresentation {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Raw inner product, the similarity used everywhere in retrieval.
    pub fn score(&self, other: &RetrievalRepresentation) -> f64 {
        dot(&self.vector, &other.vector)
    }
}

/// One low-rank pair `(A, B)`, both `d × rank`; the delta is `α·h·A·Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair {
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    rank: usize,
    alpha: f64,
    d_model: usize,
    /// `pairs[layer][projection.index()]`.
    pairs: Vec<[LowRankPair; 3]>,
}

pub fn init_adapters(config: &ModelConfig, rank: usize, alpha: f64, seed: Seed) -> Result<AdapterSet> {
    let d = config.d_model;
    if rank == 0 {
        return Err(Error::InvalidArgument("adapter rank must be at least 1".into()));
    }
    if rank > d / 2 {
        return Err(Error::InvalidArgument(format!(
            "adapter rank {rank} exceeds d_model/2 = {}",
            d / 2
        )));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let mut pairs = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let make = |p: Projection| -> Result<LowRankPair> {
            let tag = (l * 3 + p.index()) as u64;
            Ok(LowRankPair {
                a: seeded_init(d, rank, seed.derive(tag), InitScheme::UniformScaled)?,
                b: seeded_init(d, rank, seed.derive(tag), InitScheme::Zeros)?,
            })
        };
        pairs.push([make(Projection::Query)?, make(Projection::Key)?, make(Projection::Value)?]);
    }
    Ok(AdapterSet {
        rank,
        alpha,
        d_model: d,
        pairs,
    })
}

impl AdapterSet {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair(&self, layer: usize, proj: Projection) -> &LowRankPair {
        &self.pairs[layer][proj.index()]
    }

    /// All matrices in a fixed order: per layer, per projection, A then B.
    pub fn matrices(&self) -> Vec<&Matrix> {
        self.pairs
            .iter()
            .flat_map(|l| l.iter().flat_map(|p| [&p.a, &p.b]))
            .collect()
    }

    pub(crate) fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.pairs
            .iter_mut()
            .flat_map(|l| l.iter_mut().flat_map(|p| [&mut p.a, &mut p.b]))
            .collect()
    }

    /// Copy with every `B` redrawn uniformly, so the deltas are nonzero.
    pub fn with_random_b(&self, seed: Seed) -> Result<Self> {
        let mut out = self.clone();
        for (i, m) in out.matrices_mut().into_iter().enumerate() {
            if i % 2 == 1 {
                *m = seeded_init(m.rows(), m.cols(), seed.derive(i as u64), InitScheme::UniformScaled)?;
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }

    pub fn check_compatible(&self, model: &Transformer) -> Result<()> {
        if self.d_model != model.d_model() || self.pairs.len() != model.n_layers() {
            return Err(Error::Config(format!(
                "adapters (d={}, L={}) do not fit model (d={}, L={})",
                self.d_model,
                self.pairs.len(),
                model.d_model(),
                model.n_layers()
            )));
        }
        Ok(())
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

    fn to_container(&self) -> Container {
        let mut tensors = Vec::new();
        for (l, layer) in self.pairs.iter().enumerate() {
            for (p, pair) in Projection::ALL.iter().zip(layer) {
                let tag = proj_tag(*p);
                tensors.push((format!("layer{l}.{tag}.a"), pair.a.clone()));
                tensors.push((format!("layer{l}.{tag}.b"), pair.b.clone()));
            }
        }
        Container {
            magic: ADAPTER_MAGIC,
            version: ADAPTER_VERSION,
            meta: vec![
                ("rank".into(), self.rank.to_string()),
                // Rust's shortest float formatting round-trips exactly.
                ("alpha".into(), format!("{:?}", self.alpha)),
                ("n_layers".into(), self.pairs.len().to_string()),
                ("d_model".into(), self.d_model.to_string()),
            ],
            tensors,
        }
    }

    fn from_container(mut c: Container, path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if c.magic != ADAPTER_MAGIC {
            return Err(corrupt("not an adapter checkpoint (bad magic)".into()));
        }
        if c.version != ADAPTER_VERSION {
            return Err(corrupt(format!("unsupported adapter checkpoint version {}", c.version)));
        }
        let int = |c: &Container, k: &str| -> Result<usize> {
            c.meta_value(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| corrupt(format!("missing or invalid header field {k}")))
        };
        let rank = int(&c, "rank")?;
        let n_layers = int(&c, "n_layers")?;
        let d_model = int(&c, "d_model")?;
        let alpha: f64 = c
            .meta_value("alpha")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("missing or invalid header field alpha".into()))?;
        let mut pairs = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut take = |p: Projection| -> Result<LowRankPair> {
                let tag = proj_tag(p);
                let mut get = |which: &str| -> Result<Matrix> {
                    let name = format!("layer{l}.{tag}.{which}");
                    let m = c.take_tensor(&name).map_err(|_| corrupt(format!("missing tensor {name}")))?;
                    if m.shape() != (d_model, rank) {
                        return Err(corrupt(format!(
                            "tensor {name} has shape {:?}, expected {:?}",
                            m.shape(),
                            (d_model, rank)
                        )));
                    }
                    Ok(m)
                };
                Ok(LowRankPair {
                    a: get("a")?,
                    b: get("b")?,
                })
            };
            pairs.push([take(Projection::Query)?, take(Projection::Key)?, take(Projection::Value)?]);
        }
        Ok(Self {
            rank,
            alpha,
            d_model,
            pairs,
        })
    }
}

fn proj_tag(p: Projection) -> &'static str {
    match p {
        Projection::Query => "q",
        Projection::Key => "k",
        Projection::Value => "v",
    }
}

/// `x_base + α·h·A·Bᵀ`. `x_base` is reused from the forward trace.
pub fn llora_project(x_base: &Matrix, h: &Matrix, a: &Matrix, b: &Matrix, alpha: f64) -> Result<Matrix> {
    if h.rows() != x_base.rows() || h.cols() != a.rows() || a.shape() != b.shape() || b.rows() != x_base.cols() {
        return Err(Error::ShapeMismatch {
            op: "llora_project",
            left: x_base.shape(),
            right: h.shape(),
        });
    }
    let low = h.matmul(a)?;
    let mut out = x_base.clone();
    out.add_scaled_assign(&low.matmul_t(b)?, alpha)?;
    Ok(out)
}

/// Softmax attention of the last token's retrieval query over every position.
pub fn retrieval_attention(q_last: &[f64], k_ret: &Matrix, v_ret: &Matrix) -> Result<Vec<f64>> {
    Ok(retrieval_attention_with_probs(q_last, k_ret, v_ret)?.0)
}

pub(crate) fn retrieval_attention_with_probs(
    q_last: &[f64],
    k_ret: &Matrix,
    v_ret: &Matrix,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if q_last.len() != k_ret.cols() || k_ret.rows() != v_ret.rows() || k_ret.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "retrieval_attention",
            left: (1, q_last.len()),
            right: k_ret.shape(),
        });
    }
    let scale = (q_last.len() as f64).sqrt();
    let mut probs: Vec<f64> = (0..k_ret.rows()).map(|j| dot(q_last, k_ret.row(j)) / scale).collect();
    softmax_in_place(&mut probs);
    let mut out = vec![0.0; v_ret.cols()];
    for (j, &p) in probs.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(v_ret.row(j)) {
            *o += p * v;
        }
    }
    Ok((out, probs))
}

/// `r = (1/L)·Σ r^(l)`.
pub fn mean_pool(per_layer: &[Vec<f64>]) -> Vec<f64> {
    let n = per_layer.len() as f64;
    let d = per_layer.first().map_or(0, Vec::len);
    let mut out = vec![0.0; d];
    for r in per_layer {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Retrieval-branch intermediates for one layer, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct BranchLayer {
    /// Adapter input `h` (the attention input recorded in the trace).
    pub input: Matrix,
    /// `h·A_X` for X = Q (last row only), K, V.
    pub low: [Matrix; 3],
    pub q_last: Vec<f64>,
    pub k_ret: Matrix,
    pub v_ret: Matrix,
    pub probs: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BranchPass {
    pub layers: Vec<BranchLayer>,
    pub pooled: Vec<f64>,
}

/// Runs the parallel retrieval attention on top of an existing trace.
pub fn retrieval_branch(adapters: &AdapterSet, trace: &[LayerTrace]) -> Result<BranchPass> {
    if trace.len() != adapters.n_layers() {
        return Err(Error::Config(format!(
            "trace has {} layers, adapters {}",
            trace.len(),
            adapters.n_layers()
        )));
    }
    let alpha = adapters.alpha;
    let mut layers = Vec::with_capacity(trace.len());
    for (l, t) in trace.iter().enumerate() {
        let last = t.attn_input.rows() - 1;
        let h_last = t.attn_input.slice_rows(last, last + 1);
        let q_base_last = t.q.slice_rows(last, last + 1);
        let pq = adapters.pair(l, Projection::Query);
        let pk = adapters.pair(l, Projection::Key);
        let pv = adapters.pair(l, Projection::Value);
        let q_ret = llora_project(&q_base_last, &h_last, &pq.a, &pq.b, alpha)?;
        let k_ret = llora_project(&t.k, &t.attn_input, &pk.a, &pk.b, alpha)?;
        let v_ret = llora_project(&t.v, &t.attn_input, &pv.a, &pv.b, alpha)?;
        let (output, probs) = retrieval_attention_with_probs(q_ret.row(0), &k_ret, &v_ret)?;
        layers.push(BranchLayer {
            low: [h_last.matmul(&pq.a)?, t.attn_input.matmul(&pk.a)?, t.attn_input.matmul(&pv.a)?],
            input: t.attn_input.clone(),
            q_last: q_ret.into_data(),
            k_ret,
            v_ret,
            probs,
            output,
        });
    }
    let per_layer: Vec<Vec<f64>> = layers.iter().map(|l| l.output.clone()).collect();
    Ok(BranchPass {
        pooled: mean_pool(&per_layer),
        layers,
    })
}

/// Insert the candidate prefix after BOS when embedding a candidate.
pub fn prepare_tokens(tokens: &TokenSequence, kind: EmbedKind, model: &Transformer) -> Result<TokenSequence> {
    match kind {
        EmbedKind::Context => Ok(tokens.clone()),
        EmbedKind::Candidate => {
            let ids = tokens.ids();
            let body = if ids.first() == Some(&BOS) { &ids[1..] } else { ids };
            let mut out = Vec::with_capacity(body.len() + 2);
            out.push(BOS);
            out.push(CANDIDATE_PREFIX);
            out.extend_from_slice(body);
            TokenSequence::new(out, model.config().vocab_size, model.config().max_seq_len)
        }
    }
}

pub fn embed_pass(
    model: &Transformer,
    adapters: &AdapterSet,
    tokens: &TokenSequence,
    kind: EmbedKind,
) -> Result<BranchPass> {
    adapters.check_compatible(model)?;
    let prepared = prepare_tokens(tokens, kind, model)?;
    let trace = model.forward_layers(&prepared)?;
    retrieval_branch(adapters, &trace)
}

pub fn embed(
    model: &Transformer,
    adapters: &AdapterSet,
    tokens: &TokenSequence,
    kind: EmbedKind,
) -> Result<RetrievalRepresentation> {
    Ok(RetrievalRepresentation {
        vector: embed_pass(model, adapters, tokens, kind)?.pooled,
        kind,
    })
}

/// Tokens for embedding `text` as `kind`. Text that does not fit the window
/// keeps its trailing bytes, where the information need sits.
pub fn text_tokens(model: &Transformer, text: &[u8], kind: EmbedKind) -> Result<TokenSequence> {
    let max = model.config().max_seq_len;
    let specials = match kind {
        EmbedKind::Context => 1,
        EmbedKind::Candidate => 2,
    };
    let body = &text[text.len().saturating_sub(max.saturating_sub(specials))..];
    match kind {
        EmbedKind::Context => tokenize(body, max),
        EmbedKind::Candidate => tokenize_candidate(body, max),
    }
}

pub fn embed_text_pass(model: &Transformer, adapters: &AdapterSet, text: &[u8], kind: EmbedKind) -> Result<BranchPass> {
    adapters.check_compatible(model)?;
    let tokens = text_tokens(model, text, kind)?;
    retrieval_branch(adapters, &model.forward_layers(&tokens)?)
}

/// Embeds raw text (BOS, and the prefix for candidates, are added here).
pub fn embed_text(
    model: &Transformer,
    adapters: &AdapterSet,
    text: &[u8],
    kind: EmbedKind,
) -> Result<RetrievalRepresentation> {
    Ok(RetrievalRepresentation {
        vector: embed_text_pass(model, adapters, text, kind)?.pooled,
        kind,
    })
}

/// Forward pass plus the retrieval branch. The trace is exactly the one the
/// adapter-free model produces; the representation rides alongside.
pub fn forward_with_retrieval(
    model: &Transformer,
    adapters: &AdapterSet,
    tokens: &TokenSequence,
) -> Result<(ForwardTrace, RetrievalRepresentation)> {
    adapters.check_compatible(model)?;
    let trace = model.forward(tokens)?;
    let pass = retrieval_branch(adapters, &trace.layers)?;
    Ok((
        trace,
        RetrievalRepresentation {
            vector: pass.pooled,
            kind: EmbedKind::Context,
        },
    ))
}

impl ProjectionDelta for AdapterSet {
    fn delta(&self, layer: usize, proj: Projection, attn_input: &Matrix) -> Result<Matrix> {
        let p = self.pair(layer, proj);
        Ok(attn_input.matmul(&p.a)?.matmul_t(&p.b)?.scale(self.alpha))
    }
}

/// Contrast mode: the same low-rank deltas applied inside the generation
/// self-attention, which shifts every downstream hidden state.
pub fn vanilla_lora_forward(
    model: &Transformer,
    adapters: &AdapterSet,
    tokens: &TokenSequence,
) -> Result<ForwardTrace> {
    adapters.check_compatible(model)?;
    model.forward_with_delta(tokens, adapters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PROJECT_CALLS;
    use rand::Rng;

    fn config(d: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: crate::model::MIN_VOCAB,
            d_model: d,
            n_layers: layers,
            max_seq_len: 64,
            mlp_hidden: 2 * d,
        }
    }

    fn random_tokens(seed: u64, len: usize) -> TokenSequence {
        let mut rng = Seed(seed).rng();
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen_range(32u8..127)).collect();
        tokenize(&bytes, 64).unwrap()
    }

    fn randomise_b(adapters: &mut AdapterSet, seed: u64) {
        for (i, m) in adapters.matrices_mut().into_iter().enumerate() {
            if i % 2 == 1 {
                *m = seeded_init(m.rows(), m.cols(), Seed(seed).derive(i as u64), InitScheme::UniformScaled).unwrap();
            }
        }
    }

    #[test]
    fn init_shapes_and_defaults() {
        let a = init_adapters(&config(64, 2), DEFAULT_RANK, DEFAULT_ALPHA, Seed(1)).unwrap();
        assert_eq!(a.matrices().len(), 3 * 2 * 2);
        for m in a.matrices() {
            assert_eq!(m.shape(), (64, 16));
        }
        assert_eq!(a, init_adapters(&config(64, 2), 16, 32.0, Seed(1)).unwrap());
        assert!(init_adapters(&config(64, 2), 33, 32.0, Seed(1)).is_err());
        assert!(init_adapters(&config(64, 2), 0, 32.0, Seed(1)).is_err());
        assert!(init_adapters(&config(64, 2), 4, 0.0, Seed(1)).is_err());
    }

    #[test]
    fn llora_project_examples() {
        let x = seeded_init(5, 8, Seed(1), InitScheme::UniformScaled).unwrap();
        let h = seeded_init(5, 8, Seed(2), InitScheme::UniformScaled).unwrap();
        let a = seeded_init(8, 2, Seed(3), InitScheme::UniformScaled).unwrap();
        let b = seeded_init(8, 2, Seed(4), InitScheme::UniformScaled).unwrap();
        assert_eq!(llora_project(&x, &h, &a, &Matrix::zeros(8, 2), 3.0).unwrap(), x);
        assert_eq!(llora_project(&x, &h, &a, &b, 0.0).unwrap(), x);

        // rank 1 with unit vectors: delta = α (h·a) ⊗ b.
        let mut ua = Matrix::zeros(8, 1);
        ua.set(2, 0, 1.0);
        let mut ub = Matrix::zeros(8, 1);
        ub.set(5, 0, 1.0);
        let out = llora_project(&x, &h, &ua, &ub, 2.5).unwrap();
        for i in 0..5 {
            for j in 0..8 {
                let expected = x.get(i, j) + 2.5 * h.get(i, 2) * ub.get(j, 0);
                assert!((out.get(i, j) - expected).abs() < 1e-12);
            }
        }
        assert!(llora_project(&x, &h.slice_rows(0, 4), &a, &b, 1.0).is_err());
    }

    #[test]
    fn retrieval_attention_examples() {
        let k = seeded_init(1, 6, Seed(1), InitScheme::UniformScaled).unwrap();
        let v = seeded_init(1, 6, Seed(2), InitScheme::UniformScaled).unwrap();
        let out = retrieval_attention(&[0.3; 6], &k, &v).unwrap();
        assert_eq!(out, v.row(0));

        let k = seeded_init(4, 6, Seed(3), InitScheme::UniformScaled).unwrap();
        let v = seeded_init(4, 6, Seed(4), InitScheme::UniformScaled).unwrap();
        let out = retrieval_attention(&[0.0; 6], &k, &v).unwrap();
        for c in 0..6 {
            let mean = (0..4).map(|j| v.get(j, c)).sum::<f64>() / 4.0;
            assert!((out[c] - mean).abs() < 1e-12);
        }

        // Naive oracle on a random length-5 case.
        let q: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let k = seeded_init(5, 6, Seed(5), InitScheme::UniformScaled).unwrap().scale(4.0);
        let v = seeded_init(5, 6, Seed(6), InitScheme::UniformScaled).unwrap();
        let scores: Vec<f64> = (0..5).map(|j| (0..6).map(|c| q[c] * k.get(j, c)).sum::<f64>() / 6f64.sqrt()).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let out = retrieval_attention(&q, &k, &v).unwrap();
        for c in 0..6 {
            let expected: f64 = (0..5).map(|j| scores[j].exp() / z * v.get(j, c)).sum();
            assert!((out[c] - expected).abs() < 1e-12);
        }
        assert!(retrieval_attention(&[0.0; 5], &k, &v).is_err());
    }

    #[test]
    fn zero_adapters_reduce_to_base_projections() {
        let model = Transformer::init(config(16, 2), Seed(2)).unwrap();
        let adapters = init_adapters(model.config(), 2, 32.0, Seed(3)).unwrap();
        let toks = random_tokens(1, 12);
        let r = embed(&model, &adapters, &toks, EmbedKind::Context).unwrap();
        let trace = model.forward(&toks).unwrap();
        let per_layer: Vec<Vec<f64>> = trace
            .layers
            .iter()
            .map(|t| {
                let last = t.q.rows() - 1;
                retrieval_attention(t.q.row(last), &t.k, &t.v).unwrap()
            })
            .collect();
        assert_eq!(r.vector, mean_pool(&per_layer));
        assert_eq!(r.dim(), 16);
    }

    #[test]
    fn pooling_identities() {
        let model = Transformer::init(config(16, 1), Seed(2)).unwrap();
        let mut adapters = init_adapters(model.config(), 2, 4.0, Seed(3)).unwrap();
        randomise_b(&mut adapters, 9);
        let pass = embed_pass(&model, &adapters, &random_tokens(2, 10), EmbedKind::Candidate).unwrap();
        assert_eq!(pass.pooled, pass.layers[0].output);

        let mut r1 = vec![0.0; 6];
        r1[0] = 1.0;
        let mut r2 = vec![0.0; 6];
        r2[1] = 1.0;
        assert_eq!(mean_pool(&[r1, r2]), vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);

        let model = Transformer::init(config(16, 3), Seed(4)).unwrap();
        let mut adapters = init_adapters(model.config(), 4, 8.0, Seed(5)).unwrap();
        randomise_b(&mut adapters, 10);
        let pass = embed_pass(&model, &adapters, &random_tokens(3, 10), EmbedKind::Context).unwrap();
        let layers: Vec<Vec<f64>> = pass.layers.iter().map(|l| l.output.clone()).collect();
        assert_eq!(pass.pooled, mean_pool(&layers));
    }

    #[test]
    fn candidate_prefix_changes_representation() {
        let model = Transformer::init(config(16, 2), Seed(2)).unwrap();
        let adapters = init_adapters(model.config(), 2, 32.0, Seed(3)).unwrap();
        let toks = random_tokens(4, 10);
        let ctx = embed(&model, &adapters, &toks, EmbedKind::Context).unwrap();
        let cand = embed(&model, &adapters, &toks, EmbedKind::Candidate).unwrap();
        assert_ne!(ctx.vector, cand.vector);
        let text = toks.bytes_from(1);
        assert_eq!(embed_text(&model, &adapters, &text, EmbedKind::Candidate).unwrap(), cand);
        assert_eq!(embed_text(&model, &adapters, &text, EmbedKind::Context).unwrap(), ctx);
    }

    #[test]
    fn embedding_reuses_base_projections() {
        let model = Transformer::init(config(16, 2), Seed(2)).unwrap();
        let mut adapters = init_adapters(model.config(), 2, 32.0, Seed(3)).unwrap();
        randomise_b(&mut adapters, 4);
        PROJECT_CALLS.with(|c| c.set(0));
        embed(&model, &adapters, &random_tokens(5, 10), EmbedKind::Context).unwrap();
        // Three base projections per layer, computed once by the forward pass.
        assert_eq!(PROJECT_CALLS.with(|c| c.get()), 3 * 2);
    }

    #[test]
    fn parallel_branch_never_touches_logits() {
        for seed in 0..100u64 {
            let model = Transformer::init(config(16, 2), Seed(seed)).unwrap();
            let mut adapters = init_adapters(model.config(), 2, 32.0, Seed(seed + 1000)).unwrap();
            randomise_b(&mut adapters, seed + 2000);
            let toks = random_tokens(seed, 1 + (seed as usize % 20));
            let base = model.forward(&toks).unwrap();
            let (attached, _) = forward_with_retrieval(&model, &adapters, &toks).unwrap();
            assert_eq!(base, attached);
        }
    }

    #[test]
    fn vanilla_mode_contrast() {
        let model = Transformer::init(config(16, 2), Seed(7)).unwrap();
        let toks = random_tokens(6, 12);
        let base = model.forward(&toks).unwrap();
        let zero = init_adapters(model.config(), 2, 32.0, Seed(1)).unwrap();
        assert_eq!(vanilla_lora_forward(&model, &zero, &toks).unwrap(), base);
        let mut nonzero = zero.clone();
        randomise_b(&mut nonzero, 3);
        let shifted = vanilla_lora_forward(&model, &nonzero, &toks).unwrap();
        assert!(shifted.logits.max_abs_diff(&base.logits) > 0.0);
        let (parallel, _) = forward_with_retrieval(&model, &nonzero, &toks).unwrap();
        assert_eq!(parallel.logits, base.logits);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapters.bin");
        let mut adapters = init_adapters(&config(16, 2), 3, 32.0, Seed(1)).unwrap();
        randomise_b(&mut adapters, 5);
        let h1 = adapters.save(&path).unwrap();
        let (loaded, h2) = AdapterSet::load(&path).unwrap();
        assert_eq!(loaded, adapters);
        assert_eq!(h1, h2);
        assert_eq!(loaded.alpha().to_bits(), adapters.alpha().to_bits());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..100]).unwrap();
        assert!(matches!(AdapterSet::load(&path), Err(Error::Corrupt { .. })));
        std::fs::write(&path, b"SRGMODL\0garbage").unwrap();
        assert!(AdapterSet::load(&path).is_err());
    }
}
