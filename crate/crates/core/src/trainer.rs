//! Contrastive training of the adapter matrices. The base model is borrowed
//! immutably throughout; gradients exist only for `A` and `B`.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    embed_text_pass, retrieval_branch, text_tokens, AdapterSet, BranchPass, EmbedKind, RetrievalRepresentation,
};
use crate::corpus::TrainingPair;
use crate::error::{Error, Result};
use crate::model::{LayerTrace, Projection, Transformer};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{dot, log_sum_exp, Matrix, Seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Consecutive fragments, in-batch negatives only.
    One,
    /// Synthesized positives plus explicit and in-batch negatives.
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    /// Decay the learning rate linearly to zero over `steps`.
    pub linear_decay: bool,
    pub seed: Seed,
    pub stage: Stage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            steps: 500,
            optimizer: OptimizerKind::default(),
            linear_decay: false,
            seed: Seed(0),
            stage: Stage::One,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::One && self.batch_size < 2 {
            return Err(Error::Config("stage 1 needs batch_size >= 2 for in-batch negatives".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// `-log(e^{s(q,p)} / (e^{s(q,p)} + Σ e^{s(q,n)}))` with `s` the inner product.
pub fn contrastive_loss(
    r_q: &RetrievalRepresentation,
    r_p: &RetrievalRepresentation,
    negatives: &[RetrievalRepresentation],
) -> Result<f64> {
    let d = r_q.dim();
    for r in std::iter::once(r_p).chain(negatives) {
        if r.dim() != d {
            return Err(Error::ShapeMismatch {
                op: "contrastive_loss",
                left: (1, d),
                right: (1, r.dim()),
            });
        }
    }
    let pos = r_q.score(r_p);
    let mut scores = vec![pos];
    scores.extend(negatives.iter().map(|n| r_q.score(n)));
    Ok(log_sum_exp(&scores) - pos)
}

/// Gradients in the layout of `AdapterSet::matrices`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    n_layers: usize,
    grads: Vec<Matrix>,
}

impl AdapterGradients {
    pub fn zeros_like(adapters: &AdapterSet) -> Self {
        Self {
            n_layers: adapters.n_layers(),
            grads: adapters.matrices().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }

    pub fn a(&self, layer: usize, proj: Projection) -> &Matrix {
        &self.grads[(layer * 3 + proj.index()) * 2]
    }

    pub fn b(&self, layer: usize, proj: Projection) -> &Matrix {
        &self.grads[(layer * 3 + proj.index()) * 2 + 1]
    }

    fn ab_mut(&mut self, layer: usize, proj: Projection) -> (&mut Matrix, &mut Matrix) {
        let i = (layer * 3 + proj.index()) * 2;
        let (lo, hi) = self.grads.split_at_mut(i + 1);
        (&mut lo[i], &mut hi[0])
    }

    pub fn matrices(&self) -> &[Matrix] {
        &self.grads
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }
}

/// Adds `∂L/∂(A,B)` given `∂L/∂r` for one embedded sequence.
fn branch_backward(adapters: &AdapterSet, pass: &BranchPass, grad_r: &[f64], out: &mut AdapterGradients) {
    let n_layers = pass.layers.len() as f64;
    let alpha = adapters.alpha();
    for (l, layer) in pass.layers.iter().enumerate() {
        let g: Vec<f64> = grad_r.iter().map(|v| v / n_layers).collect();
        let t_len = layer.k_ret.rows();
        let d = layer.k_ret.cols();
        let scale = (d as f64).sqrt();
        let a = &layer.probs;

        let mut d_v = Matrix::zeros(t_len, d);
        let da: Vec<f64> = (0..t_len).map(|j| dot(&g, layer.v_ret.row(j))).collect();
        let mean_da = dot(a, &da);
        let mut d_q = vec![0.0; d];
        let mut d_k = Matrix::zeros(t_len, d);
        for j in 0..t_len {
            for (o, gv) in d_v.row_mut(j).iter_mut().zip(&g) {
                *o = a[j] * gv;
            }
            let ds = a[j] * (da[j] - mean_da) / scale;
            for (o, kv) in d_q.iter_mut().zip(layer.k_ret.row(j)) {
                *o += ds * kv;
            }
            for (o, qv) in d_k.row_mut(j).iter_mut().zip(&layer.q_last) {
                *o = ds * qv;
            }
        }
        let last = layer.input.rows() - 1;
        let h_last = layer.input.slice_rows(last, last + 1);
        let d_q = Matrix::row_vector(&d_q);
        for (proj, d_x, h) in [
            (Projection::Query, &d_q, &h_last),
            (Projection::Key, &d_k, &layer.input),
            (Projection::Value, &d_v, &layer.input),
        ] {
            let pair = adapters.pair(l, proj);
            let low = &layer.low[proj.index()];
            let (ga, gb) = out.ab_mut(l, proj);
            gb.add_scaled_assign(&d_x.t_matmul(low).expect("shapes"), alpha).expect("shapes");
            let d_low = d_x.matmul(&pair.b).expect("shapes").scale(alpha);
            ga.add_assign(&h.t_matmul(&d_low).expect("shapes")).expect("shapes");
        }
    }
}

struct BatchPlan<'a> {
    /// Texts to embed, with their kind; queries first, then positives, then
    /// every pair's explicit negatives.
    items: Vec<(&'a str, EmbedKind)>,
    n_pairs: usize,
    /// Per pair, the index range of its explicit negatives inside `items`.
    negatives: Vec<std::ops::Range<usize>>,
}

fn plan<'a>(batch: &'a [TrainingPair], stage: Stage) -> Result<BatchPlan<'a>> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    if stage == Stage::One {
        if batch.len() < 2 {
            return Err(Error::Config("stage 1 needs at least two pairs per batch".into()));
        }
        if let Some(p) = batch.iter().find(|p| !p.explicit_negatives.is_empty()) {
            return Err(Error::Config(format!("stage-1 pair {} carries explicit negatives", p.id())));
        }
    }
    let n = batch.len();
    let mut items: Vec<(&str, EmbedKind)> = batch.iter().map(|p| (p.query.text.as_str(), EmbedKind::Context)).collect();
    items.extend(batch.iter().map(|p| (p.positive.text(), EmbedKind::Candidate)));
    let mut negatives = Vec::with_capacity(n);
    for p in batch {
        let start = items.len();
        items.extend(p.explicit_negatives.iter().map(|t| (t.as_str(), EmbedKind::Candidate)));
        negatives.push(start..items.len());
    }
    Ok(BatchPlan {
        items,
        n_pairs: n,
        negatives,
    })
}

fn base_traces(model: &Transformer, text: &str, kind: EmbedKind) -> Result<Vec<LayerTrace>> {
    let tokens = text_tokens(model, text.as_bytes(), kind)?;
    Ok(model
        .forward_layers(&tokens)?
        .into_iter()
        .map(|t| LayerTrace {
            block_input: Matrix::zeros(0, 0),
            ..t
        })
        .collect())
}

/// Base-model traces of every text a training run embeds. The adapters never
/// touch the residual stream, so these stay valid across steps.
struct TraceCache<'a> {
    traces: HashMap<(&'a str, EmbedKind), Vec<LayerTrace>>,
}

impl<'a> TraceCache<'a> {
    fn build(model: &Transformer, pairs: &'a [TrainingPair], stage: Stage) -> Result<Self> {
        let mut keys = plan(pairs, stage)?.items;
        keys.sort_unstable_by(|a, b| (a.0, a.1 as u8).cmp(&(b.0, b.1 as u8)));
        keys.dedup();
        let traces: Vec<Vec<LayerTrace>> = keys
            .par_iter()
            .map(|(text, kind)| base_traces(model, text, *kind))
            .collect::<Result<_>>()?;
        Ok(Self {
            traces: keys.into_iter().zip(traces).collect(),
        })
    }
}

fn embed_all(
    model: &Transformer,
    adapters: &AdapterSet,
    items: &[(&str, EmbedKind)],
    cache: Option<&TraceCache>,
) -> Result<Vec<BranchPass>> {
    items
        .par_iter()
        .map(|key| match cache.and_then(|c| c.traces.get(key)) {
            Some(t) => retrieval_branch(adapters, t),
            None => embed_text_pass(model, adapters, key.0.as_bytes(), key.1),
        })
        .collect()
}

/// Per-pair losses and, if requested, `∂L/∂r` for every embedded item.
fn losses_and_score_grads(plan: &BatchPlan, passes: &[BranchPass], want_grad: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = plan.n_pairs;
    let d = passes[0].pooled.len();
    let mut grads = if want_grad {
        vec![vec![0.0; d]; passes.len()]
    } else {
        Vec::new()
    };
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        let q = &passes[i].pooled;
        // Pool: the batch's positives (own positive first), then explicit negatives.
        let mut pool: Vec<usize> = vec![n + i];
        pool.extend((0..n).filter(|&j| j != i).map(|j| n + j));
        pool.extend(plan.negatives[i].clone());
        let scores: Vec<f64> = pool.iter().map(|&c| dot(q, &passes[c].pooled)).collect();
        let lse = log_sum_exp(&scores);
        losses.push(lse - scores[0]);
        if want_grad {
            let w = 1.0 / n as f64;
            for (k, &c) in pool.iter().enumerate() {
                let coef = w * ((scores[k] - lse).exp() - if k == 0 { 1.0 } else { 0.0 });
                for t in 0..d {
                    grads[i][t] += coef * passes[c].pooled[t];
                    grads[c][t] += coef * q[t];
                }
            }
        }
    }
    (losses, grads)
}

pub fn batch_loss(model: &Transformer, adapters: &AdapterSet, batch: &[TrainingPair], stage: Stage) -> Result<f64> {
    let plan = plan(batch, stage)?;
    let passes = embed_all(model, adapters, &plan.items, None)?;
    let (losses, _) = losses_and_score_grads(&plan, &passes, false);
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean per-pair loss and its exact gradient with respect to every `A` and `B`.
pub fn loss_grad_adapters(
    model: &Transformer,
    adapters: &AdapterSet,
    batch: &[TrainingPair],
    stage: Stage,
) -> Result<(f64, AdapterGradients)> {
    let (losses, grads) = per_pair_loss_grad(model, adapters, batch, stage, None)?;
    Ok((losses.iter().sum::<f64>() / losses.len() as f64, grads))
}

fn per_pair_loss_grad(
    model: &Transformer,
    adapters: &AdapterSet,
    batch: &[TrainingPair],
    stage: Stage,
    cache: Option<&TraceCache>,
) -> Result<(Vec<f64>, AdapterGradients)> {
    let plan = plan(batch, stage)?;
    let passes = embed_all(model, adapters, &plan.items, cache)?;
    let (losses, score_grads) = losses_and_score_grads(&plan, &passes, true);
    let partial: Vec<AdapterGradients> = passes
        .par_iter()
        .zip(&score_grads)
        .map(|(pass, g)| {
            let mut out = AdapterGradients::zeros_like(adapters);
            branch_backward(adapters, pass, g, &mut out);
            out
        })
        .collect();
    let mut total = AdapterGradients::zeros_like(adapters);
    for p in &partial {
        for (t, g) in total.grads.iter_mut().zip(&p.grads) {
            t.add_assign(g)?;
        }
    }
    Ok((losses, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Seconds since training started; the only nondeterministic field.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Runs `config.steps` updates over seeded, per-epoch shuffled batches.
pub fn train(
    model: &Transformer,
    adapters: &AdapterSet,
    pairs: &[TrainingPair],
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &AdapterSet) -> Result<()>,
) -> Result<(AdapterSet, TrainReport)> {
    config.validate()?;
    adapters.check_compatible(model)?;
    let mut adapters = adapters.clone();
    let mut report = TrainReport::default();
    if config.steps == 0 {
        return Ok((adapters, report));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    let batch_size = config.batch_size.min(pairs.len());
    if config.stage == Stage::One && batch_size < 2 {
        return Err(Error::Config("stage 1 needs at least two training pairs".into()));
    }
    let shapes: Vec<_> = adapters.matrices().iter().map(|m| m.shape()).collect();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &shapes);
    let cache = TraceCache::build(model, pairs, config.stage)?;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let started = Instant::now();
    for step in 0..config.steps {
        if cursor + batch_size > order.len() {
            order = (0..pairs.len()).collect();
            order.shuffle(&mut config.seed.derive_str("shuffle").derive(epoch).rng());
            epoch += 1;
            cursor = 0;
        }
        let batch: Vec<TrainingPair> = order[cursor..cursor + batch_size].iter().map(|&i| pairs[i].clone()).collect();
        cursor += batch_size;
        if config.linear_decay {
            opt.set_learning_rate(config.learning_rate * (1.0 - step as f64 / config.steps as f64));
        }
        let (losses, grads) = per_pair_loss_grad(model, &adapters, &batch, config.stage, Some(&cache))?;
        if let Some(bad) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::NanLoss {
                step,
                pair: batch[bad].id(),
            });
        }
        if !grads.is_finite() {
            return Err(Error::NanLoss {
                step,
                pair: "gradient".into(),
            });
        }
        opt.update(adapters.matrices_mut(), grads.matrices());
        let record = StepRecord {
            step,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            wall_time: started.elapsed().as_secs_f64(),
        };
        on_step(&record, &adapters)?;
        report.records.push(record);
    }
    Ok((adapters, report))
}

/// Largest per-coordinate relative error between analytic and central
/// finite-difference gradients over every adapter entry.
pub fn gradcheck(
    model: &Transformer,
    adapters: &AdapterSet,
    batch: &[TrainingPair],
    stage: Stage,
    eps: f64,
) -> Result<GradcheckReport> {
    let (_, analytic) = loss_grad_adapters(model, adapters, batch, stage)?;
    let mut report = GradcheckReport::default();
    let n_mats = adapters.matrices().len();
    for m in 0..n_mats {
        let len = adapters.matrices()[m].data().len();
        for idx in 0..len {
            let x0 = adapters.matrices()[m].data()[idx];
            let f = |p: &[f64]| {
                let mut a = adapters.clone();
                a.matrices_mut()[m].data_mut()[idx] = p[0];
                batch_loss(model, &a, batch, stage).unwrap_or(f64::NAN)
            };
            let numeric = crate::tensor::finite_diff_grad(f, &[x0], eps)?[0];
            let exact = analytic.grads[m].data()[idx];
            let rel = relative_error(exact, numeric);
            report.coordinates += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((m, idx, exact, numeric));
            }
        }
    }
    Ok(report)
}

/// `|a - n| / max(|a|, |n|, 1e-7)`; the floor keeps exact zeros comparable.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub coordinates: usize,
    pub max_relative_error: f64,
    /// (matrix index, entry, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}
