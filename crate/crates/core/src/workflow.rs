//! Experiment steps shared by the command-line tool and the test suites.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    embed_text, forward_with_retrieval, init_adapters, vanilla_lora_forward, AdapterSet, EmbedKind, DEFAULT_ALPHA,
};
use crate::checkpoint::sha256_hex;
use crate::config::RunConfig;
use crate::corpus::{
    chunk_files, make_stage1_pairs, synth_corpus, synth_stage2_samples, Fragment, Positive, SourceFile,
    TrainingPair,
};
use crate::error::{Error, Result};
use crate::index::{corpus_hash, IndexMetadata, VectorIndex};
use crate::metrics::{mrr_at_10, rank_of, CompletionRecord, EvalReport, RetrievalRecord};
use crate::model::{pretrain, tokenize, ModelConfig, PretrainReport, Transformer, MIN_VOCAB};
use crate::pipeline::{line_tasks, pretraining_sequences, CompletionOutput, CompletionTask, Pipeline, Strategy};
use crate::tensor::{dot, Seed};
use crate::trainer::{gradcheck, train, GradcheckReport, Stage, StepRecord, TrainReport};

/// Retrieval depth used for Recall@K and MRR@10.
pub const EVAL_DEPTH: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<SourceFile>,
    pub heldout: Vec<SourceFile>,
}

/// One synthetic corpus; the last `heldout_files` files are held out.
pub fn synthesize(cfg: &RunConfig) -> Result<Dataset> {
    let corpus = synth_corpus(cfg.files + cfg.heldout_files, cfg.base_seed().derive_str("corpus"))?;
    let mut train = corpus.files;
    let heldout = train.split_off(cfg.files);
    Ok(Dataset { train, heldout })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunked {
    /// Every fragment of both splits, sorted by id.
    pub fragments: Vec<Fragment>,
    pub train_pairs: Vec<TrainingPair>,
    pub heldout_pairs: Vec<TrainingPair>,
}

impl Chunked {
    pub fn tasks(&self) -> Vec<CompletionTask> {
        line_tasks(&self.heldout_pairs)
    }
}

pub fn chunk_dataset(data: &Dataset, interval: usize) -> Result<Chunked> {
    let train = chunk_files(&data.train, interval)?;
    let heldout = chunk_files(&data.heldout, interval)?;
    let train_pairs = make_stage1_pairs(&train);
    let heldout_pairs = make_stage1_pairs(&heldout);
    let mut fragments = train;
    fragments.extend(heldout);
    fragments.sort_by_key(|f| f.id());
    Ok(Chunked {
        fragments,
        train_pairs,
        heldout_pairs,
    })
}

pub fn pretrain_model(cfg: &RunConfig, pairs: &[TrainingPair]) -> Result<(Transformer, PretrainReport)> {
    let window = cfg.window.min(cfg.max_seq_len);
    let seqs = pretraining_sequences(pairs, cfg.max_seq_len, window)?;
    log::info!("pretraining on {} sequences for {} steps", seqs.len(), cfg.pretrain_steps);
    pretrain(cfg.model_config(), &seqs, &cfg.pretrain_config(), |step, loss| {
        if step % 100 == 0 {
            log::info!("pretrain step {step} loss {loss:.4}");
        }
    })
}

fn log_step(stage: Stage) -> impl FnMut(&StepRecord, &AdapterSet) -> Result<()> {
    move |r, _| {
        if r.step % 50 == 0 {
            log::info!("stage {} step {} loss {:.4}", u8::from(stage), r.step, r.loss);
        }
        Ok(())
    }
}

pub fn train_stage1(cfg: &RunConfig, model: &Transformer, pairs: &[TrainingPair]) -> Result<(AdapterSet, TrainReport)> {
    let init = init_adapters(
        &cfg.model_config(),
        cfg.rank,
        cfg.alpha,
        cfg.base_seed().derive_str("adapters"),
    )?;
    train(model, &init, pairs, &cfg.train_config(Stage::One), log_step(Stage::One))
}

/// Greedy continuation as positive and sampled continuations as negatives,
/// for each query. `padding` supplies negatives when sampling collapses.
pub fn stage2_pairs(
    cfg: &RunConfig,
    model: &Transformer,
    queries: &[Fragment],
    padding: &[Fragment],
    seed: Seed,
) -> Result<Vec<TrainingPair>> {
    let samples: Vec<Result<TrainingPair>> = queries
        .par_iter()
        .map(|q| synth_stage2_samples(model, q, cfg.negatives + 1, cfg.interval, seed, padding).map(|s| s.pair))
        .collect();
    samples.into_iter().collect()
}

/// Queries for stage 2: the first `stage2_queries` training queries.
pub fn stage2_queries(cfg: &RunConfig, pairs: &[TrainingPair]) -> Vec<Fragment> {
    pairs.iter().take(cfg.stage2_queries).map(|p| p.query.clone()).collect()
}

pub fn train_stage2(
    cfg: &RunConfig,
    model: &Transformer,
    stage1: &AdapterSet,
    pairs: &[TrainingPair],
) -> Result<(AdapterSet, TrainReport)> {
    train(model, stage1, pairs, &cfg.train_config(Stage::Two), log_step(Stage::Two))
}

pub fn index_metadata(model: &Transformer, adapters: &AdapterSet, fragments: &[Fragment]) -> IndexMetadata {
    IndexMetadata {
        model_hash: sha256_hex(&model.to_bytes()),
        adapter_hash: sha256_hex(&adapters.to_bytes()),
        corpus_hash: corpus_hash(fragments),
    }
}

pub fn build_index(model: &Transformer, adapters: &AdapterSet, fragments: &[Fragment]) -> Result<VectorIndex> {
    let meta = index_metadata(model, adapters, fragments);
    VectorIndex::build(fragments, model.d_model(), meta, |f| {
        embed_text(model, adapters, f.text.as_bytes(), EmbedKind::Candidate)
    })
}

/// Rank of each task's ground-truth fragment in the top `EVAL_DEPTH`.
pub fn retrieval_records(pipe: &Pipeline, tasks: &[CompletionTask], strategy: Strategy) -> Result<Vec<RetrievalRecord>> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let hits = pipe.retrieve(&t.input.context, strategy, EVAL_DEPTH)?;
            let ids: Vec<_> = hits.into_iter().map(|h| h.id).collect();
            Ok(RetrievalRecord {
                query: i.to_string(),
                rank: rank_of(&ids, &t.target_fragment_id),
            })
        })
        .collect()
}

pub fn score_completions(outputs: &[CompletionOutput], tasks: &[CompletionTask]) -> Result<Vec<CompletionRecord>> {
    outputs
        .iter()
        .map(|o| {
            let t = tasks
                .get(o.task)
                .ok_or_else(|| Error::InvalidArgument(format!("completion refers to missing task {}", o.task)))?;
            Ok(CompletionRecord::score(o.task, &o.generated, &t.target))
        })
        .collect()
}

/// Completions and retrieval ranks of one strategy over `tasks`.
pub fn evaluate_strategy(pipe: &Pipeline, tasks: &[CompletionTask], strategy: Strategy, k: usize) -> Result<EvalReport> {
    let inputs: Vec<_> = tasks.iter().map(|t| t.input.clone()).collect();
    let outputs = pipe.complete_all(&inputs, strategy, k)?;
    let mut report = EvalReport::new(strategy.name());
    report.completions = score_completions(&outputs, tasks)?;
    if strategy.uses_index() {
        report.retrievals = retrieval_records(pipe, tasks, strategy)?;
    }
    Ok(report)
}

/// Mean reciprocal rank of each pair's positive among its positive and
/// explicit negatives, scored against the query's context embedding. Ties
/// rank the positive last.
pub fn preference_mrr(model: &Transformer, adapters: &AdapterSet, pairs: &[TrainingPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    let rr: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|p| {
            let q = embed_text(model, adapters, p.query.text.as_bytes(), EmbedKind::Context)?;
            let texts = std::iter::once(p.positive.text()).chain(p.explicit_negatives.iter().map(String::as_str));
            let mut scored = Vec::new();
            for (i, t) in texts.enumerate() {
                let c = embed_text(model, adapters, t.as_bytes(), EmbedKind::Candidate)?;
                scored.push((dot(&q.vector, &c.vector), i));
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
            let ranked: Vec<usize> = scored.into_iter().map(|(_, i)| i).collect();
            Ok(mrr_at_10(&ranked, &0))
        })
        .collect();
    let rr = rr.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(rr.iter().sum::<f64>() / rr.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub probes: usize,
    /// Probes whose logits with the branch attached equal the base logits bit for bit.
    pub identical: usize,
    /// Probes whose vanilla-LoRA logits differ from the base logits.
    pub vanilla_differs: usize,
}

/// Random (model, adapters, input) triples with nonzero `B`.
pub fn invariance_probe(probes: usize, seed: Seed) -> Result<InvarianceReport> {
    let rows: Vec<Result<(bool, bool)>> = (0..probes)
        .into_par_iter()
        .map(|i| {
            let s = seed.derive(i as u64);
            let mut rng = s.rng();
            let d = [8, 16, 32][rng.gen_range(0..3)];
            let config = ModelConfig {
                vocab_size: MIN_VOCAB,
                d_model: d,
                n_layers: rng.gen_range(1..=3),
                max_seq_len: 64,
                mlp_hidden: 2 * d,
            };
            let model = Transformer::init(config, s.derive_str("model"))?;
            let rank = rng.gen_range(1..=d / 2);
            let adapters = init_adapters(model.config(), rank, DEFAULT_ALPHA, s.derive_str("adapters"))?
                .with_random_b(s.derive_str("b"))?;
            let len = rng.gen_range(1..=40);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let tokens = tokenize(&bytes, 64)?;
            let base = model.forward(&tokens)?;
            let (attached, _) = forward_with_retrieval(&model, &adapters, &tokens)?;
            let vanilla = vanilla_lora_forward(&model, &adapters, &tokens)?;
            let identical = base
                .logits
                .data()
                .iter()
                .zip(attached.logits.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            Ok((identical, vanilla.logits.max_abs_diff(&base.logits) > 0.0))
        })
        .collect();
    let mut report = InvarianceReport {
        probes,
        ..Default::default()
    };
    for r in rows {
        let (same, differs) = r?;
        report.identical += usize::from(same);
        report.vanilla_differs += usize::from(differs);
    }
    Ok(report)
}

/// Finite-difference check of every adapter coordinate at d=16, L=2, rank 2.
pub fn gradcheck_probe(stage: Stage, seed: Seed) -> Result<GradcheckReport> {
    let config = ModelConfig {
        vocab_size: MIN_VOCAB,
        d_model: 16,
        n_layers: 2,
        max_seq_len: 48,
        mlp_hidden: 32,
    };
    let model = Transformer::init(config, seed.derive_str("model"))?;
    let mut adapters = init_adapters(model.config(), 2, DEFAULT_ALPHA, seed.derive_str("adapters"))?
        .with_random_b(seed.derive_str("b"))?;
    // keep the update near the base projection scale so scores stay unsaturated
    for m in adapters.matrices_mut().into_iter().skip(1).step_by(2) {
        *m = m.scale(1.0 / DEFAULT_ALPHA);
    }
    let mut rng = seed.derive_str("text").rng();
    let mut text = |n: usize| -> String { (0..n).map(|_| char::from(rng.gen_range(b'a'..=b'z'))).collect() };
    let negatives = if stage == Stage::Two { 2 } else { 0 };
    let pairs: Vec<TrainingPair> = (0..3)
        .map(|i| {
            let frag = |t: String, line: usize| Fragment {
                repo_id: "probe".into(),
                file_path: "probe.txt".into(),
                start_line: line,
                end_line: line,
                text: t,
            };
            TrainingPair {
                query: frag(text(10), 2 * i + 1),
                positive: Positive::Fragment(frag(text(10), 2 * i + 2)),
                explicit_negatives: (0..negatives).map(|_| text(8)).collect(),
            }
        })
        .collect();
    gradcheck(&model, &adapters, &pairs, stage, GRADCHECK_EPS)
}

pub const GRADCHECK_EPS: f64 = 1e-6;
