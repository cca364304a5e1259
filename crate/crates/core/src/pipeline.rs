//! Retrieval-augmented completion: retrieve, assemble a prompt, generate.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{embed_text, AdapterSet, EmbedKind};
use crate::corpus::{continuation_budget, successor_map, Fragment, FragmentId, Positive, TrainingPair, DEFAULT_INTERVAL};
use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::model::{tokenize, StopRule, TokenSequence, Transformer, BOS};

/// Line that opens and closes every retrieved fragment in a prompt.
pub const FRAGMENT_DELIMITER: &str = "#\n";
/// Generation budget for api and function granularity.
pub const BLOCK_TOKENS: usize = 256;
/// Tokens kept free for generation when assembling a prompt.
pub const PROMPT_RESERVE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Similar,
    NextFragment,
    NextQuery,
    #[serde(rename = "self")]
    SelfRacg,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::None,
        Strategy::Similar,
        Strategy::NextFragment,
        Strategy::NextQuery,
        Strategy::SelfRacg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Similar => "similar",
            Strategy::NextFragment => "next_fragment",
            Strategy::NextQuery => "next_query",
            Strategy::SelfRacg => "self",
        }
    }

    pub fn uses_index(self) -> bool {
        self != Strategy::None
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Line,
    Api,
    Function,
}

impl Granularity {
    fn stop_rule(self) -> (StopRule, usize) {
        match self {
            Granularity::Line => (StopRule::Lines(1), PROMPT_RESERVE),
            Granularity::Api | Granularity::Function => (StopRule::Budget, BLOCK_TOKENS),
        }
    }
}

/// What generation is allowed to see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInput {
    pub context: String,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionTask {
    #[serde(flatten)]
    pub input: TaskInput,
    pub target: String,
    pub target_fragment_id: FragmentId,
}

/// One line-level task per pair whose positive is a stored fragment: the
/// context is the query fragment and the target is the successor's first line.
pub fn line_tasks(pairs: &[TrainingPair]) -> Vec<CompletionTask> {
    pairs
        .iter()
        .filter_map(|p| match &p.positive {
            Positive::Fragment(next) => Some(CompletionTask {
                input: TaskInput {
                    context: p.query.text.clone(),
                    granularity: Granularity::Line,
                },
                target: next.text.split('\n').next().unwrap_or("").to_string(),
                target_fragment_id: next.id(),
            }),
            Positive::Synthesized(_) => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub id: FragmentId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionOutput {
    pub task: usize,
    pub strategy: Strategy,
    pub k: usize,
    pub generated: String,
    pub retrieved: Vec<Retrieved>,
}

/// Shared read-only state for retrieval and generation.
pub struct Pipeline<'a> {
    model: &'a Transformer,
    adapters: &'a AdapterSet,
    index: &'a VectorIndex,
    fragments: BTreeMap<FragmentId, &'a Fragment>,
    successors: BTreeMap<FragmentId, FragmentId>,
    /// Lines of continuation generated for `next_query`.
    pub query_lines: usize,
    /// Prompt budget for line completion.
    pub window: usize,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        model: &'a Transformer,
        adapters: &'a AdapterSet,
        index: &'a VectorIndex,
        fragments: &'a [Fragment],
    ) -> Result<Self> {
        adapters.check_compatible(model)?;
        if index.dim() != model.d_model() {
            return Err(Error::ShapeMismatch {
                op: "pipeline index",
                left: (1, model.d_model()),
                right: (1, index.dim()),
            });
        }
        let by_id: BTreeMap<FragmentId, &Fragment> = fragments.iter().map(|f| (f.id(), f)).collect();
        if let Some(missing) = index.ids().iter().find(|id| !by_id.contains_key(*id)) {
            return Err(Error::MissingInput(format!("indexed fragment {missing} not in corpus")));
        }
        Ok(Self {
            model,
            adapters,
            index,
            fragments: by_id,
            successors: successor_map(fragments),
            query_lines: DEFAULT_INTERVAL,
            window: model.config().max_seq_len.saturating_sub(PROMPT_RESERVE),
        })
    }

    pub fn fragment(&self, id: &FragmentId) -> Result<&'a Fragment> {
        self.fragments
            .get(id)
            .copied()
            .ok_or_else(|| Error::MissingInput(format!("fragment {id}")))
    }

    fn search(&self, text: &str, kind: EmbedKind, k: usize) -> Result<Vec<Retrieved>> {
        let rep = embed_text(self.model, self.adapters, text.as_bytes(), kind)?;
        Ok(self
            .index
            .search(&rep, k)?
            .into_iter()
            .map(|h| Retrieved { id: h.id, score: h.score })
            .collect())
    }

    /// Greedy continuation used as the explicit query of `next_query`.
    pub fn next_query_text(&self, context: &str) -> Result<String> {
        let prompt = tokenize(context.as_bytes(), self.model.config().max_seq_len)?;
        let budget = continuation_budget(self.model, prompt.len());
        if budget == 0 {
            return Err(Error::WindowOverflow {
                len: prompt.len() + 1,
                max: self.model.config().max_seq_len,
            });
        }
        let out = self.model.greedy_generate(&prompt, budget, StopRule::Lines(self.query_lines))?;
        Ok(String::from_utf8_lossy(&out.bytes_from(prompt.len())).into_owned())
    }

    pub fn retrieve(&self, context: &str, strategy: Strategy, k: usize) -> Result<Vec<Retrieved>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        match strategy {
            Strategy::None => Ok(Vec::new()),
            Strategy::Similar => self.search(context, EmbedKind::Candidate, k),
            Strategy::SelfRacg => self.search(context, EmbedKind::Context, k),
            Strategy::NextQuery => self.search(&self.next_query_text(context)?, EmbedKind::Candidate, k),
            Strategy::NextFragment => {
                let mut seen = HashSet::new();
                Ok(self
                    .search(context, EmbedKind::Candidate, k)?
                    .into_iter()
                    .map(|hit| match self.successors.get(&hit.id) {
                        Some(next) => Retrieved {
                            id: next.clone(),
                            score: hit.score,
                        },
                        None => hit,
                    })
                    .filter(|r| seen.insert(r.id.clone()))
                    .collect())
            }
        }
    }

    pub fn complete(&self, input: &TaskInput, strategy: Strategy, k: usize) -> Result<(String, Vec<Retrieved>)> {
        let (bytes, retrieved) = self.complete_bytes(input, strategy, k)?;
        Ok((String::from_utf8_lossy(&bytes).into_owned(), retrieved))
    }

    /// Raw generated bytes; a line completion loses its final newline.
    pub fn complete_bytes(&self, input: &TaskInput, strategy: Strategy, k: usize) -> Result<(Vec<u8>, Vec<Retrieved>)> {
        let retrieved = self.retrieve(&input.context, strategy, k)?;
        let frags = retrieved
            .iter()
            .map(|r| self.fragment(&r.id).map(|f| f.text.as_str()))
            .collect::<Result<Vec<_>>>()?;
        let (stop, reserve) = input.granularity.stop_rule();
        let max = self.model.config().max_seq_len;
        let window = self.window.min(max.saturating_sub(reserve)).max(2);
        let prompt = assemble_prompt(&frags, &input.context, window)?;
        let budget = reserve.min(max - prompt.len());
        let out = self.model.greedy_generate(&prompt, budget, stop)?;
        let mut bytes = out.bytes_from(prompt.len());
        if input.granularity == Granularity::Line && bytes.last() == Some(&b'\n') {
            bytes.pop();
        }
        Ok((bytes, retrieved))
    }

    /// Completes every task in parallel; output order follows `tasks`.
    pub fn complete_all(&self, tasks: &[TaskInput], strategy: Strategy, k: usize) -> Result<Vec<CompletionOutput>> {
        tasks
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let (generated, retrieved) = self.complete(t, strategy, k)?;
                Ok(CompletionOutput {
                    task: i,
                    strategy,
                    k,
                    generated,
                    retrieved,
                })
            })
            .collect()
    }
}

/// Base-model training sequences: every pair as contiguous text, and as a
/// line-completion prompt whose retrieved fragment is the true successor,
/// followed by that successor's first line.
pub fn pretraining_sequences(pairs: &[TrainingPair], max_seq_len: usize, window: usize) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        let next = p.positive.text();
        let raw = format!("{}{}", p.query.text, next);
        if raw.len() < max_seq_len {
            out.push(tokenize(raw.as_bytes(), max_seq_len)?);
        }
        let prompt = assemble_prompt(&[next], &p.query.text, window.min(max_seq_len))?;
        let line = next.split_inclusive('\n').next().unwrap_or("");
        let mut ids = prompt.ids().to_vec();
        ids.extend(line.bytes().map(u32::from));
        if ids.len() <= max_seq_len {
            out.push(TokenSequence::new(ids, crate::model::MIN_VOCAB, max_seq_len)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("no pretraining sequence fits the window"));
    }
    Ok(out)
}

fn wrap(fragment: &str) -> String {
    let mut s = String::with_capacity(fragment.len() + 2 * FRAGMENT_DELIMITER.len() + 1);
    s.push_str(FRAGMENT_DELIMITER);
    s.push_str(fragment);
    if !fragment.ends_with('\n') {
        s.push('\n');
    }
    s.push_str(FRAGMENT_DELIMITER);
    s
}

/// Fragments most relevant first, each between delimiter lines, then the
/// context. Over budget, whole fragments are dropped from the end, then the
/// context loses bytes from its start. The result never exceeds `window`.
pub fn assemble_prompt(retrieved: &[&str], context: &str, window: usize) -> Result<TokenSequence> {
    if context.is_empty() {
        return Err(Error::Empty("completion context"));
    }
    if window < 2 {
        return Err(Error::WindowOverflow {
            len: 2,
            max: window,
        });
    }
    let budget = window - 1;
    let mut bytes = Vec::new();
    for f in retrieved {
        let w = wrap(f);
        if bytes.len() + w.len() + context.len() > budget {
            break;
        }
        bytes.extend_from_slice(w.as_bytes());
    }
    let ctx = context.as_bytes();
    let keep = ctx.len().min(budget - bytes.len());
    bytes.extend_from_slice(&ctx[ctx.len() - keep..]);
    let mut ids = Vec::with_capacity(bytes.len() + 1);
    ids.push(BOS);
    ids.extend(bytes.iter().map(|&b| u32::from(b)));
    TokenSequence::new(ids, crate::model::MIN_VOCAB, window)
}
