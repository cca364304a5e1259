//! Source files, fragments, training pairs, and a synthetic corpus generator.
//!
//! Text is handled as lines separated by `\n`. A fragment keeps each line's
//! terminating newline, so concatenating a file's fragments gives the file back.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{detokenize, tokenize, StopRule, Transformer};
use crate::tensor::Seed;

pub const DEFAULT_INTERVAL: usize = 20;
pub const MIN_FILE_LINES: usize = 20;
pub const MIN_TAIL_LINES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub repo_id: String,
    pub file_path: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FragmentId {
    pub repo_id: String,
    pub file_path: String,
    pub start_line: usize,
}

impl fmt::Display for FragmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.repo_id, self.file_path, self.start_line)
    }
}

impl std::str::FromStr for FragmentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.rsplitn(2, ':');
        let start = parts.next().and_then(|v| v.parse().ok());
        let rest = parts.next();
        match (start, rest.and_then(|r| r.split_once(':'))) {
            (Some(start_line), Some((repo, path))) => Ok(FragmentId {
                repo_id: repo.to_string(),
                file_path: path.to_string(),
                start_line,
            }),
            _ => Err(Error::InvalidArgument(format!("bad fragment id {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub repo_id: String,
    pub file_path: String,
    pub start_line: usize,
    pub end_line: usize,
    pub text: String,
}

impl Fragment {
    pub fn id(&self) -> FragmentId {
        FragmentId {
            repo_id: self.repo_id.clone(),
            file_path: self.file_path.clone(),
            start_line: self.start_line,
        }
    }

    pub fn line_count(&self) -> usize {
        self.end_line + 1 - self.start_line
    }

    fn same_file(&self, other: &Fragment) -> bool {
        self.repo_id == other.repo_id && self.file_path == other.file_path
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Positive {
    Fragment(Fragment),
    Synthesized(String),
}

impl Positive {
    pub fn text(&self) -> &str {
        match self {
            Positive::Fragment(f) => &f.text,
            Positive::Synthesized(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub query: Fragment,
    pub positive: Positive,
    #[serde(default)]
    pub explicit_negatives: Vec<String>,
}

impl TrainingPair {
    pub fn id(&self) -> String {
        self.query.id().to_string()
    }
}

/// Splits after every `\n`; a missing final newline still ends a line.
pub fn split_lines(text: &str) -> Vec<&str> {
    text.split_inclusive('\n').collect()
}

pub fn line_count(text: &str) -> usize {
    split_lines(text).len()
}

pub fn filter_files(files: Vec<SourceFile>, excluded_repos: &[String]) -> Vec<SourceFile> {
    let excluded: HashSet<&str> = excluded_repos.iter().map(String::as_str).collect();
    files
        .into_iter()
        .filter(|f| !excluded.contains(f.repo_id.as_str()) && line_count(&f.text) >= MIN_FILE_LINES)
        .collect()
}

pub fn chunk(file: &SourceFile, interval: usize) -> Result<Vec<Fragment>> {
    if interval == 0 {
        return Err(Error::InvalidArgument("chunk interval must be at least 1".into()));
    }
    let lines = split_lines(&file.text);
    if lines.is_empty() {
        return Err(Error::Empty("file has no lines"));
    }
    let mut bounds: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    while start < lines.len() {
        let end = (start + interval).min(lines.len());
        if end - start < interval.min(MIN_TAIL_LINES) && !bounds.is_empty() {
            bounds.last_mut().expect("non-empty").1 = end;
        } else {
            bounds.push((start, end));
        }
        start = end;
    }
    Ok(bounds
        .into_iter()
        .map(|(s, e)| Fragment {
            repo_id: file.repo_id.clone(),
            file_path: file.file_path.clone(),
            start_line: s + 1,
            end_line: e,
            text: lines[s..e].concat(),
        })
        .collect())
}

/// Chunks every file and returns fragments sorted by id.
pub fn chunk_files(files: &[SourceFile], interval: usize) -> Result<Vec<Fragment>> {
    let per_file: Vec<Result<Vec<Fragment>>> = files.par_iter().map(|f| chunk(f, interval)).collect();
    let mut out = Vec::new();
    for r in per_file {
        out.extend(r?);
    }
    out.sort_by(|a, b| a.id().cmp(&b.id()));
    Ok(out)
}

/// Consecutive fragments of the same file become (query, positive) pairs.
pub fn make_stage1_pairs(fragments: &[Fragment]) -> Vec<TrainingPair> {
    fragments
        .windows(2)
        .filter(|w| w[0].same_file(&w[1]) && w[0].end_line + 1 == w[1].start_line)
        .map(|w| TrainingPair {
            query: w[0].clone(),
            positive: Positive::Fragment(w[1].clone()),
            explicit_negatives: Vec::new(),
        })
        .collect()
}

/// Same-file successor of every fragment, if it has one.
pub fn successor_map(fragments: &[Fragment]) -> BTreeMap<FragmentId, FragmentId> {
    make_stage1_pairs(fragments)
        .into_iter()
        .filter_map(|p| match p.positive {
            Positive::Fragment(f) => Some((p.query.id(), f.id())),
            Positive::Synthesized(_) => None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic content-gap corpus.
//
// Every fragment is generated from a 64-bit latent key `k` and has 20 lines:
//
//   line 1      payload: a marker digit and three lowercase letters
//   line 2      response: the letter set of `k`, in an order drawn from `k`
//   lines 3-19  empty
//   line 20     request: the letter set of next(k), in another order
//
// `next(k)` is the key of the following fragment, so a fragment's request line
// names exactly the letters its successor answers with. Only the set carries
// over: the two orders are independent, so the lines rarely share a 3-gram and
// a model cannot read the response off the request. A whole file is
// determined by its first key.

pub const SYNTH_FRAGMENT_LINES: usize = 20;
pub const SYNTH_FRAGMENTS_PER_FILE: usize = 3;
/// Request letters are drawn from the first `CODE_ALPHABET` capitals.
pub const CODE_ALPHABET: usize = 26;
pub const KEY_LETTERS: usize = 7;
/// Payload markers and their frequencies; the first one is the majority.
pub const MARKERS: [(u8, f64); 3] = [(b'7', 0.5), (b'3', 0.3), (b'5', 0.2)];
/// Two distinct letter sets share at most this many letters.
pub const MAX_SHARED_LETTERS: u32 = KEY_LETTERS as u32 - 2;

pub fn next_key(key: u64) -> u64 {
    Seed(key).derive_str("next").0
}

/// `KEY_LETTERS` distinct letters in ascending order, whose alphabet indices
/// sum to 0 modulo `CODE_ALPHABET`. Two such sets never differ by a single
/// swap.
pub fn request_letters(key: u64) -> Vec<u8> {
    let mut rng = Seed(key).derive_str("request").rng();
    let mut letters: Vec<u8> = (b'A'..b'A' + CODE_ALPHABET as u8).collect();
    loop {
        letters.shuffle(&mut rng);
        let sum: usize = letters[..KEY_LETTERS].iter().map(|&c| usize::from(c - b'A')).sum();
        if sum % CODE_ALPHABET == 0 {
            let mut set = letters[..KEY_LETTERS].to_vec();
            set.sort_unstable();
            return set;
        }
    }
}

fn shuffled(mut letters: Vec<u8>, seed: Seed) -> Vec<u8> {
    letters.shuffle(&mut seed.rng());
    letters
}

fn letter_mask(letters: &[u8]) -> u32 {
    letters.iter().fold(0, |m, &c| m | 1 << (c - b'A'))
}

/// Payload characters after the marker, one alphabet per position.
pub const PAYLOAD_ALPHABETS: [&[u8]; 3] = [b"abcdefgh", b"ijklmnop", b"qrstuvwx"];

pub fn payload_marker(key: u64) -> u8 {
    let u: f64 = Seed(key).derive_str("marker").rng().gen();
    let mut acc = 0.0;
    for (m, p) in MARKERS {
        acc += p;
        if u < acc {
            return m;
        }
    }
    MARKERS[MARKERS.len() - 1].0
}

/// The fragment generated from `key`.
pub fn synth_fragment_text(key: u64) -> String {
    let mut rng = Seed(key).derive_str("body").rng();
    let mut out = Vec::with_capacity(48);
    out.push(payload_marker(key));
    out.extend(PAYLOAD_ALPHABETS.iter().map(|a| a[rng.gen_range(0..a.len())]));
    out.push(b'\n');
    let seed = Seed(key);
    out.extend(shuffled(request_letters(key), seed.derive_str("response order")));
    out.push(b'\n');
    out.extend([b'\n'; SYNTH_FRAGMENT_LINES - 3]);
    out.extend(shuffled(request_letters(next_key(key)), seed.derive_str("request order")));
    out.push(b'\n');
    String::from_utf8(out).expect("ascii")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub files: Vec<SourceFile>,
    /// Generating key of every fragment, per file.
    pub keys: Vec<Vec<u64>>,
}

impl SynthCorpus {
    /// Certificate that `positive` is the fragment `query` asks for: the key
    /// the query carries equals the key the positive was generated from.
    pub fn certifies(&self, query: &FragmentId, positive: &FragmentId) -> bool {
        match (self.key_of(query), self.key_of(positive)) {
            (Some(q), Some(p)) => next_key(q) == p,
            _ => false,
        }
    }

    pub fn key_of(&self, id: &FragmentId) -> Option<u64> {
        let f = self
            .files
            .iter()
            .position(|f| f.repo_id == id.repo_id && f.file_path == id.file_path)?;
        if id.start_line == 0 || (id.start_line - 1) % SYNTH_FRAGMENT_LINES != 0 {
            return None;
        }
        self.keys[f].get((id.start_line - 1) / SYNTH_FRAGMENT_LINES).copied()
    }
}

pub fn synth_file_path(index: usize) -> (String, String) {
    (format!("repo{:03}", index / 20), format!("src/f{index:05}.syn"))
}

pub fn synth_corpus(n_files: usize, seed: Seed) -> Result<SynthCorpus> {
    if n_files == 0 {
        return Err(Error::InvalidArgument("n_files must be at least 1".into()));
    }
    let mut rng = seed.derive_str("synth").rng();
    let mut masks: Vec<u32> = Vec::new();
    let mut files = Vec::with_capacity(n_files);
    let mut keys = Vec::with_capacity(n_files);
    let mut attempts = 0usize;
    while files.len() < n_files {
        attempts += 1;
        if attempts > 1000 * n_files + 1000 {
            return Err(Error::Config(format!("could not place {n_files} files with distinct keys")));
        }
        let mut chain = vec![rng.gen::<u64>()];
        for _ in 1..SYNTH_FRAGMENTS_PER_FILE {
            chain.push(next_key(*chain.last().expect("non-empty")));
        }
        // Every letter set that appears in the file: each fragment's response
        // and the last fragment's request.
        let mut file_masks: Vec<u32> = chain.iter().map(|&k| letter_mask(&request_letters(k))).collect();
        file_masks.push(letter_mask(&request_letters(next_key(*chain.last().expect("non-empty")))));
        let clash = file_masks.iter().enumerate().any(|(i, m)| {
            file_masks[..i].iter().any(|o| (m & o).count_ones() > MAX_SHARED_LETTERS)
                || masks.iter().any(|o| (m & o).count_ones() > MAX_SHARED_LETTERS)
        });
        if clash {
            continue;
        }
        masks.extend(file_masks);
        let (repo_id, file_path) = synth_file_path(files.len());
        let text: String = chain.iter().map(|&k| synth_fragment_text(k)).collect();
        files.push(SourceFile {
            repo_id,
            file_path,
            text,
        });
        keys.push(chain);
    }
    Ok(SynthCorpus { files, keys })
}

pub fn byte_trigrams(text: &str) -> HashSet<[u8; 3]> {
    text.as_bytes().windows(3).map(|w| [w[0], w[1], w[2]]).collect()
}

pub fn trigram_jaccard(a: &str, b: &str) -> f64 {
    let (sa, sb) = (byte_trigrams(a), byte_trigrams(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

// ---------------------------------------------------------------------------
// Stage-2 preference data.

pub const STAGE2_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_SAMPLES: usize = 5;
const DRAWS_PER_NEGATIVE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Sample {
    pub pair: TrainingPair,
    /// Negatives taken from the padding pool instead of the model.
    pub padded: usize,
}

/// Continuation budget for one fragment: `interval` lines or 512 tokens.
pub fn continuation_budget(model: &Transformer, prompt_len: usize) -> usize {
    512.min(model.config().max_seq_len.saturating_sub(prompt_len))
}

fn continuation(out: &crate::model::TokenSequence, prompt_len: usize) -> String {
    String::from_utf8_lossy(&out.bytes_from(prompt_len)).into_owned()
}

/// Positive is the greedy continuation of the query; negatives are distinct
/// temperature samples, padded from `padding` when the model is too peaked.
pub fn synth_stage2_samples(
    model: &Transformer,
    query: &Fragment,
    k: usize,
    interval: usize,
    seed: Seed,
    padding: &[Fragment],
) -> Result<Stage2Sample> {
    if k < 2 {
        return Err(Error::InvalidArgument("stage-2 sample count k must be at least 2".into()));
    }
    let prompt = tokenize(query.text.as_bytes(), model.config().max_seq_len)?;
    let budget = continuation_budget(model, prompt.len());
    let stop = StopRule::Lines(interval);
    let greedy = continuation(&model.greedy_generate(&prompt, budget, stop)?, prompt.len());
    let base = seed.derive_str(&query.id().to_string());
    let mut seen: HashSet<String> = HashSet::from([greedy.clone()]);
    let mut negatives = Vec::with_capacity(k - 1);
    for draw in 0..DRAWS_PER_NEGATIVE * (k - 1) {
        if negatives.len() == k - 1 {
            break;
        }
        let out = model.sample_generate(&prompt, budget, STAGE2_TEMPERATURE, base.derive(draw as u64), stop)?;
        let text = continuation(&out, prompt.len());
        if seen.insert(text.clone()) {
            negatives.push(text);
        }
    }
    let mut padded = 0;
    if negatives.len() < k - 1 {
        log::warn!(
            "only {} distinct samples for {}; padding from other files",
            negatives.len(),
            query.id()
        );
        let mut rng = base.derive_str("padding").rng();
        let mut pool: Vec<&Fragment> = padding.iter().filter(|f| !f.same_file(query)).collect();
        pool.shuffle(&mut rng);
        for f in pool {
            if negatives.len() == k - 1 {
                break;
            }
            if seen.insert(f.text.clone()) {
                negatives.push(f.text.clone());
                padded += 1;
            }
        }
        if negatives.len() < k - 1 {
            return Err(Error::Empty("not enough distinct negatives even after padding"));
        }
    }
    Ok(Stage2Sample {
        pair: TrainingPair {
            query: query.clone(),
            positive: Positive::Synthesized(greedy),
            explicit_negatives: negatives,
        },
        padded,
    })
}

/// Greedy continuation of `text` for `lines` lines.
pub fn greedy_continuation(model: &Transformer, text: &str, lines: usize) -> Result<String> {
    let prompt = tokenize(text.as_bytes(), model.config().max_seq_len)?;
    let budget = continuation_budget(model, prompt.len());
    let out = model.greedy_generate(&prompt, budget, StopRule::Lines(lines))?;
    Ok(String::from_utf8_lossy(&detokenize(&out)[text.len()..]).into_owned())
}

// ---------------------------------------------------------------------------
// On-disk formats.

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
        _ => Error::io(path, e),
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

/// Reads a corpus from a record file or a directory tree. In a tree, the first
/// path component is the repository and the rest is the file path.
pub fn load_corpus(path: &Path) -> Result<Vec<SourceFile>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.display().to_string()));
    }
    if path.is_file() {
        return read_jsonl(path);
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(path).expect("walk stays under root");
        let mut comps = rel.components();
        let repo = comps.next().map(|c| c.as_os_str().to_string_lossy().into_owned());
        let rest = comps.as_path().to_string_lossy().into_owned();
        let (repo_id, file_path) = match repo {
            Some(r) if !rest.is_empty() => (r, rest),
            _ => (String::new(), rel.to_string_lossy().into_owned()),
        };
        let bytes = fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        files.push(SourceFile {
            repo_id,
            file_path,
            text: String::from_utf8_lossy(&bytes).into_owned(),
        });
    }
    Ok(files)
}
