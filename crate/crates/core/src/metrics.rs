//! Completion and retrieval metrics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RECALL_KS: [usize; 4] = [1, 3, 5, 10];
pub const MRR_CUTOFF: usize = 10;

fn trim_lines(s: &str) -> String {
    s.split('\n').map(str::trim_end).collect::<Vec<_>>().join("\n")
}

/// 1 iff equal after trimming trailing whitespace on every line.
pub fn exact_match(pred: &str, truth: &str) -> u8 {
    u8::from(trim_lines(pred) == trim_lines(truth))
}

/// Character-level Levenshtein distance with unit costs.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - lev(a, b) / max(|a|, |b|)`; two empty strings score 1.
pub fn edit_similarity(pred: &str, truth: &str) -> f64 {
    let n = pred.chars().count().max(truth.chars().count());
    if n == 0 {
        return 1.0;
    }
    1.0 - levenshtein(pred, truth) as f64 / n as f64
}

/// 1-based position of `truth` in `ranked`.
pub fn rank_of<T: PartialEq>(ranked: &[T], truth: &T) -> Option<usize> {
    ranked.iter().position(|x| x == truth).map(|i| i + 1)
}

pub fn recall_at_k<T: PartialEq>(ranked: &[T], truth: &T, k: usize) -> u8 {
    assert!(k >= 1, "recall_at_k needs k >= 1");
    u8::from(rank_of(ranked, truth).is_some_and(|r| r <= k))
}

pub fn mrr_at_10<T: PartialEq>(ranked: &[T], truth: &T) -> f64 {
    match rank_of(ranked, truth) {
        Some(r) if r <= MRR_CUTOFF => 1.0 / r as f64,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub task: usize,
    pub em: u8,
    pub es: f64,
}

impl CompletionRecord {
    pub fn score(task: usize, pred: &str, truth: &str) -> Self {
        Self {
            task,
            em: exact_match(pred, truth),
            es: edit_similarity(pred, truth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query: String,
    /// 1-based rank of the ground truth, if it was retrieved at all.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub em: f64,
    pub es: f64,
    pub recall: Vec<(usize, f64)>,
    pub mrr10: f64,
    pub completions: usize,
    pub queries: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub completions: Vec<CompletionRecord>,
    pub retrievals: Vec<RetrievalRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            ..Self::default()
        }
    }

    pub fn aggregates(&self) -> Aggregates {
        let ranks = || self.retrievals.iter().map(|r| r.rank);
        Aggregates {
            em: mean(self.completions.iter().map(|c| f64::from(c.em))),
            es: mean(self.completions.iter().map(|c| c.es)),
            recall: RECALL_KS
                .iter()
                .map(|&k| (k, mean(ranks().map(|r| if r.is_some_and(|r| r <= k) { 1.0 } else { 0.0 }))))
                .collect(),
            mrr10: mean(ranks().map(|r| match r {
                Some(r) if r <= MRR_CUTOFF => 1.0 / r as f64,
                _ => 0.0,
            })),
            completions: self.completions.len(),
            queries: self.retrievals.len(),
        }
    }

    pub fn recall(&self, k: usize) -> f64 {
        mean(self.retrievals.iter().map(|r| if r.rank.is_some_and(|r| r <= k) { 1.0 } else { 0.0 }))
    }

    /// One JSON object per record, then one aggregate line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.completions {
            let v = serde_json::json!({"label": self.label, "type": "completion", "record": c});
            writeln!(out, "{}", serde_json::to_string(&v)?).expect("string write");
        }
        for r in &self.retrievals {
            let v = serde_json::json!({"label": self.label, "type": "retrieval", "record": r});
            writeln!(out, "{}", serde_json::to_string(&v)?).expect("string write");
        }
        let v = serde_json::json!({"label": self.label, "type": "aggregate", "record": self.aggregates()});
        writeln!(out, "{}", serde_json::to_string(&v)?).expect("string write");
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// Plain-text table, one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
    let mut out = format!("{:<width$}", "method");
    for h in ["EM", "ES", "Recall@1", "Recall@3", "Recall@5", "Recall@10", "MRR@10"] {
        write!(out, " {h:>9}").expect("string write");
    }
    out.push('\n');
    for r in reports {
        let a = r.aggregates();
        write!(out, "{:<width$} {:>9.4} {:>9.4}", r.label, a.em, a.es).expect("string write");
        for (_, v) in &a.recall {
            write!(out, " {v:>9.4}").expect("string write");
        }
        writeln!(out, " {:>9.4}", a.mrr10).expect("string write");
    }
    out
}
