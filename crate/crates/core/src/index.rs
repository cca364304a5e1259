//! Exact maximum-inner-product index over fragment representations.
//!
//! File layout (little-endian):
//! `magic[8] | version u32 | dim u64 | count u64 | id_bytes u64 | 3 × (u16 len | utf8 hash)`
//! followed by `count × dim` f64 values and the id table (`u16 len | utf8` per entry).

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{EmbedKind, RetrievalRepresentation};
use crate::corpus::{Fragment, FragmentId};
use crate::error::{Error, Result};
use crate::tensor::dot;

const INDEX_MAGIC: [u8; 8] = *b"SRGINDX\0";
const INDEX_VERSION: u32 = 1;

/// Hashes of the artifacts an index was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMetadata {
    pub model_hash: String,
    pub adapter_hash: String,
    pub corpus_hash: String,
}

impl IndexMetadata {
    fn fields(&self) -> [(&'static str, &str); 3] {
        [
            ("model", &self.model_hash),
            ("adapter", &self.adapter_hash),
            ("corpus", &self.corpus_hash),
        ]
    }

    fn validate(&self) -> Result<()> {
        for (name, h) in self.fields() {
            if h.is_empty() {
                return Err(Error::InvalidArgument(format!("index metadata: empty {name} hash")));
            }
        }
        Ok(())
    }

    /// Every field that differs from `expected`, as `HashMismatch` errors.
    pub fn mismatches(&self, expected: &IndexMetadata) -> Vec<Error> {
        self.fields()
            .into_iter()
            .zip(expected.fields())
            .filter(|((_, found), (_, want))| found != want)
            .map(|((what, found), (_, want))| Error::HashMismatch {
                what,
                expected: want.to_string(),
                found: found.to_string(),
            })
            .collect()
    }
}

/// Order-sensitive hash of fragment ids and texts.
pub fn corpus_hash(fragments: &[Fragment]) -> String {
    let mut h = Sha256::new();
    for f in fragments {
        h.update(f.id().to_string().as_bytes());
        h.update([0u8]);
        h.update(f.text.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<FragmentId>,
    /// Row-major `ids.len() × dim`.
    vectors: Vec<f64>,
    metadata: IndexMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: FragmentId,
    pub score: f64,
}

/// Descending score, then ascending id.
fn rank_order(a: &(f64, &FragmentId), b: &(f64, &FragmentId)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl VectorIndex {
    /// Embeds every fragment as a candidate; entries are sorted by fragment id.
    pub fn build<F>(fragments: &[Fragment], dim: usize, metadata: IndexMetadata, embedder: F) -> Result<Self>
    where
        F: Fn(&Fragment) -> Result<RetrievalRepresentation> + Sync,
    {
        if dim == 0 {
            return Err(Error::ZeroDimension("index dim"));
        }
        metadata.validate()?;
        let mut sorted: Vec<&Fragment> = fragments.iter().collect();
        sorted.sort_by_key(|f| f.id());
        let mut seen = HashSet::new();
        for f in &sorted {
            if !seen.insert(f.id()) {
                return Err(Error::InvalidArgument(format!("duplicate fragment id {}", f.id())));
            }
        }
        let reps: Vec<Result<RetrievalRepresentation>> = sorted.par_iter().map(|f| embedder(f)).collect();
        let mut vectors = Vec::with_capacity(sorted.len() * dim);
        for (f, rep) in sorted.iter().zip(reps) {
            let rep = rep?;
            if rep.kind != EmbedKind::Candidate {
                return Err(Error::InvalidArgument(format!("fragment {} embedded as a context", f.id())));
            }
            if rep.dim() != dim {
                return Err(Error::ShapeMismatch {
                    op: "index build",
                    left: (1, dim),
                    right: (1, rep.dim()),
                });
            }
            vectors.extend_from_slice(&rep.vector);
        }
        Ok(Self {
            dim,
            ids: sorted.iter().map(|f| f.id()).collect(),
            vectors,
            metadata,
        })
    }

    pub fn from_entries(dim: usize, entries: Vec<(FragmentId, Vec<f64>)>, metadata: IndexMetadata) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ZeroDimension("index dim"));
        }
        metadata.validate()?;
        let mut entries = entries;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument("duplicate fragment id".into()));
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for (id, v) in entries {
            if v.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "index entry",
                    left: (1, dim),
                    right: (1, v.len()),
                });
            }
            ids.push(id);
            vectors.extend(v);
        }
        Ok(Self {
            dim,
            ids,
            vectors,
            metadata,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[FragmentId] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn metadata(&self) -> &IndexMetadata {
        &self.metadata
    }

    /// Exact top-`k`; returns every entry when `k` exceeds the index size.
    pub fn search(&self, query: &RetrievalRepresentation, k: usize) -> Result<Vec<SearchHit>> {
        self.search_vector(&query.vector, k)
    }

    pub fn search_vector(&self, query: &[f64], k: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "index search",
                left: (1, self.dim),
                right: (1, query.len()),
            });
        }
        let scores: Vec<f64> = (0..self.len()).into_par_iter().map(|i| dot(query, self.vector(i))).collect();
        let mut ranked: Vec<(f64, &FragmentId)> = scores.into_iter().zip(&self.ids).collect();
        if k < ranked.len() {
            ranked.select_nth_unstable_by(k - 1, rank_order);
            ranked.truncate(k);
        }
        ranked.sort_by(rank_order);
        Ok(ranked
            .into_iter()
            .map(|(score, id)| SearchHit { id: id.clone(), score })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut table = Vec::new();
        for id in &self.ids {
            put_str(&mut table, &id.to_string());
        }
        let mut out = Vec::with_capacity(128 + self.vectors.len() * 8 + table.len());
        out.extend_from_slice(&INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(table.len() as u64).to_le_bytes());
        for (_, h) in self.metadata.fields() {
            put_str(&mut out, h);
        }
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&table);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = Cursor { bytes, pos: 0 };
        let short = |need: usize| {
            corrupt(format!(
                "truncated: expected at least {need} bytes, found {}",
                bytes.len()
            ))
        };
        let magic = r.take(8).ok_or_else(|| short(8))?;
        if magic != INDEX_MAGIC {
            return Err(corrupt("not an index file (bad magic)".into()));
        }
        let version = r.u32().ok_or_else(|| short(12))?;
        if version != INDEX_VERSION {
            return Err(corrupt(format!("unsupported index version {version}")));
        }
        let dim = r.u64().ok_or_else(|| short(20))? as usize;
        let count = r.u64().ok_or_else(|| short(28))? as usize;
        let id_bytes = r.u64().ok_or_else(|| short(36))? as usize;
        let mut hashes = Vec::with_capacity(3);
        for _ in 0..3 {
            let s = r.string().ok_or_else(|| short(r.pos + 2))?;
            hashes.push(s.map_err(|_| corrupt("invalid utf8 in header".into()))?);
        }
        if dim == 0 {
            return Err(corrupt("header declares dim 0".into()));
        }
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(id_bytes))
            .and_then(|n| n.checked_add(r.pos))
            .ok_or_else(|| corrupt("header sizes overflow".into()))?;
        if expected != bytes.len() {
            let what = if bytes.len() < expected { "truncated" } else { "trailing data" };
            return Err(corrupt(format!(
                "{what}: expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let vectors: Vec<f64> = r
            .take(count * dim * 8)
            .expect("length checked")
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut ids = Vec::with_capacity(count);
        for i in 0..count {
            let s = r
                .string()
                .ok_or_else(|| corrupt(format!("id table ends before entry {i}")))?
                .map_err(|_| corrupt(format!("invalid utf8 in id {i}")))?;
            ids.push(s.parse::<FragmentId>().map_err(|_| corrupt(format!("bad fragment id {s:?}")))?);
        }
        if r.pos != bytes.len() {
            return Err(corrupt("id table length disagrees with header".into()));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(corrupt("ids not strictly ascending".into()));
        }
        let mut hashes = hashes.into_iter();
        let mut next = || hashes.next().expect("three hashes");
        let metadata = IndexMetadata {
            model_hash: next(),
            adapter_hash: next(),
            corpus_hash: next(),
        };
        metadata.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(Self {
            dim,
            ids,
            vectors,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(crate::checkpoint::sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and compares the stored hashes with `expected`. Mismatches are
    /// logged as warnings, or returned as the first error when `strict`.
    pub fn load_checked(path: &Path, expected: &IndexMetadata, strict: bool) -> Result<(Self, Vec<Error>)> {
        let index = Self::load(path)?;
        let mut mismatches = index.metadata.mismatches(expected);
        if strict && !mismatches.is_empty() {
            return Err(mismatches.swap_remove(0));
        }
        for m in &mismatches {
            log::warn!("index {}: {m}", path.display());
        }
        Ok((index, mismatches))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn string(&mut self) -> Option<std::result::Result<String, std::string::FromUtf8Error>> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().ok()?) as usize;
        Some(String::from_utf8(self.take(n)?.to_vec()))
    }
}
