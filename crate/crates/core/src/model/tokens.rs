use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of byte tokens; ids `0..256` are raw bytes.
pub const BYTE_VOCAB: usize = 256;
/// Begin-of-sequence token.
pub const BOS: u32 = 256;
/// Marks a sequence as a retrieval candidate; inserted right after BOS.
pub const CANDIDATE_PREFIX: u32 = 257;
pub const MIN_VOCAB: usize = 258;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize, max_len: usize) -> Result<Self> {
        if ids.len() > max_len {
            return Err(Error::WindowOverflow {
                len: ids.len(),
                max: max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: vocab_size,
            });
        }
        Ok(Self { ids })
    }

    pub(crate) fn from_ids_unchecked(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn last(&self) -> Option<u32> {
        self.ids.last().copied()
    }

    /// Tokens after position `start`, as bytes (specials dropped).
    pub fn bytes_from(&self, start: usize) -> Vec<u8> {
        detokenize_ids(&self.ids[start.min(self.ids.len())..])
    }
}

/// BOS followed by one token per byte.
pub fn tokenize(text: &[u8], max_seq_len: usize) -> Result<TokenSequence> {
    let len = text.len() + 1;
    if len > max_seq_len {
        return Err(Error::WindowOverflow {
            len,
            max: max_seq_len,
        });
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(BOS);
    ids.extend(text.iter().map(|&b| u32::from(b)));
    Ok(TokenSequence { ids })
}

/// Candidate form: BOS, CANDIDATE_PREFIX, then bytes.
pub fn tokenize_candidate(text: &[u8], max_seq_len: usize) -> Result<TokenSequence> {
    let len = text.len() + 2;
    if len > max_seq_len {
        return Err(Error::WindowOverflow {
            len,
            max: max_seq_len,
        });
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(BOS);
    ids.push(CANDIDATE_PREFIX);
    ids.extend(text.iter().map(|&b| u32::from(b)));
    Ok(TokenSequence { ids })
}

pub fn detokenize(tokens: &TokenSequence) -> Vec<u8> {
    detokenize_ids(&tokens.ids)
}

fn detokenize_ids(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| (id as usize) < BYTE_VOCAB)
        .map(|&id| id as u8)
        .collect()
}
