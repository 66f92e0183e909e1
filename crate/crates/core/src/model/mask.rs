//! Chunk-level attention masks.

use crate::error::{Error, Result};

/// Block mask over chunks. Query chunk `i` sees key chunk `j` iff
/// `j <= i`, `i - j < window` and, when `mask_first_for_last` is set,
/// not (`i` is the last chunk and `j == 0`). Within a chunk attention is full.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub n_chunks: usize,
    pub tokens_per_chunk: usize,
    pub window: usize,
    pub mask_first_for_last: bool,
}

pub fn build_chunk_causal_mask(
    n_chunks: usize,
    tokens_per_chunk: usize,
    window: usize,
    mask_first_for_last: bool,
) -> Result<AttentionMask> {
    if n_chunks == 0 || tokens_per_chunk == 0 || window == 0 {
        return Err(Error::invalid(format!(
            "chunk mask needs positive sizes, got {n_chunks} chunks x {tokens_per_chunk} tokens, window {window}"
        )));
    }
    Ok(AttentionMask {
        n_chunks,
        tokens_per_chunk,
        window,
        mask_first_for_last,
    })
}

impl AttentionMask {
    /// Fully bidirectional mask over `tokens` tokens.
    pub fn full(tokens: usize) -> Self {
        Self {
            n_chunks: 1,
            tokens_per_chunk: tokens,
            window: 1,
            mask_first_for_last: false,
        }
    }

    pub fn tokens(&self) -> usize {
        self.n_chunks * self.tokens_per_chunk
    }

    pub fn chunk_visible(&self, query: usize, key: usize) -> bool {
        if key > query || query - key >= self.window {
            return false;
        }
        !(self.mask_first_for_last && self.n_chunks > 1 && query == self.n_chunks - 1 && key == 0)
    }

    /// Key chunks visible from `query`, ascending.
    pub fn visible_chunks(&self, query: usize) -> Vec<usize> {
        (0..=query).filter(|&k| self.chunk_visible(query, k)).collect()
    }

    /// Row-major `[tokens, tokens]` boolean matrix.
    pub fn dense(&self) -> Vec<bool> {
        let n = self.tokens();
        let tpc = self.tokens_per_chunk;
        let mut out = Vec::with_capacity(n * n);
        for q in 0..n {
            for k in 0..n {
                out.push(self.chunk_visible(q / tpc, k / tpc));
            }
        }
        out
    }

    pub fn is_full(&self) -> bool {
        self.n_chunks == 1
    }
}
