//! Deterministic stand-in for a pretrained text encoder.

use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub(crate) fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Maps each lower-cased word to a fixed pseudo-random vector seeded by its
/// hash. Same text, same embedding, on every platform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashTextEmbedder {
    pub dim: usize,
    pub max_tokens: usize,
}

impl HashTextEmbedder {
    pub fn new(dim: usize, max_tokens: usize) -> Self {
        Self { dim, max_tokens }
    }

    pub fn tokens(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .take(self.max_tokens)
            .map(str::to_lowercase)
            .collect()
    }

    /// `[tokens, dim]`; empty text gives a single zero row.
    pub fn embed<S: Scalar>(&self, text: &str) -> Tensor<S> {
        let words = self.tokens(text);
        if words.is_empty() {
            return Tensor::zeros(&[1, self.dim]);
        }
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut data = Vec::with_capacity(words.len() * self.dim);
        for w in &words {
            let mut r = rng::seeded(fnv1a(w));
            data.extend((0..self.dim).map(|_| S::from_f64(rng::normal::<f64>(&mut r) * scale)));
        }
        Tensor::new(vec![words.len(), self.dim], data).expect("embedding shape")
    }
}
