//! Add-k smoothed word bigram language model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::normalize_words;

/// Outcomes are the training vocabulary, an unknown-word token and end of
/// sentence; contexts are the vocabulary, unknown and begin of sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BigramLm {
    words: Vec<String>,
    index: HashMap<String, usize>,
    k: f64,
    pairs: HashMap<(usize, usize), u64>,
    contexts: HashMap<usize, u64>,
}

impl BigramLm {
    /// Fits on normalized training sentences.
    pub fn fit<S: AsRef<str>>(sentences: &[S], k: f64) -> Result<Self> {
        if !(k > 0.0) {
            return Err(Error::Config(format!("add-k smoothing needs k > 0, got {k}")));
        }
        let mut words: Vec<String> = sentences
            .iter()
            .flat_map(|s| normalize_words(s.as_ref()))
            .collect();
        words.sort();
        words.dedup();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let mut lm = Self {
            words,
            index,
            k,
            pairs: HashMap::new(),
            contexts: HashMap::new(),
        };
        for s in sentences {
            let ids = lm.encode(s.as_ref());
            let mut prev = lm.bos();
            for id in ids.into_iter().chain([lm.eos()]) {
                *lm.pairs.entry((prev, id)).or_default() += 1;
                *lm.contexts.entry(prev).or_default() += 1;
                prev = id;
            }
        }
        Ok(lm)
    }

    pub fn vocab(&self) -> &[String] {
        &self.words
    }

    pub fn unk(&self) -> usize {
        self.words.len()
    }

    pub fn eos(&self) -> usize {
        self.words.len() + 1
    }

    pub fn bos(&self) -> usize {
        self.words.len() + 1
    }

    /// Size of the outcome space (vocabulary, unknown, end of sentence).
    pub fn outcomes(&self) -> usize {
        self.words.len() + 2
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        normalize_words(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(self.unk()))
            .collect()
    }

    /// `ln p(next | prev)` with ids from the outcome space; `prev` equal to
    /// [`BigramLm::bos`] means the sentence start.
    pub fn log_prob(&self, prev: usize, next: usize) -> f64 {
        let c = self.pairs.get(&(prev, next)).copied().unwrap_or(0) as f64;
        let n = self.contexts.get(&prev).copied().unwrap_or(0) as f64;
        ((c + self.k) / (n + self.k * self.outcomes() as f64)).ln()
    }

    /// Sum of bigram log-probabilities over the words of `text` divided by
    /// the word count. The end-of-sentence transition is not scored, except
    /// for empty text, which scores `ln p(EOS | BOS)`.
    pub fn score(&self, text: &str) -> f64 {
        let ids = self.encode(text);
        if ids.is_empty() {
            return self.log_prob(self.bos(), self.eos());
        }
        let mut prev = self.bos();
        let mut total = 0.0;
        for &id in &ids {
            total += self.log_prob(prev, id);
            prev = id;
        }
        total / ids.len() as f64
    }
}
