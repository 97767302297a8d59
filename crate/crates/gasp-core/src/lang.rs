//! Synthetic language channel: a random bigram grammar whose sentences
//! are the instruction strings attached to each training sequence.
//!
//! Every token has exactly four equally likely successors, so the best
//! achievable next-token cross-entropy is exactly ln 4. That gives the
//! language loss a known floor: an untrained model sits near ln(vocab),
//! and training should move it toward the floor without ever crossing it
//! (in expectation).

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng::{derive_seed, rng_from_seed, DetRng};
use crate::scalar;

pub const SUCCESSORS_PER_TOKEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LangError {
    #[error("vocabulary must have at least {SUCCESSORS_PER_TOKEN} tokens")]
    VocabTooSmall,
    #[error("sentence length must be at least 2")]
    SentenceTooShort,
}

/// Fixed random bigram grammar over a small vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateGrammar {
    vocab_size: usize,
    /// Four distinct successors per token, sorted for determinism.
    successors: Vec<[u32; SUCCESSORS_PER_TOKEN]>,
}

impl SurrogateGrammar {
    pub fn new(vocab_size: usize, seed: u64) -> Result<Self, LangError> {
        if vocab_size < SUCCESSORS_PER_TOKEN {
            return Err(LangError::VocabTooSmall);
        }
        let mut rng = rng_from_seed(derive_seed(seed, "surrogate-grammar"));
        let all: Vec<u32> = (0..vocab_size as u32).collect();
        let successors = (0..vocab_size)
            .map(|_| {
                let mut picked: Vec<u32> = all
                    .choose_multiple(&mut rng, SUCCESSORS_PER_TOKEN)
                    .copied()
                    .collect();
                picked.sort_unstable();
                [picked[0], picked[1], picked[2], picked[3]]
            })
            .collect();
        Ok(Self { vocab_size, successors })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn successors(&self, token: u32) -> &[u32; SUCCESSORS_PER_TOKEN] {
        &self.successors[token as usize]
    }

    pub fn is_valid_transition(&self, from: u32, to: u32) -> bool {
        self.successors[from as usize].contains(&to)
    }

    /// Cross-entropy of the optimal next-token predictor on this grammar.
    pub fn ideal_cross_entropy(&self) -> f64 {
        scalar::ln(SUCCESSORS_PER_TOKEN as f64)
    }

    /// Uniform start token followed by a uniform successor chain.
    pub fn sample_sentence(&self, len: usize, rng: &mut DetRng) -> Result<Vec<u32>, LangError> {
        if len < 2 {
            return Err(LangError::SentenceTooShort);
        }
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.gen_range(0..self.vocab_size as u32);
        out.push(cur);
        for _ in 1..len {
            let next = self.successors[cur as usize][rng.gen_range(0..SUCCESSORS_PER_TOKEN)];
            out.push(next);
            cur = next;
        }
        Ok(out)
    }
}
