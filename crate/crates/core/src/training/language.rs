//! Deterministic toy languages. Each token fully determines the next one,
//! so a converged model can predict arbitrarily far ahead.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageKind {
    /// `next = (cur + 1) mod v`.
    Counting,
    /// A fixed motif of distinct tokens repeated forever.
    RepeatedMotif { period: usize },
    /// `next = perm[cur]` for a seeded permutation of the vocabulary.
    KeyedLookup,
}

impl std::str::FromStr for LanguageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counting" => Ok(LanguageKind::Counting),
            "keyed-lookup" | "keyed_lookup" => Ok(LanguageKind::KeyedLookup),
            _ => {
                let period = s
                    .strip_prefix("motif:")
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| Error::param(format!("unknown language {s:?}")))?;
                Ok(LanguageKind::RepeatedMotif { period })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticLanguage {
    kind: LanguageKind,
    vocab: usize,
    seed: u64,
    /// Successor of each token; `None` for tokens that never occur.
    next: Vec<Option<u32>>,
}

impl SyntheticLanguage {
    pub fn new(kind: LanguageKind, vocab: usize, seed: u64) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::param("a language needs at least 2 tokens"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<u32> = (0..vocab as u32).collect();
        perm.shuffle(&mut rng);
        let next = match kind {
            LanguageKind::Counting => (0..vocab).map(|t| Some(((t + 1) % vocab) as u32)).collect(),
            LanguageKind::KeyedLookup => perm.iter().map(|&p| Some(p)).collect(),
            LanguageKind::RepeatedMotif { period } => {
                if !(2..=vocab).contains(&period) {
                    return Err(Error::param(format!("motif period {period} must be in 2..={vocab}")));
                }
                let mut next = vec![None; vocab];
                for i in 0..period {
                    next[perm[i] as usize] = Some(perm[(i + 1) % period]);
                }
                next
            }
        };
        Ok(SyntheticLanguage { kind, vocab, seed, next })
    }

    pub fn counting(vocab: usize) -> Self {
        SyntheticLanguage::new(LanguageKind::Counting, vocab, 0).expect("vocab ≥ 2")
    }

    pub fn kind(&self) -> LanguageKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The unique continuation of `token`, if the token occurs at all.
    pub fn successor(&self, token: u32) -> Option<u32> {
        self.next.get(token as usize).copied().flatten()
    }

    /// Tokens that can start a sequence.
    pub fn alphabet(&self) -> Vec<u32> {
        (0..self.vocab as u32).filter(|&t| self.next[t as usize].is_some()).collect()
    }

    /// `len` tokens starting from `start`.
    pub fn continue_from(&self, start: u32, len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut cur = start;
        for _ in 0..len {
            out.push(cur);
            cur = self.successor(cur).expect("start comes from the alphabet");
        }
        out
    }

    /// A sequence of `len` tokens from a random starting token.
    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<u32> {
        let alphabet = self.alphabet();
        let start = alphabet[rng.random_range(0..alphabet.len())];
        self.continue_from(start, len)
    }
}
