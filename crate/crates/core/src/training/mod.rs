//! Joint next-token and future-token training on synthetic languages.

mod language;
mod objective;
mod trainer;

pub use language::{LanguageKind, SyntheticLanguage};
pub use objective::{early_exit_loss, loss_breakdown, loss_gradients, speculative_loss, Gradients, LossBreakdown};
pub use trainer::{train, write_curve_csv, Checkpointing, LossRecord, Optimizer, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `α_0` weighs the next-token term, `α_j` the stream-`j` term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alphas: Vec<f64>,
}

impl LossWeights {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        let w = LossWeights { alphas };
        w.validate()?;
        Ok(w)
    }

    /// Next-token loss only.
    pub fn standard(streams: usize) -> Self {
        let mut alphas = vec![0.0; streams + 1];
        alphas[0] = 1.0;
        LossWeights { alphas }
    }

    /// `α_0 = 1` and every stream weighted `stream_weight`.
    pub fn with_stream_weight(streams: usize, stream_weight: f64) -> Self {
        let mut alphas = vec![stream_weight; streams + 1];
        alphas[0] = 1.0;
        LossWeights { alphas }
    }

    pub fn streams(&self) -> usize {
        self.alphas.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::param("loss weights need at least α_0"));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
            return Err(Error::param(format!("loss weight {a} must be finite and non-negative")));
        }
        Ok(())
    }
}

/// Context tokens followed by the target tokens the loss scores.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub context: Vec<u32>,
    pub targets: Vec<u32>,
}

impl TrainExample {
    /// Splits `seq` after `context_len` tokens.
    pub fn from_sequence(seq: &[u32], context_len: usize) -> Result<Self> {
        if context_len == 0 || context_len >= seq.len() {
            return Err(Error::param(format!(
                "context of {context_len} tokens must be non-empty and shorter than the sequence ({})",
                seq.len()
            )));
        }
        Ok(TrainExample { context: seq[..context_len].to_vec(), targets: seq[context_len..].to_vec() })
    }

    pub fn sequence(&self) -> Vec<u32> {
        let mut s = self.context.clone();
        s.extend_from_slice(&self.targets);
        s
    }

    pub(crate) fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.context.is_empty() || self.targets.is_empty() {
            return Err(Error::param("examples need context and targets"));
        }
        // the last target is never an input
        let inputs = self.context.len() + self.targets.len() - 1;
        if inputs > max_seq_len {
            return Err(Error::capacity(format!("example needs {inputs} positions, model has {max_seq_len}")));
        }
        Ok(())
    }
}
