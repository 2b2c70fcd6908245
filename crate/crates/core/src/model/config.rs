use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How speculative streams are told apart from the main stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Learned per-stream identifier embeddings added at stream insertion.
    #[default]
    Embedding,
    /// Streams start as copies of the main state; stream `n` rotates its
    /// value projections by `n·ε`.
    Rotation,
}

impl std::str::FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(StreamMode::Embedding),
            "rotation" => Ok(StreamMode::Rotation),
            other => Err(Error::param(format!("unknown stream mode {other:?}"))),
        }
    }
}

/// Transform from main-stream state to initial stream state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamInit {
    #[default]
    Identity,
    LowRank {
        rank: usize,
    },
}

fn default_eps() -> f64 {
    1e-5
}

/// Shape of a model. Serialized verbatim as the config document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// Number of top layers running multi-stream attention.
    pub msa_layers: usize,
    /// Speculative streams (0 turns the model into a plain decoder).
    pub num_streams: usize,
    #[serde(default)]
    pub stream_init: StreamInit,
    /// Rank of the early-exit pruning adapter.
    pub prune_rank: usize,
    #[serde(default)]
    pub stream_mode: StreamMode,
    /// Rotation step in radians, used only in rotation mode.
    #[serde(default)]
    pub rotation_step: f64,
    pub max_seq_len: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// The 11-token, width-8 configuration used throughout the tests.
    pub fn micro() -> Self {
        ModelConfig {
            vocab_size: 11,
            hidden_size: 8,
            num_heads: 2,
            num_layers: 2,
            msa_layers: 1,
            num_streams: 2,
            stream_init: StreamInit::Identity,
            prune_rank: 2,
            stream_mode: StreamMode::Embedding,
            rotation_step: 0.0,
            max_seq_len: 32,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.hidden_size == 0 || self.num_heads == 0 {
            return fail("vocab_size, hidden_size and num_heads must be positive".into());
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return fail(format!("hidden_size {} is not divisible by num_heads {}", self.hidden_size, self.num_heads));
        }
        if self.msa_layers == 0 || self.msa_layers >= self.num_layers {
            return fail(format!(
                "msa_layers must satisfy 1 <= msa_layers < num_layers (got {} of {})",
                self.msa_layers, self.num_layers
            ));
        }
        if self.prune_rank == 0 {
            return fail("prune_rank must be positive".into());
        }
        if let StreamInit::LowRank { rank } = self.stream_init {
            if rank == 0 {
                return fail("stream_init rank must be positive".into());
            }
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return fail("norm_eps must be positive".into());
        }
        if self.stream_mode == StreamMode::Rotation {
            if !self.hidden_size.is_multiple_of(2) {
                return fail("rotation mode needs an even hidden_size".into());
            }
            let limit = std::f64::consts::PI / (2.0 * (self.max_seq_len + self.num_streams) as f64);
            if !(0.0..=limit).contains(&self.rotation_step) {
                return fail(format!("rotation_step must lie in [0, {limit}]"));
            }
        }
        Ok(())
    }

    /// Index of the first multi-stream layer; streams are inserted here.
    pub fn split_layer(&self) -> usize {
        self.num_layers - self.msa_layers
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn ffn_size(&self) -> usize {
        4 * self.hidden_size
    }
}
