//! Speculative streaming: single-model speculative decoding with
//! multi-stream attention, tree drafting and parallel verification.

pub mod cli;
pub mod decoder;
pub mod error;
pub mod kv_cache;
pub mod model;
pub mod perf;
pub mod tensor;
pub mod training;
pub mod tree;

pub use decoder::{generate, reference_generate, DecodeMetrics, DecodeSession, GenerateParams, Sampling, StepResult};
pub use error::{Error, Result};
pub use kv_cache::KvCache;
pub use model::{FlatBatch, FlopCount, ForwardOutput, Model, ModelConfig, ModelWeights, StreamInit, StreamMode};
pub use tensor::{Precision, Tensor};
pub use tree::{build_mask, build_tree, msa_batch_size, prune, tree_size, TreeDraft, TreeNode};
