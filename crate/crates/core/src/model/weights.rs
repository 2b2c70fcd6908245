use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, StreamInit, StreamMode};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Standard deviation of the random initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm_gain: Tensor,
    pub ffn_norm_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// A rank-limited linear map `x ↦ (x·down)·up`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRank {
    pub down: Tensor,
    pub up: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
    /// Shared LM head, `hidden × vocab`.
    pub lm_head: Tensor,
    /// One identifier embedding per stream (embedding mode only).
    pub stream_embeddings: Vec<Tensor>,
    /// Absent when streams are initialized with the identity map.
    pub stream_init: Option<LowRank>,
    pub prune_adapter: LowRank,
}

/// Coarse parameter grouping, used for reporting and gradient-check coverage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamClass {
    Embedding,
    Attention,
    FeedForward,
    Norm,
    LmHead,
    StreamEmbedding,
    StreamInit,
    PruneAdapter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Fill {
    Normal,
    Ones,
    Zeros,
}

/// One entry of the canonical tensor layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub class: ParamClass,
    fill: Fill,
}

fn spec(name: String, shape: Vec<usize>, class: ParamClass, fill: Fill) -> TensorSpec {
    TensorSpec { name, shape, class, fill }
}

pub fn stream_embedding_name(j: usize) -> String {
    format!("stream_embedding[{j}]")
}

/// Every tensor a config requires, in canonical order.
pub fn tensor_layout(config: &ModelConfig) -> Vec<TensorSpec> {
    use Fill::*;
    use ParamClass::*;
    let (v, h, f) = (config.vocab_size, config.hidden_size, config.ffn_size());
    let mut out = vec![
        spec("token_embedding".into(), vec![v, h], Embedding, Normal),
        spec("position_embedding".into(), vec![config.max_seq_len, h], Embedding, Normal),
    ];
    for i in 0..config.num_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        out.extend([
            spec(p("attn_norm.gain"), vec![h], Norm, Ones),
            spec(p("attn_norm.bias"), vec![h], Norm, Zeros),
            spec(p("attn.wq"), vec![h, h], Attention, Normal),
            spec(p("attn.wk"), vec![h, h], Attention, Normal),
            spec(p("attn.wv"), vec![h, h], Attention, Normal),
            spec(p("attn.wo"), vec![h, h], Attention, Normal),
            spec(p("ffn_norm.gain"), vec![h], Norm, Ones),
            spec(p("ffn_norm.bias"), vec![h], Norm, Zeros),
            spec(p("ffn.w1"), vec![h, f], FeedForward, Normal),
            spec(p("ffn.b1"), vec![f], FeedForward, Zeros),
            spec(p("ffn.w2"), vec![f, h], FeedForward, Normal),
            spec(p("ffn.b2"), vec![h], FeedForward, Zeros),
        ]);
    }
    out.extend([
        spec("final_norm.gain".into(), vec![h], Norm, Ones),
        spec("final_norm.bias".into(), vec![h], Norm, Zeros),
        spec("lm_head".into(), vec![h, v], LmHead, Normal),
    ]);
    if config.stream_mode == StreamMode::Embedding {
        for j in 1..=config.num_streams {
            out.push(spec(stream_embedding_name(j), vec![h], StreamEmbedding, Normal));
        }
    }
    if let super::config::StreamInit::LowRank { rank } = config.stream_init {
        out.push(spec("stream_init.down".into(), vec![h, rank], StreamInit, Normal));
        out.push(spec("stream_init.up".into(), vec![rank, h], StreamInit, Normal));
    }
    let t = config.prune_rank;
    out.push(spec("prune_adapter.down".into(), vec![h, t], PruneAdapter, Normal));
    out.push(spec("prune_adapter.up".into(), vec![t, h], PruneAdapter, Normal));
    out
}

impl ModelWeights {
    /// Assembles weights from named tensors, validating them against `config`.
    pub fn from_named(config: &ModelConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        if config.stream_mode == StreamMode::Rotation {
            if let Some(name) = named.keys().find(|n| n.starts_with("stream_embedding")) {
                return Err(Error::load(name.clone(), "stream embeddings are not allowed in rotation mode"));
            }
        }
        if config.stream_init == StreamInit::Identity {
            if let Some(name) = named.keys().find(|n| n.starts_with("stream_init")) {
                return Err(Error::load(name.clone(), "identity stream init takes no tensors"));
            }
        }
        let layout = tensor_layout(config);
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = named.remove(name).ok_or_else(|| Error::load(name, "missing tensor"))?;
            if t.shape() != shape {
                return Err(Error::load(name, format!("expected shape {shape:?}, found {:?}", t.shape())));
            }
            Ok(t)
        };
        let mut by_name = BTreeMap::new();
        for s in &layout {
            by_name.insert(s.name.clone(), take(&s.name, &s.shape)?);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::load(extra.clone(), "tensor not used by this config"));
        }
        let mut get = |n: &str| by_name.remove(n).expect("layout names are present");
        let layers = (0..config.num_layers)
            .map(|i| {
                let mut g = |s: &str| get(&format!("layers.{i}.{s}"));
                LayerWeights {
                    attn_norm_gain: g("attn_norm.gain"),
                    attn_norm_bias: g("attn_norm.bias"),
                    wq: g("attn.wq"),
                    wk: g("attn.wk"),
                    wv: g("attn.wv"),
                    wo: g("attn.wo"),
                    ffn_norm_gain: g("ffn_norm.gain"),
                    ffn_norm_bias: g("ffn_norm.bias"),
                    w1: g("ffn.w1"),
                    b1: g("ffn.b1"),
                    w2: g("ffn.w2"),
                    b2: g("ffn.b2"),
                }
            })
            .collect();
        let stream_embeddings = match config.stream_mode {
            StreamMode::Embedding => (1..=config.num_streams).map(|j| get(&stream_embedding_name(j))).collect(),
            StreamMode::Rotation => Vec::new(),
        };
        let stream_init = match config.stream_init {
            StreamInit::Identity => None,
            StreamInit::LowRank { .. } => Some(LowRank { down: get("stream_init.down"), up: get("stream_init.up") }),
        };
        Ok(ModelWeights {
            token_embedding: get("token_embedding"),
            position_embedding: get("position_embedding"),
            layers,
            final_norm_gain: get("final_norm.gain"),
            final_norm_bias: get("final_norm.bias"),
            lm_head: get("lm_head"),
            stream_embeddings,
            stream_init,
            prune_adapter: LowRank { down: get("prune_adapter.down"), up: get("prune_adapter.up") },
        })
    }

    /// Seeded random initialization: N(0, 0.02²) for matrices and embeddings,
    /// ones for norm gains, zeros for biases.
    pub fn init(config: &ModelConfig, seed: u64, precision: Precision) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut named = BTreeMap::new();
        for s in tensor_layout(config) {
            let n: usize = s.shape.iter().product();
            let data = match s.fill {
                Fill::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Fill::Ones => vec![1.0; n],
                Fill::Zeros => vec![0.0; n],
            };
            named.insert(s.name, Tensor::new(s.shape, data, precision)?);
        }
        ModelWeights::from_named(config, named)
    }

    /// Same layout, all zeros (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|x| *x = 0.0));
        z
    }

    /// Visits every tensor with its canonical name, in layout order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("token_embedding".into(), &self.token_embedding);
        f("position_embedding".into(), &self.position_embedding);
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            f(p("attn_norm.gain"), &l.attn_norm_gain);
            f(p("attn_norm.bias"), &l.attn_norm_bias);
            f(p("attn.wq"), &l.wq);
            f(p("attn.wk"), &l.wk);
            f(p("attn.wv"), &l.wv);
            f(p("attn.wo"), &l.wo);
            f(p("ffn_norm.gain"), &l.ffn_norm_gain);
            f(p("ffn_norm.bias"), &l.ffn_norm_bias);
            f(p("ffn.w1"), &l.w1);
            f(p("ffn.b1"), &l.b1);
            f(p("ffn.w2"), &l.w2);
            f(p("ffn.b2"), &l.b2);
        }
        f("final_norm.gain".into(), &self.final_norm_gain);
        f("final_norm.bias".into(), &self.final_norm_bias);
        f("lm_head".into(), &self.lm_head);
        for (j, p) in self.stream_embeddings.iter().enumerate() {
            f(stream_embedding_name(j + 1), p);
        }
        if let Some(si) = &self.stream_init {
            f("stream_init.down".into(), &si.down);
            f("stream_init.up".into(), &si.up);
        }
        f("prune_adapter.down".into(), &self.prune_adapter.down);
        f("prune_adapter.up".into(), &self.prune_adapter.up);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("token_embedding".into(), &mut self.token_embedding);
        f("position_embedding".into(), &mut self.position_embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            f(p("attn_norm.gain"), &mut l.attn_norm_gain);
            f(p("attn_norm.bias"), &mut l.attn_norm_bias);
            f(p("attn.wq"), &mut l.wq);
            f(p("attn.wk"), &mut l.wk);
            f(p("attn.wv"), &mut l.wv);
            f(p("attn.wo"), &mut l.wo);
            f(p("ffn_norm.gain"), &mut l.ffn_norm_gain);
            f(p("ffn_norm.bias"), &mut l.ffn_norm_bias);
            f(p("ffn.w1"), &mut l.w1);
            f(p("ffn.b1"), &mut l.b1);
            f(p("ffn.w2"), &mut l.w2);
            f(p("ffn.b2"), &mut l.b2);
        }
        f("final_norm.gain".into(), &mut self.final_norm_gain);
        f("final_norm.bias".into(), &mut self.final_norm_bias);
        f("lm_head".into(), &mut self.lm_head);
        for (j, p) in self.stream_embeddings.iter_mut().enumerate() {
            f(stream_embedding_name(j + 1), p);
        }
        if let Some(si) = &mut self.stream_init {
            f("stream_init.down".into(), &mut si.down);
            f("stream_init.up".into(), &mut si.up);
        }
        f("prune_adapter.down".into(), &mut self.prune_adapter.down);
        f("prune_adapter.up".into(), &mut self.prune_adapter.up);
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Parameters beyond the plain decoder: stream embeddings, stream-init
    /// factors and the pruning adapter.
    pub fn extra_parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |name, t| {
            if name.starts_with("stream_") || name.starts_with("prune_adapter") {
                n += t.len();
            }
        });
        n
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.visit_mut(&mut |_, t| {
            let owned = std::mem::replace(t, Tensor::zeros(vec![0], precision));
            *t = owned.with_precision(precision);
        });
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visit_order_matches_layout() {
        let mut cfg = ModelConfig::micro();
        cfg.stream_init = StreamInit::LowRank { rank: 3 };
        let w = ModelWeights::init(&cfg, 1, Precision::F64).unwrap();
        let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        let layout: Vec<String> = tensor_layout(&cfg).into_iter().map(|s| s.name).collect();
        assert_eq!(names, layout);
    }

    #[test]
    fn extra_parameters_identity_init() {
        let cfg = ModelConfig { num_streams: 4, hidden_size: 16, prune_rank: 3, ..ModelConfig::micro() };
        let w = ModelWeights::init(&cfg, 0, Precision::F32).unwrap();
        let (g, h, t) = (4, 16, 3);
        assert_eq!(w.extra_parameter_count(), g * h + 2 * h * t);
    }

    #[test]
    fn rotation_mode_has_no_stream_embeddings() {
        let cfg = ModelConfig { stream_mode: StreamMode::Rotation, ..ModelConfig::micro() };
        let w = ModelWeights::init(&cfg, 0, Precision::F32).unwrap();
        assert!(w.stream_embeddings.is_empty());
        assert_eq!(w.extra_parameter_count(), 2 * 8 * 2);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::micro();
        let a = ModelWeights::init(&cfg, 7, Precision::F32).unwrap();
        let b = ModelWeights::init(&cfg, 7, Precision::F32).unwrap();
        let c = ModelWeights::init(&cfg, 8, Precision::F32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
