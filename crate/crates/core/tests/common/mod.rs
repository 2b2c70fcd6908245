#![allow(dead_code)]

use specstream::{Model, ModelConfig, Precision, StreamInit, StreamMode, Tensor};

pub const COUNT_VOCAB: usize = 11;

/// A hand-built model that always predicts `(u + 1) mod 11` after token `u`.
///
/// Token `u` embeds as the unit vector `e_u` in a width-12 residual stream;
/// every attention and feed-forward output is zero, so the final hidden
/// state is `e_u` and the head row `u` puts its weight on `u + 1`. Streams
/// see the same state and therefore draft the wrong token.
pub fn counting_model(streams: usize, precision: Precision) -> Model {
    let (v, h) = (COUNT_VOCAB, 12);
    let cfg = ModelConfig {
        vocab_size: v,
        hidden_size: h,
        num_heads: 2,
        num_layers: 2,
        msa_layers: 1,
        num_streams: streams,
        stream_init: StreamInit::Identity,
        prune_rank: 2,
        stream_mode: StreamMode::Embedding,
        rotation_step: 0.0,
        max_seq_len: 32,
        norm_eps: 1e-5,
    };
    let mut m = Model::init(cfg, 0, precision).unwrap();
    m.weights.visit_mut(&mut |name, t| {
        if !name.contains("norm.gain") {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    });
    for u in 0..v {
        m.weights.token_embedding.row_mut(u)[u] = 1.0;
        m.weights.lm_head.row_mut(u)[(u + 1) % v] = 1.0;
    }
    m
}

pub fn random_model(cfg: ModelConfig, seed: u64) -> Model {
    Model::init(cfg, seed, Precision::F32).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
