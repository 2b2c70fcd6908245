//! Analytic latency comparison against draft-target speculative decoding,
//! and closed-form multiply-add counts for a forward pass.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FlopCount, ModelConfig, StreamInit, StreamMode};

/// Latency inputs in abstract units per forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfParams {
    pub gamma: f64,
    pub c_draft: f64,
    pub c_target: f64,
    pub c_ss: f64,
    /// Tokens per verification cycle of draft-target decoding.
    pub zeta: f64,
    /// Tokens per forward pass of speculative streaming.
    pub beta: f64,
}

impl PerfParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma, self.c_draft, self.c_target, self.c_ss, self.zeta, self.beta];
        if all.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || self.c_ss <= 0.0 || self.zeta <= 0.0 {
            return Err(Error::param("latency parameters must be finite, costs and ζ positive"));
        }
        if self.zeta > self.gamma + 1.0 || self.beta > self.gamma + 1.0 {
            return Err(Error::param("ζ and β cannot exceed γ + 1"));
        }
        Ok(())
    }
}

/// Draft-target tokens per cycle needed to match speculative streaming:
/// `ζ* = β(γ·C_draft + C_target) / C_ss`. `zeta` is ignored.
pub fn parity_zeta(p: &PerfParams) -> f64 {
    p.beta * (p.gamma * p.c_draft + p.c_target) / p.c_ss
}

/// Per-token latency of draft-target decoding over that of speculative
/// streaming; above 1 streaming is faster.
pub fn speedup_over_draft_target(p: &PerfParams) -> f64 {
    ((p.gamma * p.c_draft + p.c_target) / p.zeta) / (p.c_ss / p.beta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    /// `C_target / C_draft`.
    pub ratio: f64,
    pub zeta_over_beta: f64,
    pub speedup: f64,
}

/// Target/draft ratios 2..=20 against ζ/β from 0.5 to 2.0 in steps of 0.1,
/// with `C_ss = C_target` and `β = 1`.
pub fn speedup_grid(gamma: f64) -> Vec<GridCell> {
    let mut out = Vec::with_capacity(19 * 16);
    for ratio in 2..=20 {
        for tenth in 5..=20 {
            let zob = tenth as f64 / 10.0;
            let p =
                PerfParams { gamma, c_draft: 1.0, c_target: ratio as f64, c_ss: ratio as f64, zeta: zob, beta: 1.0 };
            out.push(GridCell { ratio: ratio as f64, zeta_over_beta: zob, speedup: speedup_over_draft_target(&p) });
        }
    }
    out
}

pub fn write_grid_csv(grid: &[GridCell], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["ratio", "zeta_over_beta", "speedup"])?;
    for c in grid {
        w.write_record([c.ratio.to_string(), c.zeta_over_beta.to_string(), c.speedup.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Shape of one forward call: `nodes` new rows after `context` cached
/// positions, node depths summing to `depth_sum`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopWorkload {
    pub context: usize,
    pub nodes: usize,
    pub depth_sum: usize,
    pub streams: usize,
}

impl FlopWorkload {
    /// A causal run of `len` tokens.
    pub fn causal(context: usize, len: usize, streams: usize) -> Self {
        FlopWorkload { context, nodes: len, depth_sum: len * len.saturating_sub(1) / 2, streams }
    }

    /// An unpruned draft tree with `streams` levels of `k` candidates.
    pub fn tree(context: usize, streams: usize, k: usize) -> Self {
        let nodes = crate::tree::tree_size(streams, k);
        let depth_sum = (1..=streams).map(|g| g * k.pow(g as u32)).sum();
        FlopWorkload { context, nodes, depth_sum, streams }
    }
}

/// Closed-form multiply-adds of an unpruned forward, split the same way as
/// the counter in [`crate::model::Model::forward`].
pub fn flop_estimate(config: &ModelConfig, w: &FlopWorkload) -> FlopCount {
    let (h, v) = (config.hidden_size as u64, config.vocab_size as u64);
    let (n, c, ds, g) = (w.nodes as u64, w.context as u64, w.depth_sum as u64, w.streams as u64);
    let layer_main = n * 12 * h * h + 2 * h * (n * (c + 1) + ds);
    let layer_stream = g * (n * 12 * h * h + 2 * h * (n * (c + 1) + ds)) + 2 * h * n * g * (g + 1) / 2;
    let stream_init = match (config.stream_init, config.stream_mode) {
        (StreamInit::LowRank { rank }, StreamMode::Embedding) => n * g * 2 * h * rank as u64,
        _ => 0,
    };
    FlopCount {
        main: config.num_layers as u64 * layer_main + n * h * v,
        stream_layers: config.msa_layers as u64 * layer_stream,
        stream_head: n * g * h * v + stream_init,
        prune: 0,
    }
}

/// Stream-row layer cost relative to running all `1 + γ` rows through
/// every layer.
pub fn stream_share(config: &ModelConfig, w: &FlopWorkload) -> f64 {
    let full = ModelConfig { msa_layers: config.num_layers, ..config.clone() };
    let own = flop_estimate(config, w);
    let all = flop_estimate(&full, w);
    let head = (w.nodes * config.hidden_size * config.vocab_size) as f64;
    own.stream_layers as f64 / (all.main as f64 - head + all.stream_layers as f64)
}
