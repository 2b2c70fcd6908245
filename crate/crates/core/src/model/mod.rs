//! Decoder-only transformer whose top layers run multi-stream attention.
//!
//! Layers `0..split` are ordinary causal (or tree-masked) attention blocks
//! over main-stream tokens. At `split = num_layers − msa_layers` each main
//! position spawns `γ` speculative stream states, and the remaining layers
//! process main and stream rows together: main rows attend only to main
//! rows, stream `j` of position `t` attends to the main context visible to
//! `t` plus streams `1..=j` of the same position. Stream `j` predicts the
//! token `j` steps beyond the main stream's prediction.

mod block;
pub mod config;
pub mod io;
pub mod weights;

pub use block::rotate_pairs;
pub(crate) use block::{block_backward, block_forward, BlockArgs, BlockTape};
pub use config::{ModelConfig, StreamInit, StreamMode};
pub use weights::{tensor_layout, LowRank, ModelWeights, ParamClass, TensorSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::tensor::{matmul_into, softmax_in_place, Precision, Tensor};
use crate::tree::{build_mask, TreeDraft};

/// Multiply-add counts of one forward pass, split by who caused them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    /// Main-stream rows: all layers plus the LM head.
    pub main: u64,
    /// Stream rows in the multi-stream layers.
    pub stream_layers: u64,
    /// Stream-row LM head and stream-init transform.
    pub stream_head: u64,
    /// Early-exit logits used for pruning.
    pub prune: u64,
}

impl FlopCount {
    pub fn stream(&self) -> u64 {
        self.stream_layers + self.stream_head
    }

    pub fn total(&self) -> u64 {
        self.main + self.stream() + self.prune
    }

    pub fn add(&mut self, other: &FlopCount) {
        self.main += other.main;
        self.stream_layers += other.stream_layers;
        self.stream_head += other.stream_head;
        self.prune += other.prune;
    }
}

/// Multiply-adds of one block row attending over `cols` keys.
pub(crate) fn block_row_flops(h: usize, cols: usize) -> u64 {
    (12 * h * h + 2 * h * cols) as u64
}

/// New positions for one forward call.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatBatch {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub parents: Vec<Option<usize>>,
    /// Flattened node index in the unpruned tree, used as KV tag.
    pub node_ids: Vec<usize>,
    /// Additive mask, `nodes × (committed + nodes)`.
    pub mask: Tensor,
    pub committed: usize,
}

impl FlatBatch {
    pub fn from_tree(tree: &TreeDraft, committed: usize) -> Self {
        FlatBatch {
            tokens: tree.tokens(),
            positions: tree.nodes().iter().map(|n| committed + n.depth).collect(),
            parents: tree.parents(),
            node_ids: tree.origin().to_vec(),
            mask: build_mask(tree, committed),
            committed,
        }
    }

    /// A causal run of tokens after `committed` cached positions.
    pub fn causal(tokens: &[u32], committed: usize) -> Result<Self> {
        Ok(FlatBatch::from_tree(&TreeDraft::chain(tokens)?, committed))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Visible columns (zero entries) of each mask row.
pub(crate) fn mask_columns(mask: &Tensor) -> Vec<Vec<usize>> {
    (0..mask.rows())
        .map(|r| mask.row(r).iter().enumerate().filter(|(_, &x)| x == 0.0).map(|(c, _)| c).collect())
        .collect()
}

/// Expands a node mask (`n × (C + n)`) into the mask the multi-stream layers
/// realize, `(n + nγ) × (C + n + nγ)`. Rows and columns list main nodes
/// first, then stream `j` of node `i` at offset `n + iγ + (j − 1)`.
pub fn msa_mask(node_mask: &Tensor, streams: usize) -> Tensor {
    let n = node_mask.rows();
    let base = node_mask.cols();
    let rows = n + n * streams;
    let cols = base + n * streams;
    let mut data = vec![f64::NEG_INFINITY; rows * cols];
    for i in 0..n {
        data[i * cols..i * cols + base].copy_from_slice(node_mask.row(i));
        for j in 1..=streams {
            let r = n + i * streams + (j - 1);
            let row = &mut data[r * cols..(r + 1) * cols];
            row[..base].copy_from_slice(node_mask.row(i));
            for jj in 1..=j {
                row[base + i * streams + (jj - 1)] = 0.0;
            }
        }
    }
    Tensor::matrix(rows, cols, data, Precision::F64).expect("consistent shape")
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `nodes × vocab`.
    pub main_logits: Tensor,
    /// `(nodes·γ) × vocab`; row `i·γ + (j−1)` is stream `j` at node `i`.
    pub stream_logits: Tensor,
    pub streams: usize,
    /// Unpruned-tree index of each output node.
    pub node_ids: Vec<usize>,
    pub flops: FlopCount,
}

impl ForwardOutput {
    pub fn main_row(&self, node: usize) -> &[f64] {
        self.main_logits.row(node)
    }

    /// Logit rows of streams `1..=γ` at `node`.
    pub fn stream_rows(&self, node: usize) -> Vec<&[f64]> {
        (0..self.streams).map(|j| self.stream_logits.row(node * self.streams + j)).collect()
    }
}

/// An immutable model. Safe to share between decode sessions.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    precision: Precision,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let precision = weights.token_embedding.precision();
        // from_named re-validates every shape against the config
        let mut named = std::collections::BTreeMap::new();
        weights.visit(&mut |n, t| {
            named.insert(n, t.clone());
        });
        let weights = ModelWeights::from_named(&config, named)?;
        Ok(Model { config, weights, precision })
    }

    pub fn init(config: ModelConfig, seed: u64, precision: Precision) -> Result<Self> {
        let weights = ModelWeights::init(&config, seed, precision)?;
        Ok(Model { config, weights, precision })
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn with_precision(self, precision: Precision) -> Self {
        Model { weights: self.weights.with_precision(precision), precision, config: self.config }
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.num_layers, self.config.hidden_size, self.config.max_seq_len)
    }

    fn h(&self) -> usize {
        self.config.hidden_size
    }

    /// Token plus position embedding for each new row.
    pub(crate) fn embed(&self, tokens: &[u32], positions: &[usize]) -> Result<Vec<f64>> {
        let h = self.h();
        let mut x = vec![0.0; tokens.len() * h];
        for (r, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(Error::param(format!("token {t} outside vocabulary")));
            }
            if p >= self.config.max_seq_len {
                return Err(Error::capacity(format!("position {p} exceeds max length {}", self.config.max_seq_len)));
            }
            let e = self.weights.token_embedding.row(t as usize);
            let pe = self.weights.position_embedding.row(p);
            for i in 0..h {
                x[r * h + i] = self.precision.round(e[i] + pe[i]);
            }
        }
        Ok(x)
    }

    /// Value rotation angle per row for `n` main rows followed by `n·γ` stream rows.
    pub(crate) fn row_rotations(&self, n: usize, streams: usize) -> Vec<f64> {
        let mut rot = vec![0.0; n + n * streams];
        if self.config.stream_mode == StreamMode::Rotation {
            for i in 0..n {
                for j in 1..=streams {
                    rot[n + i * streams + (j - 1)] = self.config.rotation_step * j as f64;
                }
            }
        }
        rot
    }

    fn check_streams(&self, streams: usize) -> Result<()> {
        if streams > self.config.num_streams {
            return Err(Error::param(format!("{streams} streams requested, model has {}", self.config.num_streams)));
        }
        Ok(())
    }

    /// Stream states at the split layer, row `i·γ + (j−1)` for stream `j` of
    /// main row `i`: `f(M_i) + P_j`, or a copy of `M_i` in rotation mode.
    pub(crate) fn init_stream_rows(&self, main: &[f64], n: usize, streams: usize) -> Vec<f64> {
        let h = self.h();
        let prec = self.precision;
        let base: Vec<f64> = match (&self.weights.stream_init, self.config.stream_mode) {
            (Some(lr), StreamMode::Embedding) => {
                let r = lr.down.shape()[1];
                let mut mid = vec![0.0; n * r];
                matmul_into(main, lr.down.data(), &mut mid, n, h, r);
                prec.round_slice(&mut mid);
                let mut out = vec![0.0; n * h];
                matmul_into(&mid, lr.up.data(), &mut out, n, r, h);
                prec.round_slice(&mut out);
                out
            }
            _ => main.to_vec(),
        };
        let mut s = vec![0.0; n * streams * h];
        for i in 0..n {
            for j in 0..streams {
                let dst = &mut s[(i * streams + j) * h..(i * streams + j + 1) * h];
                dst.copy_from_slice(&base[i * h..(i + 1) * h]);
                if self.config.stream_mode == StreamMode::Embedding {
                    for (d, &p) in dst.iter_mut().zip(self.weights.stream_embeddings[j].data()) {
                        *d = prec.round(*d + p);
                    }
                }
            }
        }
        s
    }

    /// Public form of stream initialization on a `n × h` main-state matrix.
    pub fn init_streams(&self, main: &Tensor, streams: usize) -> Result<Tensor> {
        self.check_streams(streams)?;
        let n = main.rows();
        if main.cols() != self.h() {
            return Err(Error::shape("init_streams: width differs from hidden size"));
        }
        Tensor::matrix(n * streams, self.h(), self.init_stream_rows(main.data(), n, streams), self.precision)
    }

    /// Final norm and LM head over `rows × h` states.
    pub(crate) fn head_logits(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (h, v) = (self.h(), self.config.vocab_size);
        let prec = self.precision;
        let g = self.weights.final_norm_gain.data();
        let b = self.weights.final_norm_bias.data();
        let mut normed = vec![0.0; rows * h];
        for r in 0..rows {
            let row = &x[r * h..(r + 1) * h];
            let (mean, rstd) = crate::tensor::row_moments(row, self.config.norm_eps);
            for i in 0..h {
                normed[r * h + i] = prec.round((row[i] - mean) * rstd * g[i] + b[i]);
            }
        }
        let mut logits = vec![0.0; rows * v];
        matmul_into(&normed, self.weights.lm_head.data(), &mut logits, rows, h, v);
        prec.round_slice(&mut logits);
        logits
    }

    /// Early-exit distributions `softmax(H(o_θ(M)))` for `n × h` states taken
    /// at the split layer.
    pub fn early_exit_probs(&self, hidden: &Tensor) -> Result<Tensor> {
        let (h, v) = (self.h(), self.config.vocab_size);
        if hidden.cols() != h {
            return Err(Error::shape("early_exit_probs: width differs from hidden size"));
        }
        let n = hidden.rows();
        let logits = self.early_exit_logits_raw(hidden.data(), n);
        let mut probs = logits;
        for r in 0..n {
            softmax_in_place(&mut probs[r * v..(r + 1) * v]);
        }
        Tensor::matrix(n, v, probs, self.precision)
    }

    pub(crate) fn early_exit_logits_raw(&self, hidden: &[f64], n: usize) -> Vec<f64> {
        let (h, v) = (self.h(), self.config.vocab_size);
        let prec = self.precision;
        let ad = &self.weights.prune_adapter;
        let t = ad.down.shape()[1];
        let mut mid = vec![0.0; n * t];
        matmul_into(hidden, ad.down.data(), &mut mid, n, h, t);
        prec.round_slice(&mut mid);
        let mut adapted = vec![0.0; n * h];
        matmul_into(&mid, ad.up.data(), &mut adapted, n, t, h);
        prec.round_slice(&mut adapted);
        let mut logits = vec![0.0; n * v];
        matmul_into(&adapted, self.weights.lm_head.data(), &mut logits, n, h, v);
        prec.round_slice(&mut logits);
        logits
    }

    pub(crate) fn prune_flops(&self, n: usize) -> u64 {
        let (h, v, t) = (self.h(), self.config.vocab_size, self.config.prune_rank);
        (n * (2 * h * t + h * v)) as u64
    }

    #[allow(clippy::too_many_arguments)]
    fn run_block(
        &self,
        layer: usize,
        x: &[f64],
        rows: usize,
        ctx_k: &[f64],
        ctx_v: &[f64],
        cols: &[Vec<usize>],
        rot: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let args = BlockArgs { x, rows, ctx_k, ctx_v, ctx_len: ctx_k.len() / self.h(), cols, rot };
        let out = block_forward(
            &self.weights.layers[layer],
            self.config.num_heads,
            self.config.norm_eps,
            self.precision,
            &args,
            false,
        );
        (out.out, out.k, out.v)
    }

    fn check_layer_inputs(&self, x: &Tensor, cache_k: &Tensor, cache_v: &Tensor) -> Result<()> {
        let h = self.h();
        if x.cols() != h || (!cache_k.is_empty() && cache_k.cols() != h) {
            return Err(Error::shape("layer inputs must have hidden-size width"));
        }
        if cache_k.len() != cache_v.len() {
            return Err(Error::shape("cache keys and values differ in length"));
        }
        Ok(())
    }

    /// One plain attention block. `mask` is `n × (cached + n)`; returns the
    /// new hidden states and the new rows' keys and values.
    pub fn mha_layer(
        &self,
        layer: usize,
        hidden: &Tensor,
        cache_k: &Tensor,
        cache_v: &Tensor,
        mask: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let n = hidden.rows();
        self.check_layer_inputs(hidden, cache_k, cache_v)?;
        let ctx = cache_k.data().len() / self.h();
        if mask.shape() != [n, ctx + n] {
            return Err(Error::shape(format!(
                "mask {:?} does not cover {ctx} cached + {n} new positions",
                mask.shape()
            )));
        }
        let cols = mask_columns(mask);
        let (out, k, v) = self.run_block(layer, hidden.data(), n, cache_k.data(), cache_v.data(), &cols, &vec![0.0; n]);
        let h = self.h();
        Ok((
            Tensor::matrix(n, h, out, self.precision)?,
            Tensor::matrix(n, h, k, self.precision)?,
            Tensor::matrix(n, h, v, self.precision)?,
        ))
    }

    /// One multi-stream block. `streams_in` holds `n·γ` rows; `mask` is the
    /// node mask (`n × (cached + n)`). Returns updated main and stream states
    /// and the main rows' keys and values (stream K/V are not returned).
    #[allow(clippy::too_many_arguments)]
    pub fn msa_layer(
        &self,
        layer: usize,
        main: &Tensor,
        streams_in: &Tensor,
        streams: usize,
        cache_k: &Tensor,
        cache_v: &Tensor,
        mask: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let n = main.rows();
        let h = self.h();
        self.check_layer_inputs(main, cache_k, cache_v)?;
        if streams_in.data().len() != n * streams * h {
            return Err(Error::shape("stream states must hold γ rows per main row"));
        }
        let ctx = cache_k.data().len() / h;
        if mask.shape() != [n, ctx + n] {
            return Err(Error::shape("mask does not cover cached + new positions"));
        }
        let cols = mask_columns(&msa_mask(mask, streams));
        let mut x = main.data().to_vec();
        x.extend_from_slice(streams_in.data());
        let rot = self.row_rotations(n, streams);
        let (out, k, v) = self.run_block(layer, &x, n + n * streams, cache_k.data(), cache_v.data(), &cols, &rot);
        Ok((
            Tensor::matrix(n, h, out[..n * h].to_vec(), self.precision)?,
            Tensor::matrix(n * streams, h, out[n * h..].to_vec(), self.precision)?,
            Tensor::matrix(n, h, k[..n * h].to_vec(), self.precision)?,
            Tensor::matrix(n, h, v[..n * h].to_vec(), self.precision)?,
        ))
    }

    /// Runs the layers below the stream split over every node of `batch`,
    /// opening a speculative pass in `cache`. Returns the split-layer states.
    pub fn forward_lower(&self, cache: &mut KvCache, batch: &FlatBatch) -> Result<(Tensor, FlopCount)> {
        let n = batch.len();
        let h = self.h();
        let ctx = cache.committed_len();
        if batch.committed != ctx {
            return Err(Error::logic(format!(
                "batch built for {} committed positions, cache holds {ctx}",
                batch.committed
            )));
        }
        if batch.mask.shape() != [n, ctx + n] {
            return Err(Error::shape("tree mask does not cover cached + new positions"));
        }
        let mut x = self.embed(&batch.tokens, &batch.positions)?;
        cache.begin_pass(batch.parents.clone())?;
        let cols = mask_columns(&batch.mask);
        let rot = vec![0.0; n];
        let mut flops = FlopCount::default();
        for l in 0..self.config.split_layer() {
            let (out, k, v) = self.run_block(l, &x, n, cache.keys(l), cache.values(l), &cols, &rot);
            cache.append_speculative(l, &k, &v, &batch.node_ids)?;
            flops.main += cols.iter().map(|c| block_row_flops(h, c.len())).sum::<u64>();
            x = out;
        }
        Ok((Tensor::matrix(n, h, x, self.precision)?, flops))
    }

    /// Runs the multi-stream layers over `batch` (possibly a pruned subset of
    /// the nodes given to [`Model::forward_lower`]) starting from their
    /// split-layer states.
    pub fn forward_upper(
        &self,
        cache: &mut KvCache,
        batch: &FlatBatch,
        hidden: &Tensor,
        streams: usize,
    ) -> Result<ForwardOutput> {
        self.check_streams(streams)?;
        let n = batch.len();
        let h = self.h();
        let v = self.config.vocab_size;
        let ctx = cache.committed_len();
        if hidden.rows() != n || hidden.cols() != h {
            return Err(Error::shape("split states do not match the batch"));
        }
        if batch.mask.shape() != [n, ctx + n] {
            return Err(Error::shape("tree mask does not cover cached + new positions"));
        }
        let realized = msa_mask(&batch.mask, streams);
        let cols = mask_columns(&realized);
        let rot = self.row_rotations(n, streams);
        let rows = n + n * streams;

        let mut x = hidden.data().to_vec();
        x.extend(self.init_stream_rows(hidden.data(), n, streams));
        let mut flops = FlopCount::default();
        if let Some(lr) = &self.weights.stream_init {
            if self.config.stream_mode == StreamMode::Embedding {
                flops.stream_head += (n * streams * 2 * h * lr.down.shape()[1]) as u64;
            }
        }
        for l in self.config.split_layer()..self.config.num_layers {
            let (out, k, vv) = self.run_block(l, &x, rows, cache.keys(l), cache.values(l), &cols, &rot);
            cache.append_speculative(l, &k[..n * h], &vv[..n * h], &batch.node_ids)?;
            flops.main += cols[..n].iter().map(|c| block_row_flops(h, c.len())).sum::<u64>();
            flops.stream_layers += cols[n..].iter().map(|c| block_row_flops(h, c.len())).sum::<u64>();
            x = out;
        }
        let logits = self.head_logits(&x, rows);
        flops.main += (n * h * v) as u64;
        flops.stream_head += (n * streams * h * v) as u64;
        Ok(ForwardOutput {
            main_logits: Tensor::matrix(n, v, logits[..n * v].to_vec(), self.precision)?,
            stream_logits: Tensor::matrix(n * streams, v, logits[n * v..].to_vec(), self.precision)?,
            streams,
            node_ids: batch.node_ids.clone(),
            flops,
        })
    }

    /// Full pass over `batch` without pruning. The pass stays pending in
    /// `cache` until the caller commits or discards it.
    pub fn forward(&self, cache: &mut KvCache, batch: &FlatBatch, streams: usize) -> Result<ForwardOutput> {
        self.check_streams(streams)?;
        let (hidden, lower) = self.forward_lower(cache, batch)?;
        let mut out = self.forward_upper(cache, batch, &hidden, streams)?;
        out.flops.add(&lower);
        Ok(out)
    }
}
