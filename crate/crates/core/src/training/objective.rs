//! The joint n-gram objective and its analytic gradients.
//!
//! One teacher-forced pass computes main logits at every position and the
//! logits of all `γ` streams at every position. The main row at input
//! position `i` scores token `i + 1`; stream `j` at `i` scores token
//! `i + 1 + j`. Only positions whose next token is a target count.
//!
//! The early-exit adapter is trained on its own next-token loss. Its
//! gradient stops at the split-layer states and at the LM head, so it never
//! moves the shared model.

use serde::{Deserialize, Serialize};

use super::{LossWeights, TrainExample};
use crate::error::{Error, Result};
use crate::model::{
    block_backward, block_forward, mask_columns, msa_mask, BlockArgs, BlockTape, Model, ModelWeights, StreamMode,
};
use crate::tensor::{log_sum_exp, matmul_into, matmul_nt_into, matmul_tn_into, row_moments};
use crate::tree::{build_mask, TreeDraft};

/// Raw per-term sums of one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main_nll: f64,
    pub main_count: usize,
    /// Stream `j` at index `j − 1`.
    pub stream_nll: Vec<f64>,
    pub stream_counts: Vec<usize>,
    pub early_exit_nll: f64,
}

impl LossBreakdown {
    fn new(streams: usize) -> Self {
        LossBreakdown { stream_nll: vec![0.0; streams], stream_counts: vec![0; streams], ..Default::default() }
    }

    fn add(&mut self, o: &LossBreakdown) {
        self.main_nll += o.main_nll;
        self.main_count += o.main_count;
        for j in 0..self.stream_nll.len() {
            self.stream_nll[j] += o.stream_nll[j];
            self.stream_counts[j] += o.stream_counts[j];
        }
        self.early_exit_nll += o.early_exit_nll;
    }

    pub fn mean_main(&self) -> f64 {
        self.main_nll / self.main_count.max(1) as f64
    }

    pub fn mean_stream(&self, j: usize) -> f64 {
        self.stream_nll[j - 1] / self.stream_counts[j - 1].max(1) as f64
    }

    pub fn mean_early_exit(&self) -> f64 {
        self.early_exit_nll / self.main_count.max(1) as f64
    }
}

/// Objective values and gradients for one batch.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// The weighted objective, averaged over examples.
    pub loss: f64,
    /// Mean early-exit NLL per target token, averaged over examples.
    pub early_exit_loss: f64,
    pub breakdown: LossBreakdown,
    /// Gradient of `loss` for every tensor except the pruning adapter, whose
    /// entries hold the gradient of `early_exit_loss`.
    pub grads: ModelWeights,
    /// Model forward passes spent on the batch.
    pub forward_passes: usize,
}

struct ExampleOut {
    objective: f64,
    early_exit: f64,
    terms: LossBreakdown,
}

fn causal_cols(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| (0..=i).collect()).collect()
}

fn check_batch(model: &Model, batch: &[TrainExample], weights: &LossWeights) -> Result<()> {
    if weights.alphas.len() != model.config.num_streams + 1 {
        return Err(Error::param(format!(
            "{} loss weights for a model with {} streams",
            weights.alphas.len(),
            model.config.num_streams
        )));
    }
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    for ex in batch {
        ex.validate(model.config.max_seq_len)?;
    }
    Ok(())
}

/// Writes `p − onehot(target)` scaled by `w` into `d`, returns the NLL.
fn nll_row(row: &[f64], target: u32, w: f64, d: Option<&mut [f64]>) -> f64 {
    let lse = log_sum_exp(row);
    if let Some(d) = d {
        for (g, &l) in d.iter_mut().zip(row) {
            *g += w * (l - lse).exp();
        }
        d[target as usize] -= w;
    }
    lse - row[target as usize]
}

/// One teacher-forced pass; accumulates `scale × gradient` into `grads` when given.
fn example_pass(
    model: &Model,
    ex: &TrainExample,
    weights: &LossWeights,
    scale: f64,
    grads: Option<&mut ModelWeights>,
) -> Result<ExampleOut> {
    let cfg = &model.config;
    let (h, v, heads, eps) = (cfg.hidden_size, cfg.vocab_size, cfg.num_heads, cfg.norm_eps);
    let prec = model.precision();
    let w = &model.weights;
    let g = cfg.num_streams;
    let split = cfg.split_layer();
    let full = ex.sequence();
    let inputs = &full[..full.len() - 1];
    let n = inputs.len();
    let m = ex.context.len();
    let t_len = ex.targets.len();
    let rows = n + n * g;
    let want_grad = grads.is_some();

    // Forward.
    let positions: Vec<usize> = (0..n).collect();
    let mut x = model.embed(inputs, &positions)?;
    let cols = causal_cols(n);
    let zeros = vec![0.0; n];
    let mut lower: Vec<BlockTape> = Vec::with_capacity(split);
    for l in 0..split {
        let args = BlockArgs { x: &x, rows: n, ctx_k: &[], ctx_v: &[], ctx_len: 0, cols: &cols, rot: &zeros };
        let out = block_forward(&w.layers[l], heads, eps, prec, &args, want_grad);
        lower.extend(out.tape);
        x = out.out;
    }
    let split_states = x.clone();
    x.extend(model.init_stream_rows(&split_states, n, g));
    let chain = TreeDraft::chain(inputs)?;
    let ucols = mask_columns(&msa_mask(&build_mask(&chain, 0), g));
    let rot = model.row_rotations(n, g);
    let mut upper: Vec<BlockTape> = Vec::with_capacity(cfg.msa_layers);
    for l in split..cfg.num_layers {
        let args = BlockArgs { x: &x, rows, ctx_k: &[], ctx_v: &[], ctx_len: 0, cols: &ucols, rot: &rot };
        let out = block_forward(&w.layers[l], heads, eps, prec, &args, want_grad);
        upper.extend(out.tape);
        x = out.out;
    }
    let final_in = x;
    let logits = model.head_logits(&final_in, rows);

    // Losses.
    let a = &weights.alphas;
    let norm = a[0] * t_len as f64 + (1..=g).map(|j| a[j] * t_len.saturating_sub(j) as f64).sum::<f64>();
    let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
    let mut terms = LossBreakdown::new(g);
    let mut dlogits = if want_grad { vec![0.0; rows * v] } else { Vec::new() };
    for i in m - 1..n {
        let target = full[i + 1];
        let d = want_grad.then(|| &mut dlogits[i * v..(i + 1) * v]);
        terms.main_nll += nll_row(&logits[i * v..(i + 1) * v], target, scale * a[0] * inv, d);
        terms.main_count += 1;
        for j in 1..=g {
            if i + 1 + j > n {
                break;
            }
            let r = n + i * g + (j - 1);
            let d = want_grad.then(|| &mut dlogits[r * v..(r + 1) * v]);
            terms.stream_nll[j - 1] += nll_row(&logits[r * v..(r + 1) * v], full[i + 1 + j], scale * a[j] * inv, d);
            terms.stream_counts[j - 1] += 1;
        }
    }
    let numer = a[0] * terms.main_nll + (1..=g).map(|j| a[j] * terms.stream_nll[j - 1]).sum::<f64>();
    let objective = numer * inv;

    let ee_logits = model.early_exit_logits_raw(&split_states, n);
    let ee_scale = scale / t_len as f64;
    let mut d_ee = if want_grad { vec![0.0; n * v] } else { Vec::new() };
    for i in m - 1..n {
        let d = want_grad.then(|| &mut d_ee[i * v..(i + 1) * v]);
        terms.early_exit_nll += nll_row(&ee_logits[i * v..(i + 1) * v], full[i + 1], ee_scale, d);
    }
    let early_exit = terms.early_exit_nll / t_len as f64;

    let Some(gr) = grads else {
        return Ok(ExampleOut { objective, early_exit, terms });
    };

    // Backward: head and final norm.
    let mut normed = vec![0.0; rows * h];
    let mut xhat = vec![0.0; rows * h];
    let mut rstd = vec![0.0; rows];
    let gain = w.final_norm_gain.data();
    for r in 0..rows {
        let row = &final_in[r * h..(r + 1) * h];
        let (mean, rs) = row_moments(row, eps);
        rstd[r] = rs;
        for i in 0..h {
            xhat[r * h + i] = (row[i] - mean) * rs;
            normed[r * h + i] = xhat[r * h + i] * gain[i] + w.final_norm_bias.data()[i];
        }
    }
    matmul_tn_into(&normed, &dlogits, gr.lm_head.data_mut(), rows, h, v);
    let mut dnormed = vec![0.0; rows * h];
    matmul_nt_into(&dlogits, w.lm_head.data(), &mut dnormed, rows, v, h);
    let mut dx = vec![0.0; rows * h];
    for r in 0..rows {
        let dy = &dnormed[r * h..(r + 1) * h];
        let xr = &xhat[r * h..(r + 1) * h];
        let (mut md, mut mdx) = (0.0, 0.0);
        for i in 0..h {
            gr.final_norm_gain.data_mut()[i] += dy[i] * xr[i];
            gr.final_norm_bias.data_mut()[i] += dy[i];
            let d = dy[i] * gain[i];
            md += d;
            mdx += d * xr[i];
        }
        md /= h as f64;
        mdx /= h as f64;
        for i in 0..h {
            dx[r * h + i] = rstd[r] * (dy[i] * gain[i] - md - xr[i] * mdx);
        }
    }

    // Multi-stream layers.
    for (l, tape) in (split..cfg.num_layers).zip(&upper).rev() {
        dx = block_backward(&w.layers[l], heads, tape, &dx, &mut gr.layers[l]);
    }

    // Stream initialization.
    let (dm_part, ds) = dx.split_at(n * h);
    let mut dm = dm_part.to_vec();
    let mut df = vec![0.0; n * h];
    for i in 0..n {
        for j in 0..g {
            let src = &ds[(i * g + j) * h..(i * g + j + 1) * h];
            for c in 0..h {
                df[i * h + c] += src[c];
            }
            if cfg.stream_mode == StreamMode::Embedding {
                for (p, &d) in gr.stream_embeddings[j].data_mut().iter_mut().zip(src) {
                    *p += d;
                }
            }
        }
    }
    match (&w.stream_init, cfg.stream_mode) {
        (Some(lr), StreamMode::Embedding) => {
            let r = lr.down.shape()[1];
            let lg = gr.stream_init.as_mut().expect("gradient mirrors weights");
            let mut mid = vec![0.0; n * r];
            matmul_into(&split_states, lr.down.data(), &mut mid, n, h, r);
            matmul_tn_into(&mid, &df, lg.up.data_mut(), n, r, h);
            let mut dmid = vec![0.0; n * r];
            matmul_nt_into(&df, lr.up.data(), &mut dmid, n, h, r);
            matmul_tn_into(&split_states, &dmid, lg.down.data_mut(), n, h, r);
            matmul_nt_into(&dmid, lr.down.data(), &mut dm, n, r, h);
        }
        _ => {
            for (a, b) in dm.iter_mut().zip(&df) {
                *a += b;
            }
        }
    }

    // Lower layers and embeddings.
    for (l, tape) in (0..split).zip(&lower).rev() {
        dm = block_backward(&w.layers[l], heads, tape, &dm, &mut gr.layers[l]);
    }
    for (i, &tok) in inputs.iter().enumerate() {
        let src = &dm[i * h..(i + 1) * h];
        for (e, &d) in gr.token_embedding.row_mut(tok as usize).iter_mut().zip(src) {
            *e += d;
        }
        for (e, &d) in gr.position_embedding.row_mut(i).iter_mut().zip(src) {
            *e += d;
        }
    }

    // Early-exit adapter only.
    let ad = &w.prune_adapter;
    let th = ad.down.shape()[1];
    let mut mid = vec![0.0; n * th];
    matmul_into(&split_states, ad.down.data(), &mut mid, n, h, th);
    let mut dadapted = vec![0.0; n * h];
    matmul_nt_into(&d_ee, w.lm_head.data(), &mut dadapted, n, v, h);
    matmul_tn_into(&mid, &dadapted, gr.prune_adapter.up.data_mut(), n, th, h);
    let mut dmid = vec![0.0; n * th];
    matmul_nt_into(&dadapted, ad.up.data(), &mut dmid, n, h, th);
    matmul_tn_into(&split_states, &dmid, gr.prune_adapter.down.data_mut(), n, h, th);

    Ok(ExampleOut { objective, early_exit, terms })
}

fn run_batch(
    model: &Model,
    batch: &[TrainExample],
    weights: &LossWeights,
    mut grads: Option<&mut ModelWeights>,
) -> Result<(f64, f64, LossBreakdown)> {
    check_batch(model, batch, weights)?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut ee = 0.0;
    let mut terms = LossBreakdown::new(model.config.num_streams);
    for ex in batch {
        let out = example_pass(model, ex, weights, scale, grads.as_deref_mut())?;
        loss += out.objective;
        ee += out.early_exit;
        terms.add(&out.terms);
    }
    Ok((loss * scale, ee * scale, terms))
}

/// Weighted n-gram objective, normalized per example by the weighted
/// target count and averaged over the batch.
pub fn speculative_loss(model: &Model, batch: &[TrainExample], weights: &LossWeights) -> Result<f64> {
    Ok(run_batch(model, batch, weights, None)?.0)
}

/// Per-term NLL sums of the batch.
pub fn loss_breakdown(model: &Model, batch: &[TrainExample]) -> Result<LossBreakdown> {
    let weights = LossWeights::standard(model.config.num_streams);
    Ok(run_batch(model, batch, &weights, None)?.2)
}

/// Next-token NLL of the early-exit head, averaged per target and example.
pub fn early_exit_loss(model: &Model, batch: &[TrainExample]) -> Result<f64> {
    let weights = LossWeights::standard(model.config.num_streams);
    Ok(run_batch(model, batch, &weights, None)?.1)
}

pub fn loss_gradients(model: &Model, batch: &[TrainExample], weights: &LossWeights) -> Result<Gradients> {
    let mut grads = model.weights.zeros_like();
    let (loss, early_exit_loss, breakdown) = run_batch(model, batch, weights, Some(&mut grads))?;
    Ok(Gradients { loss, early_exit_loss, breakdown, grads, forward_passes: batch.len() })
}
