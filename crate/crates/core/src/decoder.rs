//! Verify-then-speculate decoding loop and the plain autoregressive
//! reference it must reproduce.
//!
//! Every target call runs one forward over the pending tree draft. The main
//! logits verify the draft, the stream logits at the last accepted node seed
//! the next draft. The correction token is committed in the pass that
//! produces it and becomes the root of the next draft, so each call advances
//! by `β = δ + 1` tokens where `δ` is the number of accepted draft tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::model::{FlatBatch, FlopCount, Model};
use crate::tensor::{argmax, softmax_in_place, topk, Tensor};
use crate::tree::{build_tree, prune, TreeDraft};

/// How tokens are chosen from main-stream logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Greedy,
    /// Sample among the `k` most likely tokens at `temperature`.
    TopK { k: usize, temperature: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateParams {
    pub max_new: usize,
    /// Streams used for drafting; at most the model's stream count.
    pub gamma: usize,
    /// Candidates per stream.
    pub k: usize,
    /// Early-exit pruning threshold; 0 disables pruning.
    pub tau: f64,
    pub eos: Option<u32>,
    #[serde(default)]
    pub sampling: Sampling,
}

impl Default for GenerateParams {
    fn default() -> Self {
        GenerateParams { max_new: 32, gamma: 4, k: 1, tau: 0.0, eos: None, sampling: Sampling::Greedy }
    }
}

impl GenerateParams {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.max_new == 0 {
            return Err(Error::param("max_new must be at least 1"));
        }
        if self.gamma > model.config.num_streams {
            return Err(Error::param(format!(
                "gamma {} exceeds the model's {} streams",
                self.gamma, model.config.num_streams
            )));
        }
        let v = model.config.vocab_size;
        if self.k == 0 || self.k > v {
            return Err(Error::param(format!("k must lie in 1..={v}")));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::param(format!("tau {} must be finite and non-negative", self.tau)));
        }
        if let Some(e) = self.eos {
            if e as usize >= model.config.vocab_size {
                return Err(Error::param(format!("eos token {e} outside vocabulary")));
            }
        }
        if let Sampling::TopK { k, temperature, .. } = self.sampling {
            if k == 0 || k > v || !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::param("top-k sampling needs k in 1..=vocab and a positive temperature"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeMetrics {
    pub generated_tokens: u64,
    pub target_calls: u64,
    /// `beta_histogram[b]` counts calls that emitted `b` tokens.
    pub beta_histogram: Vec<u64>,
    /// Draft nodes removed by early-exit pruning.
    pub pruned_nodes: u64,
    /// Draft nodes sent to the lower layers, roots included.
    pub drafted_nodes: u64,
    /// Draft nodes that reached verification.
    pub verified_nodes: u64,
    pub flops: FlopCount,
}

impl DecodeMetrics {
    /// Generated tokens per target call.
    pub fn cr_ratio(&self) -> f64 {
        if self.target_calls == 0 {
            0.0
        } else {
            self.generated_tokens as f64 / self.target_calls as f64
        }
    }

    /// Mean draft size after pruning over the verification passes.
    pub fn mean_verified_tree(&self) -> f64 {
        let passes = self.target_calls.saturating_sub(1);
        if passes == 0 {
            0.0
        } else {
            self.verified_nodes as f64 / passes as f64
        }
    }

    /// Multiply-adds per generated token.
    pub fn flops_per_token(&self) -> f64 {
        self.flops.total() as f64 / self.generated_tokens.max(1) as f64
    }

    fn record(&mut self, emitted: usize) {
        if self.beta_histogram.len() <= emitted {
            self.beta_histogram.resize(emitted + 1, 0);
        }
        self.beta_histogram[emitted] += 1;
        self.generated_tokens += emitted as u64;
        self.target_calls += 1;
    }
}

/// Outcome of one verify-then-speculate pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// Draft tokens that matched the main stream, root excluded.
    pub accepted_tokens: Vec<u32>,
    pub correction_token: u32,
    /// `accepted_tokens.len() + 1`, before any truncation.
    pub advancement: usize,
    /// Tokens actually appended to the output (after eos and length limits).
    pub emitted: Vec<u32>,
    /// Draft issued for the next pass; `None` once generation has finished.
    pub next_tree: Option<TreeDraft>,
    /// Nodes that survived pruning in this pass.
    pub verified_nodes: usize,
    pub target_calls: u64,
}

/// Greedy hard-match walk. Returns the accepted node indices (root
/// excluded), the correction token and the last accepted node.
pub fn verify_longest_path(tree: &TreeDraft, main_logits: &Tensor) -> Result<(Vec<usize>, u32, usize)> {
    verify_with(tree, main_logits, |row| argmax(row) as u32)
}

fn verify_with(
    tree: &TreeDraft,
    main_logits: &Tensor,
    mut pick: impl FnMut(&[f64]) -> u32,
) -> Result<(Vec<usize>, u32, usize)> {
    if main_logits.rows() != tree.len() {
        return Err(Error::shape(format!("{} logit rows for {} nodes", main_logits.rows(), tree.len())));
    }
    let mut path = Vec::new();
    let mut cur = 0;
    loop {
        let want = pick(main_logits.row(cur));
        match tree.children(cur).find(|&c| tree.nodes()[c].token == want) {
            Some(c) => {
                path.push(c);
                cur = c;
            }
            None => return Ok((path, want, cur)),
        }
    }
}

struct Sampler {
    mode: Sampling,
    rng: Option<ChaCha8Rng>,
}

impl Sampler {
    fn new(mode: Sampling) -> Self {
        let rng = match mode {
            Sampling::Greedy => None,
            Sampling::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Sampler { mode, rng }
    }

    fn pick(&mut self, logits: &[f64]) -> u32 {
        match (self.mode, self.rng.as_mut()) {
            (Sampling::TopK { k, temperature, .. }, Some(rng)) => {
                let cands = topk(logits, k).expect("k validated");
                let mut w: Vec<f64> = cands.iter().map(|&(_, l)| l / temperature).collect();
                softmax_in_place(&mut w);
                let mut u: f64 = rng.random();
                for (&(t, _), p) in cands.iter().zip(&w) {
                    if u < *p {
                        return t;
                    }
                    u -= p;
                }
                cands.last().map(|&(t, _)| t).expect("k ≥ 1")
            }
            _ => argmax(logits) as u32,
        }
    }
}

/// One generation in progress. Sessions borrow the model immutably, so
/// several can run over the same model at once.
pub struct DecodeSession<'m> {
    model: &'m Model,
    cache: KvCache,
    params: GenerateParams,
    tokens: Vec<u32>,
    prompt_len: usize,
    pending: Option<TreeDraft>,
    metrics: DecodeMetrics,
    sampler: Sampler,
    finished: bool,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m Model, params: GenerateParams) -> Result<Self> {
        params.validate(model)?;
        Ok(DecodeSession {
            model,
            cache: model.new_cache(),
            sampler: Sampler::new(params.sampling),
            params,
            tokens: Vec::new(),
            prompt_len: 0,
            pending: None,
            metrics: DecodeMetrics::default(),
            finished: false,
        })
    }

    pub fn metrics(&self) -> &DecodeMetrics {
        &self.metrics
    }

    /// Committed tokens after the prompt.
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len.min(self.tokens.len())..]
    }

    pub fn pending_tree(&self) -> Option<&TreeDraft> {
        self.pending.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Runs the prompt, commits the first generated token and returns the
    /// first draft rooted at it.
    pub fn process_prompt(&mut self, prompt: &[u32]) -> Result<TreeDraft> {
        if prompt.is_empty() {
            return Err(Error::param("prompt is empty"));
        }
        if !self.tokens.is_empty() {
            return Err(Error::logic("prompt already processed"));
        }
        let max = self.model.config.max_seq_len;
        if prompt.len() >= max {
            return Err(Error::capacity(format!(
                "prompt of {} tokens leaves no room within max length {max}",
                prompt.len()
            )));
        }
        let batch = FlatBatch::causal(prompt, 0)?;
        let out = self.model.forward(&mut self.cache, &batch, self.params.gamma)?;
        let chain: Vec<usize> = (0..prompt.len()).collect();
        self.cache.commit(&chain)?;
        let last = prompt.len() - 1;
        let root = self.sampler.pick(out.main_row(last));
        self.tokens = prompt.to_vec();
        self.prompt_len = prompt.len();
        self.tokens.push(root);
        self.metrics.record(1);
        self.metrics.flops.add(&out.flops);

        if self.params.max_new == 1 || self.params.eos == Some(root) {
            self.finished = true;
            return Ok(TreeDraft::root_only(root));
        }
        let tree = self.next_draft(root, &out.stream_rows(last))?;
        self.pending = Some(tree.clone());
        Ok(tree)
    }

    /// Draft for the next pass, cut to the depth that still fits.
    fn next_draft(&self, root: u32, stream_rows: &[&[f64]]) -> Result<TreeDraft> {
        let root_pos = self.cache.committed_len();
        let room = self.model.config.max_seq_len.saturating_sub(root_pos + 1);
        let depth = self.params.gamma.min(room).min(stream_rows.len());
        build_tree(root, &stream_rows[..depth], self.params.k)
    }

    /// Verifies the pending draft with one target call and issues the next.
    pub fn decode_step(&mut self) -> Result<StepResult> {
        if self.finished {
            return Err(Error::logic("generation already finished"));
        }
        let tree = self.pending.take().ok_or_else(|| Error::logic("no pending draft; process a prompt first"))?;
        let committed = self.cache.committed_len();
        let batch = FlatBatch::from_tree(&tree, committed);
        let (hidden, lower) = match self.model.forward_lower(&mut self.cache, &batch) {
            Ok(r) => r,
            Err(e) => {
                self.cache.discard();
                self.pending = Some(tree);
                return Err(e);
            }
        };
        let mut flops = lower;
        self.metrics.drafted_nodes += tree.len() as u64;

        let (survivors, hidden) = if self.params.tau > 0.0 && tree.len() > 1 {
            let probs = self.model.early_exit_probs(&hidden)?;
            flops.prune += self.model.prune_flops(tree.len());
            let kept = prune(&tree, &probs, self.params.tau)?;
            self.metrics.pruned_nodes += (tree.len() - kept.len()) as u64;
            let h = hidden.gather_rows(kept.origin());
            (kept, h)
        } else {
            (tree, hidden)
        };

        self.metrics.verified_nodes += survivors.len() as u64;
        let upper_batch = FlatBatch::from_tree(&survivors, committed);
        let out = self.model.forward_upper(&mut self.cache, &upper_batch, &hidden, self.params.gamma)?;
        flops.add(&out.flops);
        self.metrics.flops.add(&flops);

        let sampler = &mut self.sampler;
        let (path, correction, source) = verify_with(&survivors, &out.main_logits, |r| sampler.pick(r))?;
        let mut kv_path = vec![survivors.origin()[0]];
        kv_path.extend(path.iter().map(|&i| survivors.origin()[i]));
        self.cache.commit(&kv_path)?;

        let accepted: Vec<u32> = path.iter().map(|&i| survivors.nodes()[i].token).collect();
        let mut emitted = accepted.clone();
        emitted.push(correction);
        let remaining = self.params.max_new - self.generated().len();
        emitted.truncate(remaining);
        if let Some(eos) = self.params.eos {
            if let Some(p) = emitted.iter().position(|&t| t == eos) {
                emitted.truncate(p + 1);
                self.finished = true;
            }
        }
        self.tokens.extend_from_slice(&emitted);
        self.metrics.record(emitted.len());
        if self.generated().len() >= self.params.max_new {
            self.finished = true;
        }

        let next_tree = if self.finished {
            None
        } else {
            let tree = self.next_draft(correction, &out.stream_rows(source))?;
            self.pending = Some(tree.clone());
            Some(tree)
        };
        Ok(StepResult {
            advancement: accepted.len() + 1,
            accepted_tokens: accepted,
            correction_token: correction,
            emitted,
            next_tree,
            verified_nodes: survivors.len(),
            target_calls: self.metrics.target_calls,
        })
    }

    /// Finishes the generation and returns the tokens after the prompt.
    pub fn run(mut self, prompt: &[u32]) -> Result<(Vec<u32>, DecodeMetrics)> {
        self.process_prompt(prompt)?;
        while !self.finished {
            self.decode_step()?;
        }
        Ok((self.generated().to_vec(), self.metrics))
    }
}

fn check_room(model: &Model, prompt: &[u32], max_new: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::param("prompt is empty"));
    }
    // the last generated token never needs a position of its own
    if prompt.len() + max_new.saturating_sub(1) > model.config.max_seq_len {
        return Err(Error::capacity(format!(
            "prompt of {} plus {max_new} new tokens exceeds max length {}",
            prompt.len(),
            model.config.max_seq_len
        )));
    }
    Ok(())
}

/// Speculative generation. Output matches [`reference_generate`] exactly
/// under greedy sampling.
pub fn generate(model: &Model, prompt: &[u32], params: &GenerateParams) -> Result<(Vec<u32>, DecodeMetrics)> {
    params.validate(model)?;
    check_room(model, prompt, params.max_new)?;
    DecodeSession::new(model, params.clone())?.run(prompt)
}

/// Plain greedy decoding over the main stream, one token per forward.
pub fn reference_generate(model: &Model, prompt: &[u32], max_new: usize, eos: Option<u32>) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(Error::param("max_new must be at least 1"));
    }
    check_room(model, prompt, max_new)?;
    let mut cache = model.new_cache();
    let mut out = Vec::with_capacity(max_new);
    let mut batch = FlatBatch::causal(prompt, 0)?;
    loop {
        let fwd = model.forward(&mut cache, &batch, 0)?;
        let chain: Vec<usize> = (0..batch.len()).collect();
        cache.commit(&chain)?;
        let next = argmax(fwd.main_row(batch.len() - 1)) as u32;
        out.push(next);
        if out.len() == max_new || eos == Some(next) {
            return Ok(out);
        }
        batch = FlatBatch::causal(&[next], cache.committed_len())?;
    }
}
