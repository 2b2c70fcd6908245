//! Command-line entry points. Every command writes a JSON document (or a
//! CSV table) to `--out`, or to stdout when no path is given.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::decoder::{generate, reference_generate, DecodeSession, GenerateParams, Sampling};
use crate::error::{Error, Result};
use crate::model::io::{load_model, read_config, save_model, ModelFiles};
use crate::model::{Model, ModelConfig, StreamMode};
use crate::perf::{parity_zeta, speedup_grid, speedup_over_draft_target, write_grid_csv, PerfParams};
use crate::tensor::Precision;
use crate::training::{
    train, write_curve_csv, Checkpointing, LanguageKind, LossWeights, Optimizer, SyntheticLanguage, TrainConfig,
};

/// Version of every JSON document the CLI emits.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "specstream", version, about = "Speculative streaming decoder toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a randomly initialized model.
    Init(InitArgs),
    /// Train a model on a synthetic language.
    Train(TrainArgs),
    /// Generate from a prompt and report decoding metrics.
    Decode(DecodeArgs),
    /// Sweep γ, k and τ over a prompt set.
    Bench(BenchArgs),
    /// Latency model: speedup grid or a single operating point.
    Perf(PerfArgs),
    /// Randomized speculative-vs-greedy equivalence suite.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Weight manifest written by `init` or `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Config document; defaults to the one the manifest names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "f32")]
    pub precision: Precision,
}

impl ModelArgs {
    fn load(&self) -> Result<Model> {
        load_model(&self.model, self.config.as_deref(), self.precision)
    }
}

#[derive(Args, Debug)]
pub struct InitArgs {
    /// Config document describing the model shape.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub stream_mode: Option<StreamMode>,
    /// Rotation step in radians (rotation mode).
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value = "f32")]
    pub precision: Precision,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// File stem of the written model.
    #[arg(long, default_value = "model")]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// counting, keyed-lookup or motif:<period>.
    #[arg(long, default_value = "counting")]
    pub language: LanguageKind,
    #[arg(long, default_value_t = 0)]
    pub language_seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Defaults to the model's maximum length.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub context_len: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// sgd or adam.
    #[arg(long, default_value = "sgd")]
    pub optimizer: String,
    /// Weight of every stream term relative to the next-token term.
    #[arg(long, default_value_t = 0.1)]
    pub stream_weight: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Loss curve CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Output directory for the trained model.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "model")]
    pub name: String,
}

#[derive(Args, Debug, Clone)]
pub struct DecodeFlags {
    #[arg(long, default_value_t = 4)]
    pub gamma: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    #[arg(long)]
    pub eos: Option<u32>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub flags: DecodeFlags,
    /// Token ids separated by spaces or commas.
    #[arg(long, conflicts_with = "prompt_file")]
    pub prompt: Option<String>,
    /// JSON file holding `[ids...]` or `{"prompt": [ids...]}`.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Also run plain greedy decoding and report whether outputs match.
    #[arg(long)]
    pub compare: bool,
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Candidates considered when sampling.
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write every issued draft tree to this JSON file.
    #[arg(long)]
    pub dump_trees: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSON file holding a list of prompts; otherwise prompts are sampled
    /// from `--language`.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long, default_value = "counting")]
    pub language: LanguageKind,
    #[arg(long, default_value_t = 0)]
    pub language_seed: u64,
    #[arg(long, default_value_t = 16)]
    pub num_prompts: usize,
    #[arg(long, default_value_t = 3)]
    pub prompt_len: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub gammas: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.5")]
    pub taus: Vec<f64>,
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PerfArgs {
    #[arg(long, default_value_t = 4.0)]
    pub gamma: f64,
    /// Target-to-draft latency ratio of a single operating point.
    #[arg(long, requires = "zeta_over_beta")]
    pub ratio: Option<f64>,
    #[arg(long, requires = "ratio")]
    pub zeta_over_beta: Option<f64>,
    /// Speculative-streaming pass cost relative to a target pass.
    #[arg(long, default_value_t = 1.0)]
    pub ss_cost: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "f32")]
    pub precision: Precision,
    /// Restrict to one stream mode; both are mixed by default.
    #[arg(long)]
    pub stream_mode: Option<StreamMode>,
    #[arg(long, default_value_t = 0.02)]
    pub epsilon: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses process arguments and runs the command.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Init(a) => cmd_init(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Decode(a) => cmd_decode(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Perf(a) => cmd_perf(&a),
        Command::Check(a) => cmd_check(&a),
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn emit_json(out: Option<&Path>, mut doc: Value) -> Result<()> {
    doc["schema_version"] = json!(SCHEMA_VERSION);
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    emit(out, &bytes)
}

/// Token ids separated by whitespace or commas.
pub fn parse_prompt(text: &str) -> Result<Vec<u32>> {
    let ids = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().map_err(|_| Error::param(format!("bad token id {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(Error::param("prompt is empty"));
    }
    Ok(ids)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PromptDoc {
    Bare(Vec<u32>),
    Wrapped { prompt: Vec<u32> },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PromptsDoc {
    Bare(Vec<Vec<u32>>),
    Wrapped { prompts: Vec<Vec<u32>> },
}

fn read_prompt_file(path: &Path) -> Result<Vec<u32>> {
    Ok(match serde_json::from_slice(&fs::read(path)?)? {
        PromptDoc::Bare(p) | PromptDoc::Wrapped { prompt: p } => p,
    })
}

fn read_prompts_file(path: &Path) -> Result<Vec<Vec<u32>>> {
    Ok(match serde_json::from_slice(&fs::read(path)?)? {
        PromptsDoc::Bare(p) | PromptsDoc::Wrapped { prompts: p } => p,
    })
}

fn cmd_init(a: &InitArgs) -> Result<()> {
    let mut cfg = read_config(&a.config)?;
    if let Some(mode) = a.stream_mode {
        cfg.stream_mode = mode;
    }
    if let Some(eps) = a.epsilon {
        cfg.rotation_step = eps;
    }
    let model = Model::init(cfg, a.seed, a.precision)?;
    fs::create_dir_all(&a.out)?;
    let files = ModelFiles::in_dir(&a.out, &a.name);
    save_model(&model, &files)?;
    emit_json(
        None,
        json!({
            "manifest": files.manifest,
            "parameters": model.weights.parameter_count(),
            "extra_parameters": model.weights.extra_parameter_count(),
            "seed": a.seed,
        }),
    )
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let model = a.model.load()?;
    let lang = SyntheticLanguage::new(a.language, model.config.vocab_size, a.language_seed)?;
    let optimizer = match a.optimizer.as_str() {
        "sgd" => Optimizer::Sgd,
        "adam" => Optimizer::adam(),
        other => return Err(Error::param(format!("unknown optimizer {other:?}"))),
    };
    let streams = model.config.num_streams;
    let seq_len = a.seq_len.unwrap_or(model.config.max_seq_len);
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        context_len: a.context_len,
        learning_rate: a.lr,
        optimizer,
        loss_weights: LossWeights::with_stream_weight(streams, a.stream_weight),
        seed: a.seed,
        log_every: (a.steps / 100).max(1),
        checkpoint: a.checkpoint_every.map(|every| Checkpointing { dir: a.out.join("checkpoints"), every }),
        ..TrainConfig::new(streams, seq_len)
    };
    let (model, report) = train(model, &lang, &cfg)?;
    fs::create_dir_all(&a.out)?;
    let files = ModelFiles::in_dir(&a.out, &a.name);
    save_model(&model, &files)?;
    if let Some(path) = &a.curve {
        write_curve_csv(&report.curve, fs::File::create(path)?)?;
    }
    emit_json(
        None,
        json!({
            "manifest": files.manifest,
            "steps": a.steps,
            "final": report.last(),
            "forward_passes": report.forward_passes,
            "checkpoints": report.checkpoints,
        }),
    )
}

fn generate_params(f: &DecodeFlags) -> GenerateParams {
    GenerateParams { max_new: f.max_new, gamma: f.gamma, k: f.k, tau: f.tau, eos: f.eos, sampling: Sampling::Greedy }
}

fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    let model = a.model.load()?;
    let prompt = match (&a.prompt, &a.prompt_file) {
        (Some(p), _) => parse_prompt(p)?,
        (None, Some(path)) => read_prompt_file(path)?,
        (None, None) => return Err(Error::param("give --prompt or --prompt-file")),
    };
    let mut params = generate_params(&a.flags);
    if let Some(temperature) = a.temperature {
        if a.compare {
            return Err(Error::param("--compare needs greedy decoding"));
        }
        params.sampling = Sampling::TopK { k: a.top_k, temperature, seed: a.seed };
    }

    let (tokens, metrics, trees) = if a.dump_trees.is_some() {
        let mut s = DecodeSession::new(&model, params.clone())?;
        let mut trees = vec![s.process_prompt(&prompt)?.to_document()];
        while !s.is_finished() {
            if let Some(t) = s.decode_step()?.next_tree {
                trees.push(t.to_document());
            }
        }
        (s.generated().to_vec(), s.metrics().clone(), Some(trees))
    } else {
        let (t, m) = generate(&model, &prompt, &params)?;
        (t, m, None)
    };
    if let (Some(path), Some(trees)) = (&a.dump_trees, trees) {
        let mut bytes = serde_json::to_vec_pretty(&json!({ "schema_version": SCHEMA_VERSION, "trees": trees }))?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
    }

    let mut doc = json!({
        "prompt": prompt,
        "tokens": tokens,
        "params": params,
        "metrics": metrics,
        "cr_ratio": metrics.cr_ratio(),
        "mean_verified_tree": metrics.mean_verified_tree(),
    });
    if a.compare {
        let reference = reference_generate(&model, &prompt, params.max_new, params.eos)?;
        doc["reference"] = json!(reference);
        doc["match"] = json!(reference == tokens);
    }
    emit_json(a.out.as_deref(), doc)
}

/// One (γ, k, τ) cell of a bench sweep, summed over all prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub gamma: usize,
    pub k: usize,
    pub tau: f64,
    pub cr_ratio: f64,
    pub mean_verified_tree: f64,
    pub flops_per_token: f64,
    pub pruned_nodes: u64,
    pub matches_reference: bool,
}

/// Runs every cell of the grid over `prompts`. Cells run in parallel.
pub fn bench(
    model: &Model,
    prompts: &[Vec<u32>],
    gammas: &[usize],
    ks: &[usize],
    taus: &[f64],
    max_new: usize,
) -> Result<Vec<BenchRow>> {
    let references = prompts.iter().map(|p| reference_generate(model, p, max_new, None)).collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize, f64)> =
        gammas.iter().flat_map(|&g| ks.iter().flat_map(move |&k| taus.iter().map(move |&t| (g, k, t)))).collect();
    cells
        .par_iter()
        .map(|&(gamma, k, tau)| {
            let params = GenerateParams { max_new, gamma, k, tau, ..Default::default() };
            let mut total = crate::decoder::DecodeMetrics::default();
            let mut matches = true;
            for (p, want) in prompts.iter().zip(&references) {
                let (tokens, m) = generate(model, p, &params)?;
                matches &= &tokens == want;
                total.generated_tokens += m.generated_tokens;
                total.target_calls += m.target_calls;
                total.verified_nodes += m.verified_nodes;
                total.pruned_nodes += m.pruned_nodes;
                total.flops.add(&m.flops);
            }
            let passes = total.target_calls.saturating_sub(prompts.len() as u64).max(1);
            Ok(BenchRow {
                gamma,
                k,
                tau,
                cr_ratio: total.cr_ratio(),
                mean_verified_tree: total.verified_nodes as f64 / passes as f64,
                flops_per_token: total.flops_per_token(),
                pruned_nodes: total.pruned_nodes,
                matches_reference: matches,
            })
        })
        .collect()
}

pub fn write_bench_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "gamma",
        "k",
        "tau",
        "cr_ratio",
        "mean_verified_tree",
        "flops_per_token",
        "pruned_nodes",
        "matches_reference",
    ])?;
    for r in rows {
        w.write_record([
            r.gamma.to_string(),
            r.k.to_string(),
            r.tau.to_string(),
            r.cr_ratio.to_string(),
            r.mean_verified_tree.to_string(),
            r.flops_per_token.to_string(),
            r.pruned_nodes.to_string(),
            r.matches_reference.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let model = a.model.load()?;
    let prompts = match &a.prompts {
        Some(path) => read_prompts_file(path)?,
        None => {
            let lang = SyntheticLanguage::new(a.language, model.config.vocab_size, a.language_seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.language_seed);
            (0..a.num_prompts).map(|_| lang.sample(a.prompt_len, &mut rng)).collect()
        }
    };
    let rows = bench(&model, &prompts, &a.gammas, &a.ks, &a.taus, a.max_new)?;
    let mut buf = Vec::new();
    write_bench_csv(&rows, &mut buf)?;
    emit(a.out.as_deref(), &buf)
}

fn cmd_perf(a: &PerfArgs) -> Result<()> {
    if let (Some(ratio), Some(zob)) = (a.ratio, a.zeta_over_beta) {
        let p =
            PerfParams { gamma: a.gamma, c_draft: 1.0, c_target: ratio, c_ss: a.ss_cost * ratio, zeta: zob, beta: 1.0 };
        p.validate()?;
        return emit_json(
            a.out.as_deref(),
            json!({ "params": p, "parity_zeta_over_beta": parity_zeta(&p), "speedup": speedup_over_draft_target(&p) }),
        );
    }
    let mut buf = Vec::new();
    write_grid_csv(&speedup_grid(a.gamma), &mut buf)?;
    emit(a.out.as_deref(), &buf)
}

/// One randomized equivalence case.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceCase {
    pub seed: u64,
    pub config: ModelConfig,
    pub prompt: Vec<u32>,
    pub params: GenerateParams,
}

/// Draws a micro model shape, prompt and decode parameters from `seed`.
pub fn equivalence_case(seed: u64, stream_mode: Option<StreamMode>, epsilon: f64) -> EquivalenceCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = stream_mode.unwrap_or(if rng.random_bool(0.5) { StreamMode::Embedding } else { StreamMode::Rotation });
    let num_layers = rng.random_range(2..=3);
    let config = ModelConfig {
        vocab_size: rng.random_range(5..=16),
        num_layers,
        msa_layers: rng.random_range(1..num_layers),
        num_streams: 4,
        stream_mode: mode,
        rotation_step: if mode == StreamMode::Rotation { epsilon } else { 0.0 },
        ..ModelConfig::micro()
    };
    let plen = rng.random_range(1..=5);
    let prompt = (0..plen).map(|_| rng.random_range(0..config.vocab_size as u32)).collect();
    let params = GenerateParams {
        max_new: rng.random_range(1..=16),
        gamma: rng.random_range(1..=4),
        k: rng.random_range(1..=3),
        tau: [0.0, 0.05, 0.5][rng.random_range(0..3)],
        ..Default::default()
    };
    EquivalenceCase { seed, config, prompt, params }
}

fn cmd_check(a: &CheckArgs) -> Result<()> {
    let results: Vec<(u64, bool)> = (0..a.cases as u64)
        .into_par_iter()
        .map(|i| {
            let seed = a.seed.wrapping_add(i);
            let c = equivalence_case(seed, a.stream_mode, a.epsilon);
            let model = Model::init(c.config, seed, a.precision)?;
            let (got, _) = generate(&model, &c.prompt, &c.params)?;
            let want = reference_generate(&model, &c.prompt, c.params.max_new, None)?;
            Ok((seed, got == want))
        })
        .collect::<Result<_>>()?;
    let failures: Vec<u64> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    emit_json(
        a.out.as_deref(),
        json!({ "cases": a.cases, "matched": a.cases - failures.len(), "failing_seeds": failures }),
    )?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::logic(format!("{} of {} cases diverged from greedy decoding", failures.len(), a.cases)))
    }
}
