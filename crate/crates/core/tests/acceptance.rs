//! End-to-end acceptance checks. Runs without the test harness so that each
//! criterion prints exactly one PASS/FAIL line; exits nonzero on any failure.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use specstream::cli::{bench, equivalence_case};
use specstream::model::{msa_mask, tensor_layout, ParamClass};
use specstream::perf::{parity_zeta, speedup_over_draft_target, PerfParams};
use specstream::training::{
    early_exit_loss, loss_gradients, speculative_loss, train, LanguageKind, LossWeights, Optimizer, SyntheticLanguage,
    TrainConfig, TrainExample,
};
use specstream::{
    build_mask, build_tree, generate, msa_batch_size, prune, reference_generate, tree_size, FlatBatch, GenerateParams,
    Model, ModelConfig, ModelWeights, Precision, StreamInit, StreamMode,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: specstream::Error) -> String {
    e.to_string()
}

/// Shape shared by the trained-model criteria.
fn lm_config(streams: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        hidden_size: 16,
        num_heads: 2,
        num_layers: 2,
        msa_layers: 1,
        num_streams: streams,
        prune_rank: 4,
        max_seq_len: 24,
        ..ModelConfig::micro()
    }
}

fn adam(steps: usize, streams: usize, seq_len: usize) -> TrainConfig {
    TrainConfig { steps, learning_rate: 0.01, optimizer: Optimizer::adam(), ..TrainConfig::new(streams, seq_len) }
}

fn counting_language() -> SyntheticLanguage {
    SyntheticLanguage::counting(16)
}

fn trained_counting() -> &'static Result<Model, String> {
    static MODEL: OnceLock<Result<Model, String>> = OnceLock::new();
    MODEL.get_or_init(|| {
        let m = Model::init(lm_config(4), 1, Precision::F32).map_err(err)?;
        train(m, &counting_language(), &adam(400, 4, 24)).map(|r| r.0).map_err(err)
    })
}

/// Every start token of `lang`, followed by its two successors.
fn prompts(lang: &SyntheticLanguage) -> Vec<Vec<u32>> {
    lang.alphabet().into_iter().map(|s| lang.continue_from(s, 3)).collect()
}

/// Generated tokens over target calls, summed over all prompts.
fn call_reduction(model: &Model, prompts: &[Vec<u32>], params: &GenerateParams) -> Result<f64, String> {
    let (mut tokens, mut calls) = (0, 0);
    for p in prompts {
        let (_, m) = generate(model, p, params).map_err(err)?;
        tokens += m.generated_tokens;
        calls += m.target_calls;
    }
    Ok(tokens as f64 / calls as f64)
}

fn c1_greedy_equivalence() -> Outcome {
    let cases = 120;
    let results: Vec<(u64, bool)> = (0..cases)
        .into_par_iter()
        .map(|seed| {
            let c = equivalence_case(seed, None, 0.02);
            let m = Model::init(c.config, seed, Precision::F32).map_err(err)?;
            let got = generate(&m, &c.prompt, &c.params).map_err(err)?.0;
            let want = reference_generate(&m, &c.prompt, c.params.max_new, None).map_err(err)?;
            Ok((seed, got == want))
        })
        .collect::<Result<_, String>>()?;
    let failures: Vec<u64> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    ensure(failures.is_empty(), || format!("diverging seeds {failures:?}"))?;
    Ok(format!("{cases} cases token-identical"))
}

fn c2_isolation() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = if seed % 2 == 0 { StreamMode::Embedding } else { StreamMode::Rotation };
        let layers = rng.random_range(2..=4);
        let cfg = ModelConfig {
            num_layers: layers,
            msa_layers: rng.random_range(1..layers),
            num_streams: 4,
            stream_mode: mode,
            rotation_step: if mode == StreamMode::Rotation { 0.03 } else { 0.0 },
            stream_init: if seed % 3 == 0 { StreamInit::LowRank { rank: 3 } } else { StreamInit::Identity },
            ..ModelConfig::micro()
        };
        let m = Model::init(cfg, 100 + seed, Precision::F32).map_err(err)?;
        let len = rng.random_range(1..=12);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..11)).collect();
        let batch = FlatBatch::causal(&tokens, 0).map_err(err)?;
        let with = m.forward(&mut m.new_cache(), &batch, 4).map_err(err)?;
        let without = m.forward(&mut m.new_cache(), &batch, 0).map_err(err)?;
        let d = with.main_logits.data().iter().zip(without.main_logits.data()).map(|(a, b)| (a - b).abs());
        worst = d.fold(worst, f64::max);
    }
    ensure(worst <= 1e-6, || format!("max main-logit difference {worst:e}"))?;
    Ok(format!("20 f32 models, max main-logit difference {worst:e}"))
}

fn nudge(w: &mut ModelWeights, name: &str, i: usize, dx: f64) {
    w.visit_mut(&mut |n, t| {
        if n == name {
            t.data_mut()[i] += dx;
        }
    });
}

fn grad_at(w: &ModelWeights, name: &str, i: usize) -> f64 {
    w.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t.data()[i]).expect("tensor exists")
}

fn gradcheck(
    model: &Model,
    batch: &[TrainExample],
    weights: &LossWeights,
    per_tensor: usize,
    seed: u64,
) -> Result<(BTreeSet<ParamClass>, usize, f64), String> {
    let g = loss_gradients(model, batch, weights).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-5;
    let (mut classes, mut checked, mut worst) = (BTreeSet::new(), 0, 0.0f64);
    for spec in tensor_layout(&model.config) {
        let len: usize = spec.shape.iter().product();
        let adapter = spec.class == ParamClass::PruneAdapter;
        let eval = |m: &Model| if adapter { early_exit_loss(m, batch) } else { speculative_loss(m, batch, weights) };
        for i in sample(&mut rng, len, per_tensor.min(len)) {
            let mut probe = model.clone();
            nudge(&mut probe.weights, &spec.name, i, step);
            let up = eval(&probe).map_err(err)?;
            nudge(&mut probe.weights, &spec.name, i, -2.0 * step);
            let down = eval(&probe).map_err(err)?;
            let fd = (up - down) / (2.0 * step);
            let an = grad_at(&g.grads, &spec.name, i);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            ensure(rel <= 1e-4, || format!("{}[{i}]: analytic {an:e}, numeric {fd:e}, rel {rel:e}", spec.name))?;
            worst = worst.max(rel);
            classes.insert(spec.class);
            checked += 1;
        }
    }
    Ok((classes, checked, worst))
}

fn c3_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut batch = |n: usize, len: usize, ctx: usize| -> Vec<TrainExample> {
        (0..n)
            .map(|_| {
                let s: Vec<u32> = (0..len).map(|_| rng.random_range(0..11)).collect();
                TrainExample::from_sequence(&s, ctx).expect("valid split")
            })
            .collect()
    };
    let low_rank = ModelConfig { stream_init: StreamInit::LowRank { rank: 2 }, ..ModelConfig::micro() };
    let m = Model::init(low_rank, 31, Precision::F64).map_err(err)?;
    let w = LossWeights::new(vec![1.0, 0.4, 0.2]).map_err(err)?;
    let (classes, n1, w1) = gradcheck(&m, &batch(2, 7, 2), &w, 6, 1)?;
    ensure(classes.len() == 8, || format!("covered only {classes:?}"))?;

    let rot = ModelConfig { stream_mode: StreamMode::Rotation, rotation_step: 0.04, ..ModelConfig::micro() };
    let m = Model::init(rot, 32, Precision::F64).map_err(err)?;
    let (_, n2, w2) = gradcheck(&m, &batch(2, 6, 1), &w, 2, 2)?;
    let total = n1 + n2;
    ensure(total >= 200, || format!("only {total} coordinates"))?;
    Ok(format!("{total} coordinates over all 8 tensor classes, max rel error {:e}", w1.max(w2)))
}

fn c4_training_benchmark() -> Outcome {
    let lang = counting_language();
    let p = prompts(&lang);
    let params = GenerateParams { max_new: 20, gamma: 4, k: 1, tau: 0.0, ..Default::default() };
    // a single random init can land on a repetitive fixed point that drafts
    // well, so the untrained baseline is averaged over ten inits
    let random = (0..10u64)
        .map(|seed| {
            Model::init(lm_config(4), seed, Precision::F32).map_err(err).and_then(|m| call_reduction(&m, &p, &params))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cr_random = random.iter().sum::<f64>() / random.len() as f64;
    let worst_random = random.iter().cloned().fold(0.0, f64::max);
    let trained = trained_counting().as_ref().map_err(Clone::clone)?;
    let cr_trained = call_reduction(trained, &p, &params)?;
    ensure(cr_trained >= 3.0 && cr_random <= 1.2, || {
        format!("trained CR {cr_trained:.3} (need >= 3), mean random CR {cr_random:.3} (need <= 1.2)")
    })?;
    Ok(format!(
        "400 steps: trained CR {cr_trained:.3}; random CR mean {cr_random:.3} over 10 inits (max {worst_random:.3})"
    ))
}

fn c5_size_formulas() -> Outcome {
    let cfg = ModelConfig { num_streams: 4, max_seq_len: 160, ..ModelConfig::micro() };
    let m = Model::init(cfg, 5, Precision::F32).map_err(err)?;
    let prompt = [3u32, 1, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cells = 0;
    for gamma in 1..=4 {
        for k in 1..=3 {
            let rows: Vec<Vec<f64>> = (0..gamma).map(|_| (0..11).map(|_| rng.random::<f64>()).collect()).collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let tree = build_tree(2, &refs, k).map_err(err)?;
            let realized = msa_mask(&build_mask(&tree, prompt.len()), gamma);

            let mut cache = m.new_cache();
            m.forward(&mut cache, &FlatBatch::causal(&prompt, 0).map_err(err)?, gamma).map_err(err)?;
            cache.commit(&[0, 1, 2]).map_err(err)?;
            let out = m.forward(&mut cache, &FlatBatch::from_tree(&tree, prompt.len()), gamma).map_err(err)?;
            let processed = out.main_logits.rows() + out.stream_logits.rows();

            let want_tree = 1 + (1..=gamma as u32).map(|g| k.pow(g)).sum::<usize>();
            let want_batch = (1 + gamma) * want_tree;
            ensure(tree.len() == want_tree && tree_size(gamma, k) == want_tree, || {
                format!("γ={gamma} k={k}: tree has {} nodes, expected {want_tree}", tree.len())
            })?;
            ensure(
                processed == want_batch && realized.rows() == want_batch && msa_batch_size(gamma, k) == want_batch,
                || {
                    format!(
                        "γ={gamma} k={k}: {processed} rows processed, mask {} rows, expected {want_batch}",
                        realized.rows()
                    )
                },
            )?;
            cells += 1;
        }
    }
    Ok(format!("{cells} (γ, k) cells, tree sizes and stream-layer batch rows exact"))
}

fn c6_analytic_parity() -> Outcome {
    let base = PerfParams { gamma: 4.0, c_draft: 1.0, c_target: 10.0, c_ss: 10.0, zeta: 1.0, beta: 1.0 };
    let root = parity_zeta(&base);
    ensure(root == 1.4, || format!("parity ζ at β=1 is {root}"))?;
    for beta in [0.5, 2.0, 3.5] {
        let z = parity_zeta(&PerfParams { beta, ..base });
        ensure((z - 1.4 * beta).abs() <= 4.0 * f64::EPSILON * z, || format!("β={beta}: parity ζ {z}"))?;
    }
    for tenth in 5..=20 {
        let zob = tenth as f64 / 10.0;
        let s = speedup_over_draft_target(&PerfParams { zeta: zob, ..base });
        ensure((s < 1.0) == (zob > root), || format!("ζ/β={zob}: speedup {s} on the wrong side of parity {root}"))?;
    }
    Ok(format!(
        "parity ζ = 1.4 at β=1 exactly, 1.4β to rounding elsewhere; speedup < 1 iff ζ/β > {root} over 16 grid points"
    ))
}

fn c7_pruning() -> Outcome {
    let taus = [0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0];
    let mut trees = 0;
    for seed in 0..30u64 {
        let cfg = ModelConfig { num_streams: 3, max_seq_len: 64, ..ModelConfig::micro() };
        let m = Model::init(cfg, 200 + seed, Precision::F32).map_err(err)?;
        let mut cache = m.new_cache();
        let prompt = [(seed % 11) as u32, 4, 7];
        let out = m.forward(&mut cache, &FlatBatch::causal(&prompt, 0).map_err(err)?, 3).map_err(err)?;
        cache.commit(&[0, 1, 2]).map_err(err)?;
        let tree = build_tree(5, &out.stream_rows(2), 1 + seed as usize % 3).map_err(err)?;
        let (hidden, _) = m.forward_lower(&mut cache, &FlatBatch::from_tree(&tree, 3)).map_err(err)?;
        let probs = m.early_exit_probs(&hidden).map_err(err)?;
        let sizes = taus
            .iter()
            .map(|&t| prune(&tree, &probs, t).map(|p| p.len()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        ensure(prune(&tree, &probs, 0.0).map_err(err)? == tree, || "τ = 0 changed the tree".into())?;
        ensure(sizes.windows(2).all(|w| w[0] >= w[1]), || format!("node counts {sizes:?} not monotone in τ"))?;
        trees += 1;
    }

    let cases = 100u64;
    let mut pruned = 0;
    for seed in 0..cases {
        let c = equivalence_case(seed + 1000, None, 0.02);
        let m = Model::init(c.config, seed, Precision::F32).map_err(err)?;
        let mut outputs = Vec::new();
        for tau in [0.0, 0.05, 0.5, 1.0] {
            let (t, metrics) = generate(&m, &c.prompt, &GenerateParams { tau, ..c.params.clone() }).map_err(err)?;
            pruned += metrics.pruned_nodes;
            outputs.push(t);
        }
        ensure(outputs.windows(2).all(|w| w[0] == w[1]), || format!("seed {}: output depends on τ", seed + 1000))?;
    }
    Ok(format!(
        "{trees} trees monotone over {} thresholds; {cases} cases τ-invariant ({pruned} nodes pruned)",
        taus.len()
    ))
}

fn cr_monotone_in_k(model: &Model, lang: &SyntheticLanguage) -> Result<Vec<Vec<f64>>, String> {
    let rows = bench(model, &prompts(lang), &[1, 2, 3, 4], &[1, 2, 3], &[0.0], 20).map_err(err)?;
    let table: Vec<Vec<f64>> =
        (1..=4).map(|g| rows.iter().filter(|r| r.gamma == g).map(|r| r.cr_ratio).collect()).collect();
    for (g, crs) in table.iter().enumerate() {
        ensure(crs.windows(2).all(|w| w[1] >= w[0]), || format!("γ={}: CR over k = {crs:?}", g + 1))?;
    }
    Ok(table)
}

fn c8_trends() -> Outcome {
    let counting = trained_counting().as_ref().map_err(Clone::clone)?;
    cr_monotone_in_k(counting, &counting_language())?;

    let keyed = SyntheticLanguage::new(LanguageKind::KeyedLookup, 16, 5).map_err(err)?;
    let m = Model::init(lm_config(4), 1, Precision::F32).map_err(err)?;
    let partial = train(m, &keyed, &adam(100, 4, 24)).map_err(err)?.0;
    let table = cr_monotone_in_k(&partial, &keyed)?;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(77);
    let eval: Vec<TrainExample> = (0..32)
        .map(|_| TrainExample::from_sequence(&keyed.sample(16, &mut eval_rng), 1).expect("valid split"))
        .collect();
    let weights = LossWeights::with_stream_weight(3, 0.1);
    let mut nll = Vec::new();
    for ns in 1..=3 {
        let cfg = ModelConfig { num_layers: 4, msa_layers: ns, num_streams: 3, max_seq_len: 16, ..lm_config(3) };
        let m = Model::init(cfg, 2, Precision::F32).map_err(err)?;
        let trained = train(m, &keyed, &adam(150, 3, 16)).map_err(err)?.0;
        nll.push(speculative_loss(&trained, &eval, &weights).map_err(err)?);
    }
    ensure(nll.windows(2).all(|w| w[1] <= w[0]), || format!("held-out loss over N_s = 1..3: {nll:?}"))?;
    let k_row = &table[3];
    Ok(format!(
        "CR non-decreasing in k for γ=1..4 (keyed γ=4: {:.2}, {:.2}, {:.2}); loss over N_s=1..3: {:.3}, {:.3}, {:.3}",
        k_row[0], k_row[1], k_row[2], nll[0], nll[1], nll[2]
    ))
}

fn c9_degeneracy() -> Outcome {
    let with_streams = Model::init(ModelConfig::micro(), 9, Precision::F64).map_err(err)?;
    let plain_cfg = ModelConfig { num_streams: 0, ..ModelConfig::micro() };
    let mut plain_weights = with_streams.weights.clone();
    plain_weights.stream_embeddings.clear();
    let plain = Model::new(plain_cfg, plain_weights).map_err(err)?;

    let lang = SyntheticLanguage::new(LanguageKind::KeyedLookup, 11, 3).map_err(err)?;
    let run = |m: Model, alphas: Vec<f64>| {
        let cfg = TrainConfig {
            steps: 40,
            log_every: 1,
            loss_weights: LossWeights::new(alphas).expect("valid weights"),
            ..adam(40, 0, 10)
        };
        train(m, &lang, &cfg).map(|r| r.1.curve)
    };
    let a = run(with_streams, vec![1.0, 0.0, 0.0]).map_err(err)?;
    let b = run(plain, vec![1.0]).map_err(err)?;
    let worst = a.iter().zip(&b).map(|(x, y)| (x.loss - y.loss).abs()).fold(0.0, f64::max);
    ensure(a.len() == b.len() && worst <= 1e-12, || format!("loss curves differ by {worst:e}"))?;
    let nll_match = a.iter().all(|r| (r.loss - r.main_nll).abs() <= 1e-12);
    ensure(nll_match, || "loss is not the plain next-token NLL".into())?;
    Ok(format!("{} steps, max loss difference {worst:e}", a.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("greedy equivalence", c1_greedy_equivalence),
        ("main-stream isolation", c2_isolation),
        ("gradient check", c3_gradient_check),
        ("training benchmark", c4_training_benchmark),
        ("size formulas", c5_size_formulas),
        ("analytic parity", c6_analytic_parity),
        ("pruning properties", c7_pruning),
        ("qualitative trends", c8_trends),
        ("stream-weight degeneracy", c9_degeneracy),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS [{secs:.1}s] {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL [{secs:.1}s] {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
