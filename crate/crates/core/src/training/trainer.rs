use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_gradients, LossWeights, SyntheticLanguage, TrainExample};
use crate::error::{Error, Result};
use crate::model::io::{save_model, ModelFiles};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Writes a checkpoint every `every` steps into `dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpointing {
    pub dir: PathBuf,
    pub every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Tokens per training sequence, context included.
    pub seq_len: usize,
    pub context_len: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step, as a fraction of the initial one.
    pub final_lr_fraction: f64,
    pub optimizer: Optimizer,
    pub loss_weights: LossWeights,
    /// Rescales the gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
    #[serde(default)]
    pub checkpoint: Option<Checkpointing>,
}

impl TrainConfig {
    /// SGD with `α_j = 0.1` and a linear decay to zero.
    pub fn new(streams: usize, seq_len: usize) -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            seq_len,
            context_len: 1,
            learning_rate: 0.1,
            final_lr_fraction: 0.0,
            optimizer: Optimizer::Sgd,
            loss_weights: LossWeights::with_stream_weight(streams, 0.1),
            clip_norm: Some(1.0),
            seed: 0,
            log_every: 10,
            checkpoint: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::param("steps, batch size and log interval must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::param("final learning-rate fraction must lie in [0, 1]"));
        }
        if matches!(self.checkpoint, Some(Checkpointing { every: 0, .. })) {
            return Err(Error::param("checkpoint interval must be positive"));
        }
        self.loss_weights.validate()
    }

    fn lr_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.steps as f64;
        self.learning_rate * (1.0 - (1.0 - self.final_lr_fraction) * frac)
    }
}

/// Mean per-token losses of one logged step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub main_nll: f64,
    pub stream_nll: Vec<f64>,
    pub early_exit_nll: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<LossRecord>,
    pub forward_passes: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&LossRecord> {
        self.curve.last()
    }
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

fn tensors(grads: &crate::model::ModelWeights) -> Vec<&Tensor> {
    let mut out = Vec::new();
    grads.visit(&mut |_, t| out.push(t));
    out
}

/// Trains `model` on sequences of `language`. Returns the updated model
/// and the logged loss curve.
pub fn train(mut model: Model, language: &SyntheticLanguage, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if language.vocab_size() > model.config.vocab_size {
        return Err(Error::param("language vocabulary exceeds the model's"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut adam: Option<AdamState> = None;
    let prec = model.precision();

    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| TrainExample::from_sequence(&language.sample(cfg.seq_len, &mut rng), cfg.context_len))
            .collect::<Result<Vec<_>>>()?;
        let g = loss_gradients(&model, &batch, &cfg.loss_weights)?;
        report.forward_passes += g.forward_passes;
        if !g.loss.is_finite() || !g.early_exit_loss.is_finite() {
            return Err(Error::Training { step, reason: format!("loss is {}", g.loss) });
        }
        let grads = tensors(&g.grads);
        let norm = grads.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Training { step, reason: "gradient is not finite".into() });
        }
        let clip = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = cfg.lr_at(step);

        let mut idx = 0;
        match cfg.optimizer {
            Optimizer::Sgd => model.weights.visit_mut(&mut |_, p| {
                for (w, &d) in p.data_mut().iter_mut().zip(grads[idx].data()) {
                    *w = prec.round(*w - lr * clip * d);
                }
                idx += 1;
            }),
            Optimizer::Adam { beta1, beta2, eps } => {
                let st = adam.get_or_insert_with(|| AdamState {
                    m: grads.iter().map(|t| vec![0.0; t.len()]).collect(),
                    v: grads.iter().map(|t| vec![0.0; t.len()]).collect(),
                    t: 0,
                });
                st.t += 1;
                let c1 = 1.0 - beta1.powi(st.t);
                let c2 = 1.0 - beta2.powi(st.t);
                model.weights.visit_mut(&mut |_, p| {
                    let (m, v) = (&mut st.m[idx], &mut st.v[idx]);
                    for (k, (w, &d)) in p.data_mut().iter_mut().zip(grads[idx].data()).enumerate() {
                        let d = d * clip;
                        m[k] = beta1 * m[k] + (1.0 - beta1) * d;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * d * d;
                        *w = prec.round(*w - lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps));
                    }
                    idx += 1;
                });
            }
        }

        let last = step + 1 == cfg.steps;
        if step % cfg.log_every == 0 || last {
            let b = &g.breakdown;
            report.curve.push(LossRecord {
                step,
                loss: g.loss,
                main_nll: b.mean_main(),
                stream_nll: (1..=b.stream_nll.len()).map(|j| b.mean_stream(j)).collect(),
                early_exit_nll: b.mean_early_exit(),
            });
        }
        if let Some(ck) = &cfg.checkpoint {
            if (step + 1) % ck.every == 0 || last {
                std::fs::create_dir_all(&ck.dir)?;
                let files = ModelFiles::in_dir(&ck.dir, &format!("step{:06}", step + 1));
                save_model(&model, &files)?;
                report.checkpoints.push(files.manifest);
            }
        }
    }
    Ok((model, report))
}

/// Loss curve as CSV: step, loss, main NLL, one column per stream, early-exit NLL.
pub fn write_curve_csv(curve: &[LossRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let streams = curve.first().map_or(0, |r| r.stream_nll.len());
    let mut header = vec!["step".to_string(), "loss".into(), "main_nll".into()];
    header.extend((1..=streams).map(|j| format!("stream_{j}_nll")));
    header.push("early_exit_nll".into());
    w.write_record(&header)?;
    for r in curve {
        let mut row = vec![r.step.to_string(), r.loss.to_string(), r.main_nll.to_string()];
        row.extend(r.stream_nll.iter().map(|x| x.to_string()));
        row.push(r.early_exit_nll.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
