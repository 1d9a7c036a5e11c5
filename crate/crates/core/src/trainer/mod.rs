//! Mini-batch training, evaluation and checkpointing shared by both models.

mod checkpoint;
mod metrics;
mod models;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::parallel::Execution;
use crate::tensor::{AdamW, AdamWConfig, ParamGrads, ParamStore};

pub use checkpoint::{Checkpoint, CheckpointHeader, ModelKind, TensorEntry, FORMAT_VERSION};
pub use metrics::{Confusion, EvalReport, HeadMetrics};
pub use models::{load_model, LoadedModel};

/// A model the training loop can drive.
pub trait Classifier: Sync {
    type Example: Sync;

    fn kind(&self) -> ModelKind;
    fn params(&self) -> &ParamStore<f32>;
    fn params_mut(&mut self) -> &mut ParamStore<f32>;
    /// Output head names.
    fn heads(&self) -> Vec<String>;
    /// Per-head targets, `None` where a label is absent.
    fn targets(&self, ex: &Self::Example) -> Vec<Option<f32>>;
    /// Training loss of one example and its gradients. `dropout_seed`
    /// switches on stochastic layers.
    fn loss_and_grads(&self, ex: &Self::Example, dropout_seed: u64) -> Result<(f32, ParamGrads<f32>)>;
    /// Inference-mode loss and per-head probabilities.
    fn score(&self, ex: &Self::Example) -> Result<(f32, Vec<f32>)>;
    fn config_json(&self) -> serde_json::Value;

    /// Index of the protest head among [`Classifier::heads`].
    fn primary_head(&self) -> usize {
        0
    }

    /// Binary label of the primary head (used for class weighting).
    fn primary_label(&self, ex: &Self::Example) -> usize {
        usize::from(self.targets(ex)[self.primary_head()].is_some_and(|y| y >= 0.5))
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.kind(), self.config_json(), self.params().clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear ramp over the first 5% of steps, then linear decay to zero.
    #[default]
    WarmupLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub schedule: Schedule,
    pub seed: u64,
    /// Evaluations without validation-accuracy improvement before stopping.
    pub patience: usize,
    /// Loss weight for labels 0 and 1 of the primary head.
    pub class_weights: Option<[f32; 2]>,
    /// Evaluate every this many steps; 0 means once per epoch.
    pub eval_every: usize,
    pub threshold: f32,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 0.01,
            schedule: Schedule::WarmupLinear,
            seed: 7,
            patience: 3,
            class_weights: None,
            eval_every: 0,
            threshold: 0.5,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.epochs == 0 {
            bail!(Config, "epochs, batch_size and patience must all be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!(Config, "lr and weight_decay must be finite and non-negative");
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                bail!(Config, "class weights must be positive, got {w:?}");
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            bail!(Config, "threshold must lie in [0, 1]");
        }
        Ok(())
    }

    /// Learning rate for 1-based `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f32 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::WarmupLinear => {
                let warmup = ((total as f64 * 0.05).ceil() as usize).max(1);
                if step <= warmup {
                    self.lr * step as f32 / warmup as f32
                } else if total > warmup {
                    self.lr * (total - step.min(total)) as f32 / (total - warmup) as f32
                } else {
                    self.lr
                }
            }
        }
    }
}

/// One line of `history.csv`. Train rows carry only the batch loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub steps: usize,
    pub best_step: Option<usize>,
    pub best_val: Option<EvalReport>,
    pub stopped_early: bool,
}

/// Weighted mean loss and gradient over a batch; reduction runs in batch
/// order so the result does not depend on scheduling.
pub fn batch_gradients<C: Classifier>(model: &C, batch: &[&C::Example], seeds: &[u64], class_weights: Option<[f32; 2]>, execution: Execution) -> Result<(f32, ParamGrads<f32>)> {
    if batch.is_empty() {
        bail!(State, "empty batch");
    }
    let jobs: Vec<(&C::Example, u64)> = batch.iter().copied().zip(seeds.iter().copied()).collect();
    let per = execution.try_map(&jobs, |_, (ex, seed)| model.loss_and_grads(ex, *seed))?;
    let mut total = ParamGrads::empty(model.params().len());
    let (mut loss, mut wsum) = (0.0f32, 0.0f32);
    for ((l, g), (ex, _)) in per.iter().zip(&jobs) {
        let w = class_weights.map_or(1.0, |cw| cw[model.primary_label(ex)]);
        total.accumulate(g, w);
        loss += w * l;
        wsum += w;
    }
    total.scale(1.0 / wsum);
    Ok((loss / wsum, total))
}

/// Scores every example in input order.
pub fn evaluate<C: Classifier>(model: &C, examples: &[C::Example], threshold: f32, execution: Execution) -> Result<EvalReport> {
    if examples.is_empty() {
        bail!(Parameter, "cannot evaluate an empty split");
    }
    let scored = execution.try_map(examples, |_, ex| model.score(ex))?;
    let (losses, probs): (Vec<f32>, Vec<Vec<f32>>) = scored.into_iter().unzip();
    let targets: Vec<_> = examples.iter().map(|ex| model.targets(ex)).collect();
    Ok(EvalReport::from_predictions(&model.heads(), model.primary_head(), &probs, &targets, &losses, threshold))
}

/// Shuffled mini-batch AdamW training with periodic validation, early
/// stopping on validation accuracy, and restoration of the best weights.
pub fn train<C: Classifier>(model: &mut C, train_set: &[C::Example], val_set: &[C::Example], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        bail!(Parameter, "training split is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_epoch = train_set.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let eval_every = if config.eval_every == 0 { per_epoch } else { config.eval_every };
    let mut opt = AdamW::new(AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamWConfig::default() }, model.params());
    let mut out = TrainOutcome { history: Vec::new(), steps: 0, best_step: None, best_val: None, stopped_early: false };
    let mut best_params: Option<ParamStore<f32>> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let step = out.steps + 1;
            let batch: Vec<&C::Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let (loss, grads) = batch_gradients(model, &batch, &seeds, config.class_weights, config.execution).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                other => other,
            })?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Numeric(format!("non-finite loss or gradient at step {step} (loss {loss})")));
            }
            opt.step_with_lr(model.params_mut(), &grads, config.lr_at(step, total))?;
            out.steps = step;
            out.history.push(HistoryRow { step, split: "train", loss: loss as f64, accuracy: None, precision: None, recall: None, f1: None });
            log::debug!("step {step}/{total} loss {loss:.5}");

            if !val_set.is_empty() && (step % eval_every == 0 || step == total) {
                let r = evaluate(model, val_set, config.threshold, config.execution)?;
                log::info!("step {step}: val loss {:.5} accuracy {:.4}", r.loss, r.accuracy);
                out.history.push(HistoryRow {
                    step,
                    split: "val",
                    loss: r.loss,
                    accuracy: Some(r.accuracy),
                    precision: Some(r.precision),
                    recall: Some(r.recall),
                    f1: Some(r.f1),
                });
                if out.best_val.as_ref().is_none_or(|b| r.accuracy > b.accuracy) {
                    out.best_step = Some(step);
                    out.best_val = Some(r);
                    best_params = Some(model.params().clone());
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience {
                        out.stopped_early = true;
                        break 'epochs;
                    }
                }
            }
        }
    }
    if let Some(best) = best_params {
        *model.params_mut() = best;
    }
    Ok(out)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// `step,split,loss,accuracy,precision,recall,f1`
pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "split", "loss", "accuracy", "precision", "recall", "f1"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.split.to_string(),
            format!("{:.6}", r.loss),
            fmt_metric(r.accuracy),
            fmt_metric(r.precision),
            fmt_metric(r.recall),
            fmt_metric(r.f1),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
