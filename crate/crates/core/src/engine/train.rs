//! The training loop: deterministic batches, forward + backward on a
//! fresh tape per step, gradient clipping, AdamW, metrics logging, and
//! checkpointing. One step is a serial critical section.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::engine::checkpoint;
use crate::engine::optim::{lr_schedule, AdamWHyper, OptimizerState};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tape, Tensor};

fn default_warmup() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    1.0
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSet {
    pub mlm: bool,
    pub itm: bool,
}

impl Default for ObjectiveSet {
    fn default() -> Self {
        ObjectiveSet { mlm: true, itm: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(rename = "batch_size")]
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub objectives: ObjectiveSet,
    /// Steps between stdout progress lines; 0 silences progress.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1,
            batch_size: default_batch(),
            peak_lr: 1e-3,
            warmup_frac: default_warmup(),
            clip_norm: default_clip(),
            seed: 0,
            eval_every: None,
            checkpoint_every: None,
            objectives: ObjectiveSet::default(),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "train.warmup_frac {} outside [0, 1)",
                self.warmup_frac
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A differentiable training objective: produces the scalar loss to
/// backprop plus named component values for logging.
pub trait Objective<S: Scalar> {
    fn loss(&self, g: &Graph<S>, model: &Model<S>, batch: &Batch<S>) -> Result<LossParts<S>>;
}

pub struct LossParts<S: Scalar> {
    pub total: Tensor<S>,
    pub components: Vec<(&'static str, f64)>,
}

/// Deterministic batch provider: the batch for a step is a pure function
/// of (seed, step).
pub trait BatchSource<S: Scalar> {
    fn batch(&self, step: usize) -> Result<Batch<S>>;
}

#[derive(Debug, Clone, Serialize)]
struct MetricsRecord<'a> {
    step: usize,
    lr: f64,
    loss: f64,
    grad_norm: f64,
    #[serde(flatten)]
    components: std::collections::BTreeMap<&'a str, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_loss: f64,
    pub final_components: Vec<(&'static str, f64)>,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub wall_seconds: f64,
}

/// Run `config.steps` optimization steps. Freezing must already be
/// applied: the optimizer is built from the model's current trainable
/// set. Writes `metrics.jsonl` (deterministic fields only; wall-clock
/// goes to stdout and the summary), checkpoints at the configured
/// cadence, and always a final checkpoint. A non-finite loss aborts with
/// the last good checkpoint retained.
pub fn train<S: Scalar>(
    model: &Model<S>,
    objective: &dyn Objective<S>,
    source: &dyn BatchSource<S>,
    config: &TrainConfig,
    hyper: AdamWHyper,
    run_dir: &Path,
) -> Result<TrainSummary> {
    config.validate()?;
    fs::create_dir_all(run_dir)?;
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path)?;

    let mut optimizer = OptimizerState::new(model, hyper);
    optimizer.zero_grads();
    let started = Instant::now();
    let mut last_good: Option<PathBuf> = None;
    let mut final_loss = f64::NAN;
    let mut final_components: Vec<(&'static str, f64)> = Vec::new();

    for step in 0..config.steps {
        let batch = source.batch(step)?;
        let tape = Tape::new();
        let g = Graph::recording(&tape).train_mode(config.seed, step as u64);
        let parts = objective.loss(&g, model, &batch)?;
        let loss_value = parts.total.item().to_f64_lossy();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last_good: last_good.clone(),
            });
        }
        tape.backward(&parts.total)?;
        optimizer.seed_missing_grads();
        let grad_norm = optimizer.clip_gradients(config.clip_norm)?;
        let lr = lr_schedule(step, config.steps, config.peak_lr, config.warmup_frac);
        optimizer.step(lr)?;
        optimizer.zero_grads();

        let record = MetricsRecord {
            step,
            lr,
            loss: loss_value,
            grad_norm,
            components: parts.components.iter().copied().collect(),
        };
        serde_json::to_writer(&mut metrics, &record)?;
        metrics.write_all(b"\n")?;

        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps) {
            println!(
                "step {step:>6}  loss {loss_value:>9.4}  lr {lr:.2e}  {:.1}s",
                started.elapsed().as_secs_f64()
            );
        }
        if let Some(every) = config.checkpoint_every {
            if every > 0 && (step + 1) % every == 0 && step + 1 != config.steps {
                let path = ckpt_dir.join(format!("step{:06}.ckpt", step + 1));
                checkpoint::save(model, &path, config.seed, (step + 1) as u64)?;
                last_good = Some(path);
            }
        }
        final_loss = loss_value;
        final_components = parts.components;
    }

    let final_path = ckpt_dir.join("final.ckpt");
    checkpoint::save(model, &final_path, config.seed, config.steps as u64)?;
    Ok(TrainSummary {
        final_loss,
        final_components,
        final_checkpoint: final_path,
        metrics_path,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
