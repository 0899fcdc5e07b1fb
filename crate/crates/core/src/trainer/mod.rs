//! Deterministic training: AdamW with linear warmup/decay on masked
//! next-token loss, synthetic task data, exact-match evaluation, and
//! checkpoint I/O. Identical seeds and configs give bit-identical metrics
//! and final weights.

pub mod checkpoint;
pub mod optim;
pub mod tasks;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{apply_adapters, AdapterConfig, AdapterError};
use crate::linalg::LinalgError;
use crate::nn::{Model, NnError};
use crate::seeds::{derive_seed, fmt_g17};

pub use checkpoint::{
    load_adapter_into, load_checkpoint, read_checkpoint_meta, save_adapter_checkpoint,
    save_checkpoint, CheckpointError, CheckpointMeta,
};
pub use optim::{lr_at, AdamW};
pub use tasks::{generate_task, Dataset, Example, TaskKind, TaskSpec};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid training config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("step {step} is outside the schedule (total {total})")]
    StepOutOfRange { step: usize, total: usize },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("gradient for `{name}` is non-finite at ({row}, {col})")]
    NonFiniteGradient { name: String, row: usize, col: usize },
    #[error("gradient for `{name}` has shape {grad_rows}x{grad_cols}, parameter is {param_rows}x{param_cols}")]
    GradientShapeMismatch {
        name: String,
        param_rows: usize,
        param_cols: usize,
        grad_rows: usize,
        grad_cols: usize,
    },
    #[error("parameter `{name}` is frozen; refusing to update it")]
    FrozenParameterGradient { name: String },
    #[error("invalid task spec: {0}")]
    InvalidTask(String),
    #[error("task cannot produce {requested} distinct examples; capacity is {capacity}")]
    TaskCapacityExceeded { requested: usize, capacity: usize },
    #[error("task generation stalled after {attempts} attempts for {requested} examples")]
    GenerationStalled { attempts: usize, requested: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("examples exceed max_seq_len {max}: sequence of length {len}")]
    SequenceTooLong { len: usize, max: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn default_lr() -> f64 {
    3e-4
}
fn default_warmup() -> usize {
    100
}
fn default_batch() -> usize {
    16
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_total() -> usize {
    500
}
fn default_max_seq_len() -> usize {
    32
}

/// Optimization hyperparameters. `total_steps == 0` is a documented no-op
/// run that returns the model unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_total")]
    pub total_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            warmup_steps: default_warmup(),
            total_steps: default_total(),
            batch_size: default_batch(),
            weight_decay: 0.0,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            seed: 0,
            max_seq_len: default_max_seq_len(),
        }
    }
}

impl TrainConfig {
    /// Collects every violation instead of stopping at the first.
    pub fn validate(&self) -> Result<(), TrainerError> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be positive and finite, got {}", self.lr));
        }
        if self.warmup_steps > self.total_steps {
            problems.push(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.weight_decay < 0.0 {
            problems.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                problems.push(format!("{name} must lie in [0, 1), got {beta}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            problems.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.max_seq_len == 0 {
            problems.push("max_seq_len must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainerError::InvalidConfig(problems))
        }
    }
}

/// What to train: everything, or adapters installed by a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainMode {
    Full,
    Adapter(AdapterConfig),
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub adapter: Option<AdapterConfig>,
}

/// Runs `cfg.total_steps` of AdamW on the masked next-token loss over
/// `data`, batching by sampling with replacement. Deterministic end to end:
/// batch order, dropout masks, and updates all derive from `cfg.seed`.
pub fn train(model: Model, mode: &TrainMode, data: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome, TrainerError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    let max_len = cfg.max_seq_len.min(model.config().max_seq_len);
    if let Some(long) = data.iter().find(|e| e.tokens.len() > max_len) {
        return Err(TrainerError::SequenceTooLong { len: long.tokens.len(), max: max_len });
    }

    let (mut model, adapter) = match mode {
        TrainMode::Full => {
            let mut m = model;
            m.set_all_requires_grad(true);
            (m, None)
        }
        TrainMode::Adapter(acfg) => {
            let (m, _) = apply_adapters(model, acfg)?;
            (m, Some(acfg.clone()))
        }
    };
    let mut trainable = 0;
    let mut total = 0;
    for (_, p) in model.params() {
        let n = p.value.rows() * p.value.cols();
        total += n;
        if p.requires_grad {
            trainable += n;
        }
    }

    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batch"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));
    let mut opt = AdamW::new(cfg);
    let mut metrics = Vec::with_capacity(cfg.total_steps);

    for step in 1..=cfg.total_steps {
        let lr = lr_at(step, cfg)?;
        let batch: Vec<(Vec<u32>, Vec<Option<u32>>)> = (0..cfg.batch_size)
            .map(|_| {
                let ex = &data[batch_rng.gen_range(0..data.len())];
                (ex.tokens.clone(), ex.targets())
            })
            .collect();
        let mut fwd = model.batch_loss(&batch, true, &mut dropout_rng)?;
        let loss = fwd.graph.value(fwd.loss)[(0, 0)];
        if !loss.is_finite() {
            return Err(TrainerError::NonFiniteLoss { step });
        }
        fwd.graph.backward(fwd.loss)?;
        let mut grads = BTreeMap::new();
        for (name, tensor) in &fwd.leaves {
            if model.param(name)?.requires_grad {
                if let Some(g) = fwd.graph.grad(*tensor) {
                    grads.insert(name.clone(), g.clone());
                }
            }
        }
        opt.step(&mut model, &grads, lr)?;
        metrics.push(MetricsRow { step, loss, lr });
    }

    Ok(TrainOutcome { model, metrics, trainable_params: trainable, total_params: total, adapter })
}

/// Fraction of examples whose answer region is reproduced exactly by greedy
/// decoding from the prompt. Argmax ties resolve to the lowest token id.
pub fn evaluate_exact_match(model: &Model, data: &[Example]) -> Result<f64, TrainerError> {
    if data.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    let mut hits = 0usize;
    for ex in data {
        let mut seq = ex.prompt().to_vec();
        let answer = ex.answer();
        let mut ok = true;
        for &expected in answer {
            let logits = model.forward(&seq)?;
            let last = logits.row(logits.rows() - 1);
            let mut best = 0usize;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            let tok = best as u32;
            if tok != expected {
                ok = false;
            }
            seq.push(tok);
        }
        if ok {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Writes the training log as CSV (`step,loss,lr`), reals at full precision.
pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<(), std::io::Error> {
    let mut out = String::from("step,loss,lr\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.step, fmt_g17(row.loss), fmt_g17(row.lr)));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())
}
