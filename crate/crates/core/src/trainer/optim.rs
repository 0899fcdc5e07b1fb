//! AdamW with decoupled weight decay and the linear warmup/decay schedule.

use std::collections::BTreeMap;

use crate::linalg::Matrix;
use crate::nn::Model;

use super::{TrainConfig, TrainerError};

/// Learning rate at `step` (0-based through `total_steps`): linear ramp from
/// 0 to `cfg.lr` over `warmup_steps`, then linear decay to 0 at
/// `total_steps`. `lr_at(warmup_steps) == cfg.lr` exactly.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64, TrainerError> {
    if step > cfg.total_steps {
        return Err(TrainerError::StepOutOfRange { step, total: cfg.total_steps });
    }
    // The fraction is computed first so the peak is exactly `lr`.
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return Ok(cfg.lr * (step as f64 / cfg.warmup_steps as f64));
    }
    if cfg.total_steps == cfg.warmup_steps {
        return Ok(cfg.lr);
    }
    let remaining = (cfg.total_steps - step) as f64;
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.lr * (remaining / span))
}

struct Moments {
    m: Matrix,
    v: Matrix,
}

/// Decoupled-weight-decay Adam over a model's trainable parameters. Moment
/// state is keyed by parameter name and created lazily on first update.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update using `grads` (name → gradient) at learning rate
    /// `lr`. Every gradient must belong to a trainable parameter of matching
    /// shape and be finite; weight decay touches only these trainable
    /// parameters, so frozen tensors are never modified.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &BTreeMap<String, Matrix>,
        lr: f64,
    ) -> Result<(), TrainerError> {
        self.step += 1;
        let correction1 = 1.0 - self.beta1.powi(self.step as i32);
        let correction2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let param = model.param(name)?;
            if !param.requires_grad {
                return Err(TrainerError::FrozenParameterGradient { name: name.clone() });
            }
            if param.value.shape() != grad.shape() {
                return Err(TrainerError::GradientShapeMismatch {
                    name: name.clone(),
                    param_rows: param.value.rows(),
                    param_cols: param.value.cols(),
                    grad_rows: grad.rows(),
                    grad_cols: grad.cols(),
                });
            }
            if let Some((row, col)) = grad.first_non_finite() {
                return Err(TrainerError::NonFiniteGradient { name: name.clone(), row, col });
            }
            let (rows, cols) = grad.shape();
            let entry = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Matrix::zeros(rows, cols),
                v: Matrix::zeros(rows, cols),
            });
            let mut value = param.value.clone();
            for i in 0..rows * cols {
                let g = grad.data()[i];
                let m = self.beta1 * entry.m.data()[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * entry.v.data()[i] + (1.0 - self.beta2) * g * g;
                entry.m.data_mut()[i] = m;
                entry.v.data_mut()[i] = v;
                let m_hat = m / correction1;
                let v_hat = v / correction2;
                let w = value.data()[i];
                value.data_mut()[i] =
                    w - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * w);
            }
            model.set_param_value(name, value)?;
        }
        Ok(())
    }
}
