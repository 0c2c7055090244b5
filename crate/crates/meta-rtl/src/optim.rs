//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

/// AdamW shape parameters. Defaults follow common practice: beta1 = 0.9,
/// beta2 = 0.999, eps = 1e-8, decoupled weight decay 0.01.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: step count plus first/second moment buffers (AdamW only).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    adamw: AdamWConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> OptimizerState {
        OptimizerState {
            kind: OptimizerKind::Sgd,
            lr,
            adamw: AdamWConfig::default(),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adamw(lr: f64) -> OptimizerState {
        Self::adamw_with(lr, AdamWConfig::default())
    }

    pub fn adamw_with(lr: f64, cfg: AdamWConfig) -> OptimizerState {
        OptimizerState {
            kind: OptimizerKind::AdamW,
            lr,
            adamw: cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> OptimizerState {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::AdamW => Self::adamw(lr),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one in-place update and validates the committed parameters.
    ///
    /// SGD: `p -= lr * g`. AdamW: bias-corrected moments with decoupled
    /// weight decay applied before the gradient step,
    /// `p -= lr * wd * p; p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut ParameterVector, grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient has {} entries for {} parameters",
                grad.len(),
                params.len()
            )));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = self.lr;
                for (p, g) in params.values_mut().iter_mut().zip(grad) {
                    *p -= lr * g;
                }
                self.step += 1;
            }
            OptimizerKind::AdamW => {
                if self.m.is_empty() {
                    self.m = vec![0.0; grad.len()];
                    self.v = vec![0.0; grad.len()];
                }
                if self.m.len() != grad.len() {
                    return Err(Error::ShapeMismatch(
                        "optimizer moments sized for a different parameter count".into(),
                    ));
                }
                self.step += 1;
                let t = self.step as f64;
                let AdamWConfig {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } = self.adamw;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                let lr = self.lr;
                let values = params.values_mut();
                for i in 0..grad.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    values[i] -= lr * weight_decay * values[i];
                    values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        params.validate_finite()
    }
}
