//! Learning-rate schedules and plain SGD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-task optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs at which the learning rate is divided by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_epochs(20)
    }
}

impl TrainConfig {
    /// Defaults with decay points at 30%, 60% and 80% of `epochs`.
    pub fn with_epochs(epochs: usize) -> Self {
        let mut decay: Vec<usize> = [0.3, 0.6, 0.8].iter().map(|f| (f * epochs as f64).round() as usize).collect();
        decay.dedup();
        decay.retain(|&e| e > 0 && e < epochs);
        Self {
            epochs,
            batch_size: 128,
            base_lr: 0.1,
            lr_decay_epochs: decay,
            lr_decay_factor: 10.0,
            momentum: 0.0,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }

    /// The paper-scale schedule: 200 epochs, decay after 60, 120 and 160.
    pub fn paper() -> Self {
        Self { lr_decay_epochs: vec![60, 120, 160], ..Self::with_epochs(200) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::param("base_lr must be positive"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::param("lr_decay_factor must be positive"));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[1] <= w[0]) || self.lr_decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::param("lr_decay_epochs must be strictly increasing and below epochs"));
        }
        if self.momentum != 0.0 || self.weight_decay != 0.0 {
            return Err(Error::param("only plain SGD is supported: momentum and weight_decay must be 0"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::param("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// Step-decay learning rate at `epoch` (0-based).
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::param(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
    Ok(cfg.base_lr / cfg.lr_decay_factor.powi(decays as i32))
}

/// Head warmup before training each incremental task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub enabled: bool,
    pub max_lr: f64,
    pub ramp_epochs: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self { enabled: false, max_lr: 0.1, ramp_epochs: 40, max_epochs: 200, early_stop_patience: 20 }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0) {
            return Err(Error::param("warmup.max_lr must be positive"));
        }
        if self.ramp_epochs >= self.max_epochs {
            return Err(Error::param("warmup.ramp_epochs must be below warmup.max_epochs"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::param("warmup.early_stop_patience must be at least 1"));
        }
        Ok(())
    }
}

/// One-cycle schedule with cosine annealing on both phases.
///
/// Starts at `max_lr / 25`, peaks at `max_lr` at `ramp_epochs` and anneals to
/// `max_lr / 25 / 1e4` at `max_epochs - 1`.
pub fn one_cycle_lr(epoch: usize, cfg: &WarmupConfig) -> Result<f64> {
    if epoch >= cfg.max_epochs {
        return Err(Error::param(format!("epoch {epoch} outside 0..{}", cfg.max_epochs)));
    }
    let initial = cfg.max_lr / 25.0;
    let floor = initial / 1e4;
    let cos = |from: f64, to: f64, pct: f64| to + (from - to) / 2.0 * ((std::f64::consts::PI * pct).cos() + 1.0);
    if epoch <= cfg.ramp_epochs {
        let pct = if cfg.ramp_epochs == 0 { 1.0 } else { epoch as f64 / cfg.ramp_epochs as f64 };
        Ok(cos(initial, cfg.max_lr, pct))
    } else {
        let span = (cfg.max_epochs - 1 - cfg.ramp_epochs).max(1) as f64;
        Ok(cos(cfg.max_lr, floor, (epoch - cfg.ramp_epochs) as f64 / span))
    }
}

/// Global L2 norm of the gradients of `params`.
pub fn grad_norm(params: &[&mut Tensor]) -> Result<f64> {
    let mut s = 0.0;
    for p in params {
        let g = p.grad().ok_or_else(|| Error::contract("parameter has no gradient"))?;
        s += g.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(s.sqrt())
}

/// `p ← p − lr·grad`, after rescaling all gradients by `clip / norm` when their global norm exceeds `clip`.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64, grad_clip: Option<f64>) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::param(format!("learning rate must be non-negative, got {lr}")));
    }
    let norm = grad_norm(params)?;
    let scale = match grad_clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for p in params.iter_mut() {
        let next: Vec<f64> = p.values().iter().zip(p.grad().unwrap()).map(|(v, g)| v - lr * scale * g).collect();
        p.assign(&next)?;
    }
    Ok(())
}
