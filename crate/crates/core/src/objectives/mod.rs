//! Hinged attack rewards, the L2 distortion proxy and the UAP training loop.
//!
//! The generator ascends `g = R − λ·D` where `R` is a logit margin clamped
//! at `T` and `D = ‖δ‖₂`. Rewards act on logits, per sample, and are
//! averaged over the batch.

mod train;

use serde::{Deserialize, Serialize};

use crate::attacker::GeneratorConfig;
use crate::error::{Error, Result};
use crate::numerics::{argmax_except, AdamConfig, Tape, Var};

pub use train::{train_uap, TrainLog, TrainLogEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    NonTargeted,
    Targeted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub mode: AttackMode,
    /// target label, targeted mode only
    pub target: Option<usize>,
    pub lambda: f64,
    /// reward clamp; `None` picks 10 (non-targeted) or 0 (targeted)
    pub threshold: Option<f64>,
    pub batch_size: usize,
    pub steps: usize,
    pub log_every: usize,
    pub noise_seed: u64,
    pub generator: GeneratorConfig,
    pub adam: AdamConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::NonTargeted,
            target: None,
            lambda: 1500.0,
            threshold: None,
            batch_size: 32,
            steps: 8000,
            log_every: 50,
            noise_seed: 0,
            generator: GeneratorConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn threshold(&self) -> f64 {
        self.threshold.unwrap_or(match self.mode {
            AttackMode::NonTargeted => 10.0,
            AttackMode::Targeted => 0.0,
        })
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        if !self.threshold().is_finite() {
            return Err(Error::config("threshold must be finite"));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::config("batch_size and log_every must be positive"));
        }
        match (self.mode, self.target) {
            (AttackMode::Targeted, None) => Err(Error::config("targeted mode needs a target label")),
            (AttackMode::Targeted, Some(t)) if t >= num_classes => Err(Error::LabelOutOfRange {
                label: t,
                classes: num_classes,
            }),
            (AttackMode::NonTargeted, Some(_)) => Err(Error::config("target given in non-targeted mode")),
            _ => self.generator.base_len().map(|_| ()),
        }
    }
}

fn check_logits(p: &[f64], label: usize) -> Result<()> {
    if p.len() < 2 {
        return Err(Error::config("rewards need at least 2 classes"));
    }
    if label >= p.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: p.len(),
        });
    }
    Ok(())
}

/// `min(max_{j≠y} p_j − p_y, T)`.
pub fn reward_nontargeted(p: &[f64], y: usize, threshold: f64) -> Result<f64> {
    check_logits(p, y)?;
    Ok((p[argmax_except(p, y)] - p[y]).min(threshold))
}

/// `min(p_t − max_{j≠t} p_j, T)`.
pub fn reward_targeted(p: &[f64], t: usize, threshold: f64) -> Result<f64> {
    check_logits(p, t)?;
    Ok((p[t] - p[argmax_except(p, t)]).min(threshold))
}

/// `‖δ‖₂`.
pub fn distortion(delta: &[f64]) -> f64 {
    delta.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `R − λ·D`.
pub fn attack_objective(r: f64, d: f64, lambda: f64) -> f64 {
    r - lambda * d
}

/// Per-row non-targeted reward for `logits [B, K]`: `[B]`.
pub fn reward_nontargeted_var(tape: &mut Tape, logits: Var, labels: &[usize], threshold: f64) -> Result<Var> {
    let own = tape.pick(logits, labels)?;
    let other = tape.max_except(logits, labels)?;
    let margin = tape.sub(other, own)?;
    tape.clamp_max(margin, threshold)
}

/// Per-row targeted reward for `logits [B, K]`: `[B]`.
pub fn reward_targeted_var(tape: &mut Tape, logits: Var, target: usize, threshold: f64) -> Result<Var> {
    let rows = tape.value(logits)?.shape()[0];
    let idx = vec![target; rows];
    let own = tape.pick(logits, &idx)?;
    let other = tape.max_except(logits, &idx)?;
    let margin = tape.sub(own, other)?;
    tape.clamp_max(margin, threshold)
}

#[cfg(test)]
mod tests;
