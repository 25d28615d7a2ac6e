//! Cosine learning-rate schedule with warm restarts.

use crate::error::{Error, Result};

/// Learning rate at `step`: linear warmup from `min_lr` to `base_lr` over
/// `warmup_steps`, then cosine decay back to `min_lr` at the cycle end; the
/// whole shape repeats every `cycle_steps`.
pub fn cosine_warm_restart_lr(
    base_lr: f64,
    min_lr: f64,
    cycle_steps: u64,
    warmup_steps: u64,
    step: u64,
) -> Result<f64> {
    if warmup_steps >= cycle_steps {
        return Err(Error::Domain(format!(
            "warmup_steps {warmup_steps} must be smaller than cycle_steps {cycle_steps}"
        )));
    }
    let s = step % cycle_steps;
    if s < warmup_steps {
        return Ok(min_lr + (base_lr - min_lr) * s as f64 / warmup_steps as f64);
    }
    let frac = (s - warmup_steps) as f64 / (cycle_steps - warmup_steps) as f64;
    Ok(min_lr + (base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
