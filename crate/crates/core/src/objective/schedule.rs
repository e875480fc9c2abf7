//! Learning-rate and KL-weight schedules.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Shape of the learning-rate curve after its linear warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    /// Decays as `1/sqrt(step)` past the warmup point.
    InverseSqrt,
    /// Holds the base rate once warmup completes.
    FlatAfterWarmup,
}

/// Errors from schedule evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    /// Schedules are defined for steps starting at 1.
    ZeroStep,
}

impl fmt::Display for ScheduleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleError::ZeroStep => write!(f, "schedule step must be at least 1"),
        }
    }
}

impl std::error::Error for ScheduleError {}

/// Learning rate at `step` (1-based): a linear warmup over `warmup` steps
/// that peaks at `base_lr`, then the selected decay. The inverse-sqrt form
/// is `base_lr * sqrt(warmup) * min(step * warmup^-1.5, step^-0.5)`.
pub fn learning_rate(
    base_lr: f64,
    warmup: u64,
    decay: LrDecay,
    step: u64,
) -> Result<f64, ScheduleError> {
    if step == 0 {
        return Err(ScheduleError::ZeroStep);
    }
    assert!(warmup >= 1, "warmup must span at least one step");
    let s = step as f64;
    let w = warmup as f64;
    let lr = match decay {
        LrDecay::InverseSqrt => base_lr * w.sqrt() * (s * w.powf(-1.5)).min(s.powf(-0.5)),
        LrDecay::FlatAfterWarmup => base_lr * (s / w).min(1.0),
    };
    Ok(lr)
}

/// KL weight at `step`: ramps linearly from 0 to 1 over `ramp` steps, then
/// stays at 1. A zero ramp means no annealing.
pub fn kl_weight(step: u64, ramp: u64) -> f64 {
    if ramp == 0 {
        return 1.0;
    }
    (step as f64 / ramp as f64).min(1.0)
}
