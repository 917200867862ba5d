use serde::{Deserialize, Serialize};

/// Single-cycle cosine annealing from `lr_max` at step 0 to `lr_min` at
/// `t_max`; later steps stay at `lr_min`.
pub fn cosine_lr(step: u64, t_max: u64, lr_max: f64, lr_min: f64) -> f64 {
    if t_max == 0 || step >= t_max {
        return if t_max == 0 && step == 0 { lr_max } else { lr_min };
    }
    let frac = step as f64 / t_max as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CosineSchedule {
    /// Total planned steps; `None` means the stage's own step count.
    pub t_max: Option<u64>,
    pub lr_min: f64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        CosineSchedule { t_max: None, lr_min: 0.0 }
    }
}
