//! Learning-rate schedules.

use std::f64::consts::PI;

/// Pretraining peak learning rate.
pub const PRETRAIN_LR: f64 = 1e-3;
/// Pretraining anneals to this absolute rate.
pub const PRETRAIN_FINAL_LR: f64 = 1e-6;
/// Finetuning anneals to `peak · FINETUNE_DECAY`.
pub const FINETUNE_DECAY: f64 = 1e-2;
pub const FINETUNE_WARMUP: usize = 500;
/// Warmup starts at `peak · WARMUP_START`.
pub const WARMUP_START: f64 = 1e-6;

/// Rollout length and peak learning rate of each finetuning stage.
pub const FINETUNE_STAGES: [(usize, f64); 5] = [(1, 1e-4), (2, 1e-5), (4, 5e-6), (8, 1e-6), (12, 1e-6)];

/// Peak learning rate of the finetuning stage with rollout `k`.
pub fn finetune_lr(k: usize) -> Option<f64> {
    FINETUNE_STAGES.iter().find(|s| s.0 == k).map(|s| s.1)
}

/// Linear warmup followed by cosine annealing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    /// Cosine from `peak` to 1e-6 without warmup.
    pub fn pretrain(peak: f64, total: usize) -> Self {
        Schedule {
            peak,
            floor: PRETRAIN_FINAL_LR,
            warmup: 0,
            total,
        }
    }

    /// Warmup over `min(500, total/2)` steps, then cosine to `peak · 1e-2`.
    pub fn finetune(peak: f64, total: usize) -> Self {
        Schedule {
            peak,
            floor: peak * FINETUNE_DECAY,
            warmup: FINETUNE_WARMUP.min(total / 2),
            total,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            let start = self.peak * WARMUP_START;
            return start + (self.peak - start) * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).saturating_sub(1).max(1);
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (PI * t).cos())
    }

    /// `lr(step) / peak`.
    pub fn factor(&self, step: usize) -> f64 {
        if self.peak == 0.0 {
            0.0
        } else {
            self.lr(step) / self.peak
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretrain_endpoints() {
        let s = Schedule::pretrain(PRETRAIN_LR, 101);
        assert!((s.lr(0) - 1e-3).abs() < 1e-15);
        assert!((s.lr(100) - 1e-6).abs() < 1e-15);
        assert!(s.lr(50) < s.lr(10));
    }

    #[test]
    fn finetune_warmup_then_decay() {
        let s = Schedule::finetune(1e-4, 2000);
        assert!((s.lr(0) - 1e-10).abs() < 1e-18);
        assert!((s.lr(500) - 1e-4).abs() < 1e-15);
        assert!((s.lr(1999) - 1e-6).abs() < 1e-15);
        assert_eq!(finetune_lr(4), Some(5e-6));
    }
}
