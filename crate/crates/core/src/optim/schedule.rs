use serde::{Deserialize, Serialize};

/// Learning-rate schedule: linear warmup, cosine decay to a floor of 10% of
/// the base rate, and a linear re-ramp after each projection refresh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    /// Initial warmup length; 0 disables it.
    pub warmup: usize,
    /// Step at which the cosine reaches its floor; 0 keeps the rate constant.
    pub total: usize,
    /// Re-ramp length after a refresh; 0 disables it.
    pub refresh_warmup: usize,
}

pub const DECAY_FLOOR: f64 = 0.1;

impl Schedule {
    pub fn constant(base_lr: f64) -> Self {
        Schedule {
            base_lr,
            warmup: 0,
            total: 0,
            refresh_warmup: 0,
        }
    }

    pub fn cosine(base_lr: f64, warmup: usize, total: usize, refresh_warmup: usize) -> Self {
        Schedule {
            base_lr,
            warmup,
            total,
            refresh_warmup,
        }
    }

    /// Warmup and cosine value at step `t`, ignoring refreshes.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t < self.warmup {
            return self.base_lr * t as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return self.base_lr;
        }
        let progress = ((t - self.warmup) as f64 / (self.total - self.warmup) as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.base_lr * (DECAY_FLOOR + (1.0 - DECAY_FLOOR) * cos)
    }

    /// Multiplier applied `since` steps after a refresh: `(since + 1) /
    /// (refresh_warmup + 1)` until it reaches 1.
    pub fn refresh_factor(&self, since: usize) -> f64 {
        if since >= self.refresh_warmup {
            1.0
        } else {
            (since + 1) as f64 / (self.refresh_warmup + 1) as f64
        }
    }

    /// Rate at `t` when the last refresh after step 0 happened at
    /// `last_refresh` (`None` if there was none).
    pub fn lr_with_refresh(&self, t: usize, last_refresh: Option<usize>) -> f64 {
        let base = self.lr_at(t);
        match last_refresh {
            Some(r) if r > 0 && t >= r => base * self.refresh_factor(t - r),
            _ => base,
        }
    }
}
