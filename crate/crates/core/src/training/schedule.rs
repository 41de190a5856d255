use std::f64::consts::PI;

use crate::config::RunConfig;

/// Linear warmup followed by cosine decay, both in (fractional) epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl Schedule {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Schedule {
            base_lr: cfg.base_lr,
            min_lr: cfg.min_lr,
            warmup_epochs: cfg.warmup_epochs as f64,
            total_epochs: cfg.epochs as f64,
        }
    }

    pub fn lr_at(&self, epoch: f64) -> f64 {
        let epoch = epoch.clamp(0.0, self.total_epochs);
        let lr = if epoch < self.warmup_epochs {
            self.base_lr * epoch / self.warmup_epochs
        } else {
            let span = self.total_epochs - self.warmup_epochs;
            let tau = if span > 0.0 {
                (epoch - self.warmup_epochs) / span
            } else {
                1.0
            };
            self.base_lr * (1.0 + (PI * tau).cos()) / 2.0
        };
        lr.max(self.min_lr)
    }
}

pub fn lr_at(schedule: &Schedule, epoch: f64) -> f64 {
    schedule.lr_at(epoch)
}
