//! Learning-rate schedule: linear warmup from zero to the peak, then
//! cosine decay to `final_lr_fraction` of the peak at the final step.

use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub final_lr_fraction: f64,
    pub batch_tokens: usize,
    pub seq_len: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Parameter-name prefixes excluded from training.
    pub freeze_groups: Vec<String>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(TrainError::BadParams(format!(
                "warmup {} exceeds total {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(TrainError::BadParams(format!(
                "final_lr_fraction {} outside (0, 1]",
                self.final_lr_fraction
            )));
        }
        if self.seq_len < 2 || self.batch_tokens < self.seq_len {
            return Err(TrainError::BadParams(
                "batch must hold at least one sequence of length >= 2".into(),
            ));
        }
        Ok(())
    }

    pub fn seqs_per_batch(&self) -> usize {
        (self.batch_tokens / self.seq_len).max(1)
    }
}

/// Learning rate at a step in 0..=total_steps.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    if cfg.total_steps == cfg.warmup_steps {
        return Ok(cfg.peak_lr);
    }
    let floor = cfg.peak_lr * cfg.final_lr_fraction;
    let progress =
        (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(floor + (cfg.peak_lr - floor) * cosine)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            peak_lr: 4e-4,
            warmup_steps: 2000,
            total_steps: 10_000,
            final_lr_fraction: 0.01,
            batch_tokens: 1024,
            seq_len: 128,
            weight_decay: 0.1,
            seed: 0,
            freeze_groups: vec![],
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(lr_at(&c, 0).unwrap(), 0.0);
        assert_eq!(lr_at(&c, c.warmup_steps).unwrap(), c.peak_lr);
        let end = lr_at(&c, c.total_steps).unwrap();
        assert!((end - c.peak_lr * 0.01).abs() < 1e-12, "end lr {end}");
        assert!(matches!(
            lr_at(&c, c.total_steps + 1),
            Err(TrainError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn continuous_at_warmup_and_monotone_after() {
        let c = cfg();
        let before = lr_at(&c, c.warmup_steps - 1).unwrap();
        let at = lr_at(&c, c.warmup_steps).unwrap();
        assert!((at - before) < c.peak_lr / c.warmup_steps as f64 + 1e-12);
        let mut prev = at;
        for step in c.warmup_steps..=c.total_steps {
            let lr = lr_at(&c, step).unwrap();
            assert!(lr <= prev + 1e-15, "lr increased at step {step}");
            prev = lr;
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = cfg();
        c.warmup_steps = c.total_steps + 1;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.final_lr_fraction = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.final_lr_fraction = 1.5;
        assert!(c.validate().is_err());
    }
}
