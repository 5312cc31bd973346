//! Learning-rate schedule: linear warmup into cosine decay.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor_lr: f64,
}

impl ScheduleConfig {
    /// The full-scale training schedule: peak 1e-4, 840 warmup steps, 28,000
    /// total steps, decaying to zero.
    pub fn full_scale() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_steps: 840,
            total_steps: 28_000,
            floor_lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.floor_lr > self.peak_lr {
            return Err(Error::Config(format!(
                "floor_lr {} exceeds peak_lr {}",
                self.floor_lr, self.peak_lr
            )));
        }
        if self.peak_lr < 0.0 || self.floor_lr < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear 0 -> peak over the warmup, then cosine
/// peak -> floor at `total_steps`. Steps beyond the total clamp to the floor.
pub fn lr_at_step(cfg: &ScheduleConfig, step: usize) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return cfg.floor_lr;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let u = (step - cfg.warmup_steps) as f64 / span;
    cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn full_scale() -> ScheduleConfig {
        ScheduleConfig::full_scale()
    }

    #[test]
    fn peak_exactly_at_warmup_end() {
        assert_abs_diff_eq!(lr_at_step(&full_scale(), 840), 1e-4, epsilon = 0.0);
    }

    #[test]
    fn warmup_midpoint_is_half_peak() {
        assert_abs_diff_eq!(lr_at_step(&full_scale(), 420), 5e-5, epsilon = 1e-18);
    }

    #[test]
    fn endpoint_hits_floor() {
        assert_abs_diff_eq!(lr_at_step(&full_scale(), 28_000), 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(lr_at_step(&full_scale(), 28_001), 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(lr_at_step(&full_scale(), 40_000), 0.0, epsilon = 0.0);
    }

    #[test]
    fn starts_at_zero() {
        assert_eq!(lr_at_step(&full_scale(), 0), 0.0);
    }

    #[test]
    fn continuous_peaked_and_monotone_after_warmup() {
        let cfg = ScheduleConfig {
            peak_lr: 3e-3,
            warmup_steps: 17,
            total_steps: 400,
            floor_lr: 1e-5,
        };
        cfg.validate().unwrap();
        let lrs: Vec<f64> = (0..=cfg.total_steps).map(|s| lr_at_step(&cfg, s)).collect();
        // peaks exactly at warmup_steps
        let max = lrs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(lrs[cfg.warmup_steps], cfg.peak_lr);
        assert_eq!(max, cfg.peak_lr);
        // monotone non-increasing afterwards
        for w in lrs[cfg.warmup_steps..].windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
        // continuity: no jump larger than the local slope scale
        let bound = cfg.peak_lr / cfg.warmup_steps.min(cfg.total_steps - cfg.warmup_steps) as f64
            * std::f64::consts::PI;
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() <= bound);
        }
        assert_eq!(lrs[cfg.total_steps], cfg.floor_lr);
    }

    #[test]
    fn validation_catches_bad_configs() {
        assert!(ScheduleConfig {
            peak_lr: 1e-4,
            warmup_steps: 10,
            total_steps: 5,
            floor_lr: 0.0
        }
        .validate()
        .is_err());
        assert!(ScheduleConfig {
            peak_lr: 1e-5,
            warmup_steps: 1,
            total_steps: 5,
            floor_lr: 1e-4
        }
        .validate()
        .is_err());
    }
}
