use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup followed by cosine decay, restarted every `cycle_len`
/// epochs with the peak multiplied by `peak_decay`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub base_peak: f64,
    pub peak_decay: f64,
    pub cycle_len: f64,
    pub warmup_len: f64,
    /// Evaluate at fractional epochs (`epoch + step / steps_per_epoch`)
    /// rather than at whole epochs.
    pub per_step: bool,
}

impl Default for SchedulerState {
    fn default() -> Self {
        Self {
            base_peak: 1e-3,
            peak_decay: 0.6,
            cycle_len: 100.0,
            warmup_len: 5.0,
            per_step: true,
        }
    }
}

impl SchedulerState {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.warmup_len && self.warmup_len < self.cycle_len)
            || !(self.peak_decay > 0.0 && self.peak_decay <= 1.0)
            || !(self.base_peak >= 0.0)
        {
            return Err(Error::param(format!("invalid scheduler settings {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: f64) -> f64 {
        let c = (epoch / self.cycle_len).floor();
        let t = epoch - c * self.cycle_len;
        let peak = self.base_peak * self.peak_decay.powi(c as i32);
        if t < self.warmup_len {
            peak * t / self.warmup_len
        } else {
            peak * 0.5 * (1.0 + (PI * (t - self.warmup_len) / (self.cycle_len - self.warmup_len)).cos())
        }
    }

    /// Learning rate for optimizer step `step` of `epoch`.
    pub fn lr_for_step(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        if self.per_step && steps_per_epoch > 0 {
            self.lr_at(epoch as f64 + step as f64 / steps_per_epoch as f64)
        } else {
            self.lr_at(epoch as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_values() {
        let s = SchedulerState::default();
        assert!((s.lr_at(5.0) - 0.001).abs() < 1e-12);
        assert!((s.lr_at(105.0) - 0.0006).abs() < 1e-12);
        assert!((s.lr_at(52.5) - 0.0005).abs() < 1e-12);
        assert_eq!(s.lr_at(0.0), 0.0);
        assert!((s.lr_at(2.5) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn per_epoch_mode_ignores_step() {
        let s = SchedulerState {
            per_step: false,
            ..Default::default()
        };
        assert_eq!(s.lr_for_step(3, 7, 10), s.lr_at(3.0));
    }
}
