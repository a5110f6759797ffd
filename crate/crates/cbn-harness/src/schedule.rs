//! Learning-rate schedules.
//!
//! The base rate is first scaled linearly by batch size / 32, then shaped by
//! the schedule: cosine decay to zero over the run, or step decay multiplying
//! by 0.1 at each milestone.

use crate::config::{ScheduleKind, ScheduleSpec};

/// Schedule with milestones already converted from epochs to steps.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Cosine,
    Step { milestone_steps: Vec<u64> },
}

impl Schedule {
    pub fn from_spec(spec: &ScheduleSpec, iters_per_epoch: usize) -> Schedule {
        match spec.kind {
            ScheduleKind::Cosine => Schedule::Cosine,
            ScheduleKind::Step => Schedule::Step {
                milestone_steps: spec
                    .milestones
                    .iter()
                    .map(|&e| (e * iters_per_epoch) as u64)
                    .collect(),
            },
        }
    }

    /// Learning rate for optimizer step `step` out of `total_steps`.
    /// `step` counts completed steps, so 0 is the first and `total_steps`
    /// would be one past the last.
    pub fn lr_at(&self, base_lr: f64, batch_size: usize, step: u64, total_steps: u64) -> f64 {
        let scaled = base_lr * batch_size as f64 / 32.0;
        match self {
            Schedule::Cosine => {
                let frac = if total_steps == 0 {
                    0.0
                } else {
                    step.min(total_steps) as f64 / total_steps as f64
                };
                scaled * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            Schedule::Step { milestone_steps } => {
                let passed = milestone_steps.iter().filter(|&&m| step >= m).count();
                scaled * 0.1f64.powi(passed as i32)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_starts_at_the_scaled_base() {
        let lr = Schedule::Cosine.lr_at(0.1, 32, 0, 100);
        assert_eq!(lr, 0.1, "at step 0 the cosine factor is 1");
    }

    #[test]
    fn cosine_ends_at_zero() {
        let lr = Schedule::Cosine.lr_at(0.1, 32, 100, 100);
        assert!(lr.abs() < 1e-17, "cos(pi) = -1 zeroes the rate, got {lr}");
    }

    #[test]
    fn batch_size_scales_the_base_linearly() {
        let lr = Schedule::Cosine.lr_at(0.1, 4, 0, 100);
        assert!((lr - 0.0125).abs() < 1e-18, "0.1 * 4/32 = 0.0125, got {lr}");
    }

    #[test]
    fn cosine_is_non_increasing() {
        let mut prev = f64::INFINITY;
        for step in 0..=50 {
            let lr = Schedule::Cosine.lr_at(1.0, 32, step, 50);
            assert!(lr <= prev, "cosine must decay monotonically");
            prev = lr;
        }
    }

    #[test]
    fn step_schedule_drops_by_ten_at_each_milestone() {
        let s = Schedule::Step {
            milestone_steps: vec![10, 20],
        };
        assert_eq!(s.lr_at(1.0, 32, 0, 30), 1.0);
        assert_eq!(s.lr_at(1.0, 32, 9, 30), 1.0);
        assert!((s.lr_at(1.0, 32, 10, 30) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(1.0, 32, 25, 30) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn milestones_convert_from_epochs() {
        let spec = ScheduleSpec {
            kind: ScheduleKind::Step,
            milestones: vec![2, 4],
        };
        let s = Schedule::from_spec(&spec, 50);
        assert_eq!(
            s,
            Schedule::Step {
                milestone_steps: vec![100, 200]
            }
        );
    }
}
