use std::f64::consts::PI;

use crate::config::Schedule;

pub fn warmup_steps(warmup_fraction: f64, total_steps: u64) -> u64 {
    (warmup_fraction * total_steps as f64).ceil() as u64
}

/// Linear warmup to `base_lr` over `ceil(warmup_fraction * total)` steps, then
/// cosine decay to zero at `total` (or constant).
pub fn lr_at(base_lr: f64, warmup_fraction: f64, schedule: Schedule, step: u64, total: u64) -> f64 {
    let warm = warmup_steps(warmup_fraction, total);
    if step < warm {
        return base_lr * step as f64 / warm as f64;
    }
    match schedule {
        Schedule::Constant => base_lr,
        Schedule::Cosine => {
            if total <= warm {
                return base_lr;
            }
            let progress = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
            base_lr * 0.5 * (1.0 + (PI * progress).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knots() {
        let (base, total) = (3e-4, 1000);
        assert_eq!(lr_at(base, 0.05, Schedule::Cosine, 0, total), 0.0);
        assert_eq!(warmup_steps(0.05, total), 50);
        assert_eq!(lr_at(base, 0.05, Schedule::Cosine, 50, total), base);
        let mid = lr_at(base, 0.05, Schedule::Cosine, 50 + 475, total);
        let oracle = base * (PI / 4.0).cos().powi(2);
        assert!((mid - oracle).abs() < 1e-15, "{mid} vs {oracle}");
        assert!(lr_at(base, 0.05, Schedule::Cosine, total, total).abs() < 1e-18);
        assert_eq!(lr_at(base, 0.05, Schedule::Constant, 700, total), base);
    }

    #[test]
    fn warmup_uses_ceiling() {
        assert_eq!(warmup_steps(0.05, 810), 41);
        assert_eq!(warmup_steps(0.0, 810), 0);
        assert_eq!(lr_at(1.0, 0.0, Schedule::Cosine, 0, 10), 1.0);
    }
}
