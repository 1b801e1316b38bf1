//! Per-iteration schedules: linear-warmup-then-cosine learning rate, cosine
//! weight-decay ramp, and the cosine teacher-momentum ramp toward 1.

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_iterations: usize,
    pub total_iterations: usize,
    pub weight_decay_start: f64,
    pub weight_decay_end: f64,
    pub momentum_teacher: f64,
}

impl Schedules {
    /// Linear warmup 0 -> lr over the warmup window, then cosine decay to
    /// min_lr over the remainder.
    pub fn lr_at(&self, t: usize) -> f64 {
        debug_assert!(t < self.total_iterations);
        let w = self.warmup_iterations;
        if t < w {
            return self.lr * t as f64 / w as f64;
        }
        let progress = (t - w) as f64 / (self.total_iterations - w) as f64;
        self.min_lr + (self.lr - self.min_lr) * ((PI * progress).cos() + 1.0) / 2.0
    }

    /// Cosine ramp weight_decay_start -> weight_decay_end.
    pub fn weight_decay_at(&self, t: usize) -> f64 {
        let progress = t as f64 / self.total_iterations as f64;
        self.weight_decay_end
            + (self.weight_decay_start - self.weight_decay_end) * ((PI * progress).cos() + 1.0) / 2.0
    }

    /// Cosine ramp momentum_teacher -> 1.
    pub fn teacher_momentum_at(&self, t: usize) -> f64 {
        let progress = t as f64 / self.total_iterations as f64;
        1.0 - (1.0 - self.momentum_teacher) * ((PI * progress).cos() + 1.0) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_schedules() -> Schedules {
        Schedules {
            lr: 1e-4,
            min_lr: 1e-5,
            warmup_iterations: 1000,
            total_iterations: 2000,
            weight_decay_start: 0.04,
            weight_decay_end: 0.4,
            momentum_teacher: 0.996,
        }
    }

    #[test]
    fn lr_warmup_point_and_endpoint() {
        let s = paper_schedules();
        // iteration 16 of the warmup: 16/1000 * 1e-4 = 1.6e-6
        assert!((s.lr_at(16) - 1.6e-6).abs() < 1e-18);
        assert_eq!(format!("{:.6}", s.lr_at(16)), "0.000002");
        // warmup endpoint is exactly lr
        assert_eq!(s.lr_at(1000), 1e-4);
        // approaches min_lr at the end
        let end = s.lr_at(1999);
        let bound = (1e-4 - 1e-5) * (1.0 - (PI * 999.0 / 1000.0).cos()) / 2.0;
        assert!(end - 1e-5 <= bound);
        assert!(end >= 1e-5);
    }

    #[test]
    fn weight_decay_matches_logged_value() {
        let s = paper_schedules();
        let wd16 = s.weight_decay_at(16);
        assert!((wd16 - 0.0400568).abs() < 5e-7, "{wd16}");
        assert_eq!(format!("{:.6}", wd16), "0.040057");
        assert_eq!(s.weight_decay_at(0), 0.04);

        let flat = Schedules {
            weight_decay_end: 0.04,
            ..s
        };
        for t in [0, 7, 1999] {
            assert!((flat.weight_decay_at(t) - 0.04).abs() < 1e-15);
        }
    }

    #[test]
    fn teacher_momentum_matches_logged_value() {
        let s = paper_schedules();
        let m16 = s.teacher_momentum_at(16);
        assert_eq!(format!("{:.6}", m16), "0.996001");
        assert_eq!(s.teacher_momentum_at(0), 0.996);
        // monotonically nondecreasing toward 1
        let mut prev = 0.0;
        for t in 0..2000 {
            let m = s.teacher_momentum_at(t);
            assert!(m >= prev);
            assert!(m < 1.0 + 1e-12);
            prev = m;
        }
    }

    #[test]
    fn schedules_stay_finite_and_positive() {
        let s = paper_schedules();
        for t in 0..2000 {
            assert!(s.lr_at(t).is_finite() && s.lr_at(t) >= 0.0);
            assert!(s.weight_decay_at(t) > 0.0);
            assert!(s.teacher_momentum_at(t) > 0.0);
        }
    }
}
