use serde::{Deserialize, Serialize};

/// Half-cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: u64) -> Self {
        Self {
            lr_max,
            lr_min,
            total_steps,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return if step == 0 { self.lr_max } else { self.lr_min };
        }
        if step == 0 {
            return self.lr_max;
        }
        let progress = step as f64 / self.total_steps as f64;
        let cos = (std::f64::consts::PI * progress).cos();
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + cos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let s = CosineSchedule::new(1e-3, 1e-5, 240);
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(240), 1e-5);
        assert_eq!(s.lr(1000), 1e-5);
    }

    #[test]
    fn monotone_non_increasing() {
        let s = CosineSchedule::new(0.5, 0.0, 97);
        for t in 0..97 {
            assert!(s.lr(t + 1) <= s.lr(t), "step {t}");
        }
    }
}
