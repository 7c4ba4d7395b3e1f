//! Warm-up followed by polynomial decay.

use crate::config::TrainConfig;

/// Learning rate for iteration `iter` (clamped to `total_iters`).
///
/// Linear ramp `base · iter / warmup` up to `warmup`, then
/// `base · (1 − (iter − warmup) / (total − warmup))^power`, so the rate is
/// continuous at the end of warm-up and reaches exactly 0 at `total`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_iters, cfg.total_iters);
    let iter = iter.min(t);
    if iter < w {
        return cfg.base_lr * iter as f64 / w as f64;
    }
    let progress = (iter - w) as f64 / (t - w) as f64;
    cfg.base_lr * (1.0 - progress).powf(cfg.poly_power)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper() -> TrainConfig {
        TrainConfig { base_lr: 0.007, total_iters: 1000, warmup_iters: 100, ..Default::default() }
    }

    #[test]
    fn endpoints() {
        let c = paper();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(100, &c), 0.007);
        assert_eq!(lr_at(1000, &c), 0.0);
    }

    #[test]
    fn decay_midpoint() {
        let c = paper();
        let expected = 0.007 * 0.5f64.powf(0.9);
        assert!((lr_at(550, &c) - expected).abs() < 1e-12);
        assert!((expected / 0.007 - 0.535_886_731_268_146).abs() < 1e-12);
    }

    #[test]
    fn continuous_and_nonincreasing_after_warmup() {
        let c = paper();
        assert!((lr_at(99, &c) - lr_at(100, &c)).abs() <= 0.007 / 100.0 + 1e-15);
        for i in 100..1000 {
            assert!(lr_at(i + 1, &c) <= lr_at(i, &c));
        }
    }

    #[test]
    fn no_warmup() {
        let c = TrainConfig { warmup_iters: 0, ..paper() };
        assert_eq!(lr_at(0, &c), 0.007);
    }
}
