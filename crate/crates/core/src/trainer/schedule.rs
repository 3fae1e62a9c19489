//! Learning-rate schedules: linear warm-up then linear decay for the
//! distillation phases, cosine annealing for teacher pretraining.

/// Linear ramp from 0 to `base_lr` over the first `warmup_frac` of all
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    assert!((0.0..1.0).contains(&warmup_frac));
    if total_steps == 0 {
        return 0.0;
    }
    let warm = warmup_frac * total_steps as f64;
    let s = step as f64;
    if s < warm {
        base_lr * s / warm
    } else {
        base_lr * (total_steps as f64 - s) / (total_steps as f64 - warm)
    }
}

/// Cosine annealing from `base_lr` to 0 over `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    assert!(step <= total_steps);
    if total_steps == 0 {
        return base_lr;
    }
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoints() {
        let total = 1000;
        assert_eq!(lr_schedule(0, total, 0.1, 0.1), 0.0);
        let warm_end = 100;
        assert!((lr_schedule(warm_end, total, 0.1, 0.1) - 0.1).abs() < 1e-12);
        assert_eq!(lr_schedule(total, total, 0.1, 0.1), 0.0);
    }

    #[test]
    fn no_warmup_starts_at_base() {
        assert_eq!(lr_schedule(0, 10, 0.5, 0.0), 0.5);
        assert_eq!(lr_schedule(10, 10, 0.5, 0.0), 0.0);
    }

    #[test]
    fn ramp_is_monotone_then_decay_monotone() {
        let total = 200;
        let mut prev = -1.0;
        for s in 0..=20 {
            let lr = lr_schedule(s, total, 1.0, 0.1);
            assert!(lr >= prev);
            prev = lr;
        }
        let mut prev = 2.0;
        for s in 20..=total {
            let lr = lr_schedule(s, total, 1.0, 0.1);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn cosine_endpoint_is_small() {
        let base = 0.1;
        let total = 50;
        assert!((cosine_lr(0, total, base) - base).abs() < 1e-12);
        assert!(cosine_lr(total, total, base) < 1e-4 * base);
        assert!(cosine_lr(total - 1, total, base) < cosine_lr(1, total, base));
    }
}
