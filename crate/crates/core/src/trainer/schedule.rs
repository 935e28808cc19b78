use std::f64::consts::PI;

/// EMA momentum, linear from `start` at step 0 to `end` at `total_steps`.
pub fn lambda_schedule(step: u64, total_steps: u64, start: f64, end: f64) -> f64 {
    if total_steps == 0 {
        return end;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    start + (end - start) * t
}

/// Peak learning rate under the linear scaling rule `base * batch / 256`.
pub fn peak_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Linear warmup from 0 to the peak over `warmup_steps`, then half-cosine
/// decay to 0 over the remaining `total_steps - warmup_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64, batch_size: usize) -> f64 {
    let peak = peak_lr(base_lr, batch_size);
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return 0.0;
    }
    let progress = (step - warmup_steps).min(span) as f64 / span as f64;
    0.5 * peak * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_endpoints_and_midpoint() {
        assert_eq!(lambda_schedule(0, 1000, 0.996, 1.0), 0.996);
        assert_eq!(lambda_schedule(1000, 1000, 0.996, 1.0), 1.0);
        assert!((lambda_schedule(500, 1000, 0.996, 1.0) - 0.998).abs() < 1e-15);
    }

    #[test]
    fn lambda_is_monotone() {
        let mut prev = 0.0;
        for s in 0..=300 {
            let l = lambda_schedule(s, 300, 0.996, 1.0);
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn lr_shape() {
        let (total, warm) = (1000, 100);
        assert_eq!(lr_schedule(0, total, warm, 1.5e-4, 2048), 0.0);
        assert!((lr_schedule(warm, total, warm, 1.5e-4, 2048) - 1.2e-3).abs() < 1e-15);
        assert!(lr_schedule(total, total, warm, 1.5e-4, 2048).abs() < 1e-18);
        // continuity at the junction
        let before = lr_schedule(warm - 1, total, warm, 1.5e-4, 2048);
        let at = lr_schedule(warm, total, warm, 1.5e-4, 2048);
        assert!((at - before) <= at / warm as f64 + 1e-18);
        for s in 0..=total {
            assert!(lr_schedule(s, total, warm, 1.5e-4, 2048) >= 0.0);
        }
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(lr_schedule(0, 10, 0, 2.56e-2, 10), peak_lr(2.56e-2, 10));
    }
}
