use std::f64::consts::PI;

use super::TrainConfig;

pub fn warmup_steps(warmup_ratio: f64, total_steps: usize) -> usize {
    (warmup_ratio * total_steps as f64).ceil() as usize
}

/// Linear warmup from 0 to `cfg.lr`, then cosine annealing to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig, total_steps: usize) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let warmup = warmup_steps(cfg.warmup_ratio, total_steps);
    if step < warmup {
        return cfg.lr * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    cfg.lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let cfg = TrainConfig::default();
        let total = 1000;
        let w = warmup_steps(cfg.warmup_ratio, total);
        assert_eq!(w, 40);
        assert_eq!(lr_at(0, &cfg, total), 0.0);
        assert_eq!(lr_at(w, &cfg, total), 2e-5);
        assert_eq!(lr_at(total, &cfg, total), 0.0);
    }

    #[test]
    fn single_peak_and_monotone_decay() {
        let cfg = TrainConfig::default();
        for total in [1usize, 2, 7, 25, 300] {
            let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, &cfg, total)).collect();
            assert!(lrs.iter().all(|&x| x >= 0.0));
            let peak = lrs
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > lrs[best] { i } else { best });
            assert!(lrs[..peak].windows(2).all(|p| p[0] < p[1]));
            assert!(lrs[peak..].windows(2).all(|p| p[0] >= p[1]));
        }
    }

    #[test]
    fn continuity() {
        let cfg = TrainConfig::default();
        let total = 10_000;
        let max_jump = (1..=total)
            .map(|s| (lr_at(s, &cfg, total) - lr_at(s - 1, &cfg, total)).abs())
            .fold(0.0, f64::max);
        // Largest step is a warmup increment of lr / warmup_steps.
        assert!(max_jump <= cfg.lr / 400.0 + 1e-18);
    }
}
