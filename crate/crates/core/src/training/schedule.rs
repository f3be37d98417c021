//! Linear warm-up followed by reduce-on-plateau.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { base_lr: 3e-4, warmup_epochs: 20, factor: 0.5, patience: 10, threshold: 1e-4, min_lr: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrState {
    pub config: SchedulerConfig,
    pub current: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl LrState {
    pub fn new(config: SchedulerConfig) -> Self {
        Self { config, current: config.base_lr, best: f64::INFINITY, bad_epochs: 0 }
    }
}

/// Learning rate for `epoch`. `metric` is the most recent monitored loss
/// (lower is better), or `None` before any has been observed. Metrics seen
/// during warm-up are ignored.
pub fn lr_at(epoch: usize, metric: Option<f64>, mut state: LrState) -> (f64, LrState) {
    let c = state.config;
    if epoch < c.warmup_epochs {
        let lr = c.base_lr * ((epoch + 1) as f64 / c.warmup_epochs as f64);
        state.current = c.base_lr;
        return (lr, state);
    }
    if let Some(m) = metric {
        if m < state.best - c.threshold {
            state.best = m;
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
            if state.bad_epochs >= c.patience {
                state.current = (state.current * c.factor).max(c.min_lr);
                state.bad_epochs = 0;
            }
        }
    }
    (state.current, state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_start_and_end() {
        let cfg = SchedulerConfig { base_lr: 3e-4, warmup_epochs: 20, ..Default::default() };
        let (lr0, _) = lr_at(0, None, LrState::new(cfg));
        assert!((lr0 - 1.5e-5).abs() < 1e-18);
        let (lr19, _) = lr_at(19, None, LrState::new(cfg));
        assert_eq!(lr19, 3e-4);
    }

    #[test]
    fn plateau_halves_once_after_patience() {
        let cfg = SchedulerConfig { base_lr: 1.0, warmup_epochs: 0, patience: 10, factor: 0.5, ..Default::default() };
        let mut state = LrState::new(cfg);
        let (lr, s) = lr_at(0, Some(1.0), state);
        state = s;
        assert_eq!(lr, 1.0);
        let mut lrs = Vec::new();
        for e in 1..=10 {
            let (lr, s) = lr_at(e, Some(1.0), state);
            state = s;
            lrs.push(lr);
        }
        assert_eq!(lrs[..9], [1.0; 9]);
        assert_eq!(lrs[9], 0.5);
    }

    #[test]
    fn improvements_below_threshold_count_as_plateau() {
        let cfg = SchedulerConfig { base_lr: 1.0, warmup_epochs: 0, patience: 2, ..Default::default() };
        let (_, s) = lr_at(0, Some(1.0), LrState::new(cfg));
        let (_, s) = lr_at(1, Some(1.0 - 5e-5), s);
        let (lr, _) = lr_at(2, Some(1.0 - 9e-5), s);
        assert_eq!(lr, 0.5);
    }
}
