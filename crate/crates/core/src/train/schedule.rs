//! Linear warmup followed by reduce-on-plateau.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub factor: f64,
    /// Evaluations without improvement before a reduction.
    pub patience: usize,
    pub stop_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 2000,
            factor: 0.8,
            patience: 3,
            stop_lr: 1e-4,
        }
    }
}

/// Plateau bookkeeping. Evaluations before warmup ends only track the best
/// value; they never trigger a reduction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Plateau {
    pub reductions: u32,
    pub best: Option<f64>,
    pub bad_evals: usize,
}

impl Plateau {
    /// Learning rate for update number `step` (1-based).
    pub fn lr_at(&self, step: u64, cfg: &ScheduleConfig) -> f64 {
        let ramp = if cfg.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / cfg.warmup_steps as f64).min(1.0)
        };
        cfg.lr * cfg.factor.powi(self.reductions as i32) * ramp
    }

    /// Post-warmup rate after the reductions so far.
    pub fn plateau_lr(&self, cfg: &ScheduleConfig) -> f64 {
        cfg.lr * cfg.factor.powi(self.reductions as i32)
    }

    /// Records a dev metric (higher is better); returns whether it improved.
    pub fn observe(&mut self, metric: f64, step: u64, cfg: &ScheduleConfig) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad_evals = 0;
            return true;
        }
        if step >= cfg.warmup_steps {
            self.bad_evals += 1;
            if self.bad_evals >= cfg.patience {
                self.reductions += 1;
                self.bad_evals = 0;
            }
        }
        false
    }

    pub fn should_stop(&self, cfg: &ScheduleConfig) -> bool {
        self.plateau_lr(cfg) < cfg.stop_lr
    }
}
