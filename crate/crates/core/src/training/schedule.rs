use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub base_lr: f64,
    pub factor: f64,
    /// Consecutive epochs without improvement before a reduction.
    pub patience: usize,
    /// Absolute improvement in the monitored loss that counts as progress.
    pub min_delta: f64,
    pub floor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            factor: 0.8,
            patience: 30,
            min_delta: 1e-4,
            floor: 1e-4,
        }
    }
}

/// Reduce-on-plateau with a rolling patience window. The rate never
/// increases; a base rate already below `floor` is left alone.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub config: PlateauConfig,
    lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauSchedule {
    pub fn new(config: PlateauConfig) -> Self {
        Self {
            config,
            lr: config.base_lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's monitored loss and returns the rate from then on.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.config.min_delta {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.config.patience {
                if self.lr > self.config.floor {
                    self.lr = (self.lr * self.config.factor).max(self.config.floor);
                }
                self.wait = 0;
            }
        }
        self.lr
    }
}
