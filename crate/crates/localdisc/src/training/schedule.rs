//! Plateau learning-rate scheduling: halve when validation stops improving.

use serde::{Deserialize, Serialize};

use super::checkpoint::SchedSnapshot;

/// Multiplies the learning rate by `factor` once the observed loss has gone
/// `patience` consecutive epochs without a strict improvement over the best
/// value seen. The counter resets both on improvement and after a cut; the
/// best value is never reset. `patience` 0 disables scheduling entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            lr: initial_lr,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record this epoch's loss; returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if self.patience == 0 {
            return self.lr;
        }
        match self.best {
            Some(best) if loss >= best => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }

    pub fn snapshot(&self) -> SchedSnapshot {
        SchedSnapshot {
            lr: self.lr,
            best: self.best,
            bad_epochs: self.bad_epochs,
        }
    }

    pub fn restore(snapshot: &SchedSnapshot, patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            lr: snapshot.lr,
            best: snapshot.best,
            bad_epochs: snapshot.bad_epochs,
        }
    }
}

/// Fold a whole loss history through a fresh scheduler and return the final
/// learning rate.
pub fn plateau_lr_schedule(history: &[f64], patience: usize, factor: f64, initial_lr: f64) -> f64 {
    let mut s = PlateauScheduler::new(initial_lr, patience, factor);
    for &loss in history {
        s.observe(loss);
    }
    s.lr()
}
