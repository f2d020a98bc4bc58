use serde::{Deserialize, Serialize};

/// Progress of a run under the plateau learning-rate rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    pub base_lr: f64,
    pub current_lr: f64,
    pub reductions: u32,
}

/// What a call to [`TrainState::lr_step`] did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlateauOutcome {
    pub improved: bool,
    pub reduced: bool,
}

impl TrainState {
    pub fn new(lr: f64) -> Self {
        TrainState {
            epoch: 0,
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            base_lr: lr,
            current_lr: lr,
            reductions: 0,
        }
    }

    /// Records one epoch's validation loss.
    ///
    /// Only a strict improvement of the running best resets the stall counter;
    /// once the counter reaches `patience` the rate is multiplied by `factor`
    /// and the counter starts over.
    pub fn lr_step(&mut self, val_loss: f64, factor: f64, patience: usize) -> PlateauOutcome {
        self.epoch += 1;
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.epochs_since_improvement = 0;
            return PlateauOutcome {
                improved: true,
                reduced: false,
            };
        }
        self.epochs_since_improvement += 1;
        let reduced = self.epochs_since_improvement >= patience;
        if reduced {
            self.reductions += 1;
            self.current_lr = self.base_lr * factor.powi(self.reductions as i32);
            self.epochs_since_improvement = 0;
        }
        PlateauOutcome {
            improved: false,
            reduced,
        }
    }
}

/// Functional form of [`TrainState::lr_step`].
pub fn lr_step(state: &TrainState, val_loss: f64, factor: f64, patience: usize) -> TrainState {
    let mut next = state.clone();
    next.lr_step(val_loss, factor, patience);
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stall_of_patience_reduces_once() {
        let mut s = TrainState::new(1e-4);
        s.lr_step(1.0, 0.2, 50);
        for _ in 0..49 {
            assert!(!s.lr_step(1.0, 0.2, 50).reduced);
        }
        assert_eq!(s.current_lr, 1e-4);
        assert!(s.lr_step(1.0, 0.2, 50).reduced);
        assert_eq!(s.current_lr, 1e-4 * 0.2);
        assert_eq!(s.epochs_since_improvement, 0);
    }

    #[test]
    fn late_improvement_resets() {
        let mut s = TrainState::new(1e-4);
        s.lr_step(1.0, 0.2, 50);
        for _ in 0..48 {
            s.lr_step(1.0, 0.2, 50);
        }
        let out = s.lr_step(0.9, 0.2, 50);
        assert!(out.improved && !out.reduced);
        assert_eq!(s.epochs_since_improvement, 0);
        assert_eq!(s.current_lr, 1e-4);
    }

    #[test]
    fn equal_loss_is_not_improvement() {
        let s = lr_step(&TrainState::new(1.0), 0.5, 0.5, 2);
        let s = lr_step(&s, 0.5, 0.5, 2);
        assert_eq!(s.epochs_since_improvement, 1);
        assert_eq!(s.best_val_loss, 0.5);
    }
}
