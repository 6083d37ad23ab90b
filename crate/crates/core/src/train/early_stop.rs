#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Patience counter on a validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Records one epoch. An improvement must beat the best loss by more than
    /// `min_delta`; `patience` epochs in a row without one stop training.
    pub fn update(&mut self, val_loss: f64) -> Decision {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        if self.wait >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }
}

/// Functional form of [`EarlyStopping::update`].
pub fn early_stop_update(state: &mut EarlyStopping, val_loss: f64) -> Decision {
    state.update(val_loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decreasing_losses_never_stop() {
        let mut s = EarlyStopping::new(20, 1e-4);
        for e in 0..500 {
            assert_eq!(s.update(10.0 - e as f64 * 0.01), Decision::Continue);
        }
    }

    #[test]
    fn constant_loss_stops_after_patience() {
        let mut s = EarlyStopping::new(20, 1e-4);
        assert_eq!(s.update(0.5), Decision::Continue);
        for _ in 0..19 {
            assert_eq!(s.update(0.5), Decision::Continue);
        }
        assert_eq!(s.update(0.5), Decision::Stop);
    }

    #[test]
    fn late_improvement_resets() {
        let mut s = EarlyStopping::new(20, 1e-4);
        s.update(0.5);
        for _ in 0..18 {
            s.update(0.5);
        }
        assert_eq!(s.update(0.4), Decision::Continue);
        assert_eq!(s.wait, 0);
        for _ in 0..19 {
            assert_eq!(s.update(0.4), Decision::Continue);
        }
        assert_eq!(s.update(0.4), Decision::Stop);
    }

    #[test]
    fn tiny_gains_do_not_count() {
        let mut s = EarlyStopping::new(2, 1e-4);
        s.update(0.5);
        s.update(0.49995);
        assert_eq!(s.update(0.4999), Decision::Stop);
    }
}
