use crate::nn::Dense;

use super::EngineError;

/// Holder of the global weights.
///
/// Sync rounds collect one upload per worker and then average; async uploads
/// are mixed in one at a time.
#[derive(Debug, Clone)]
pub struct ParamServer {
    global: Vec<Dense>,
    alpha: f64,
    received: Vec<Option<Vec<Dense>>>,
    updates: u64,
}

impl ParamServer {
    pub fn new(weights: Vec<Dense>, num_workers: usize, alpha: f64) -> Self {
        Self {
            global: weights,
            alpha,
            received: vec![None; num_workers],
            updates: 0,
        }
    }

    pub fn global(&self) -> &[Dense] {
        &self.global
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Completed sync rounds plus async mixes.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn check_shapes(&self, w: &[Dense]) -> Result<(), EngineError> {
        let ok = w.len() == self.global.len() && w.iter().zip(&self.global).all(|(a, b)| a.shape() == b.shape());
        if ok {
            Ok(())
        } else {
            Err(EngineError::Mismatch("uploaded weights do not match the global model".into()))
        }
    }

    /// Records worker `m`'s weights for the current sync round.
    pub fn submit(&mut self, m: usize, w: Vec<Dense>) -> Result<(), EngineError> {
        self.check_shapes(&w)?;
        if self.received[m].is_some() {
            return Err(EngineError::Mismatch(format!("worker {m} uploaded twice in one round")));
        }
        self.received[m] = Some(w);
        Ok(())
    }

    /// Closes the round: `global ← Σ_m coef[m] · W_m`, summed in worker order.
    /// Fails unless every worker has uploaded.
    pub fn finish_round(&mut self, coef: &[f64]) -> Result<(), EngineError> {
        if let Some(m) = self.received.iter().position(Option::is_none) {
            return Err(EngineError::Mismatch(format!("round closed before worker {m} uploaded")));
        }
        let uploads: Vec<Vec<Dense>> = self.received.iter_mut().map(|r| r.take().expect("checked")).collect();
        let mut next: Vec<Dense> = self.global.iter().map(|w| Dense::zeros(w.rows(), w.cols())).collect();
        for (wm, &c) in uploads.iter().zip(coef) {
            for (acc, w) in next.iter_mut().zip(wm) {
                acc.axpy(c, w)?;
            }
        }
        self.global = next;
        self.updates += 1;
        Ok(())
    }

    /// Async rule `global ← (1 - α) global + α W_m`.
    pub fn mix(&mut self, w: &[Dense]) -> Result<(), EngineError> {
        self.check_shapes(w)?;
        if self.alpha == 1.0 {
            self.global = w.to_vec();
        } else {
            for (g, wm) in self.global.iter_mut().zip(w) {
                g.scale_in_place(1.0 - self.alpha);
                g.axpy(self.alpha, wm)?;
            }
        }
        self.updates += 1;
        Ok(())
    }
}
