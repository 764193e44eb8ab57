use serde::{Deserialize, Serialize};

use super::{Dense, GcnModel, NnError, ShapeError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Optimizer state owned by one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<Dense>,
    v: Vec<Dense>,
    step: u64,
}

impl OptimState {
    pub fn new(kind: OptimizerKind, lr: f64, model: &GcnModel) -> Self {
        let zeros: Vec<Dense> = model
            .weights()
            .iter()
            .map(|w| Dense::zeros(w.rows(), w.cols()))
            .collect();
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (zeros.clone(), zeros),
        };
        Self { kind, lr, m, v, step: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step on `model` with the given per-layer gradients.
    pub fn apply_update(&mut self, model: &mut GcnModel, grads: &[Dense]) -> Result<(), NnError> {
        let weights = model.weights_mut();
        if grads.len() != weights.len() {
            return Err(ShapeError::new(
                "apply_update",
                format!("{} gradient tensors", weights.len()),
                format!("{}", grads.len()),
            )
            .into());
        }
        for (w, g) in weights.iter().zip(grads) {
            if w.shape() != g.shape() {
                return Err(ShapeError::new(
                    "apply_update",
                    format!("{:?}", w.shape()),
                    format!("{:?}", g.shape()),
                )
                .into());
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in weights.iter_mut().zip(grads) {
                    w.axpy(-self.lr, g)?;
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((w, g), m), v) in weights.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let it = w
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
                    for ((wi, &gi), (mi, vi)) in it {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *wi -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
