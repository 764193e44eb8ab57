use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, Dense, NnError};

/// An `L`-layer GCN: weights `W^(1..=L)` with `W^(ℓ)` of shape `d_{ℓ-1} × d_ℓ`.
///
/// Hidden layers use `activation`; the last layer is linear and produces logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnModel {
    dims: Vec<usize>,
    weights: Vec<Dense>,
    activation: Activation,
}

impl GcnModel {
    /// Glorot-uniform initialisation from a seed.
    pub fn new(dims: &[usize], activation: Activation, seed: u64) -> Result<Self, NnError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::Model(format!(
                "need at least two positive layer dimensions, got {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = dims
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| rng.gen_range(-limit..=limit)).collect();
                Dense::from_vec(w[0], w[1], data).expect("sized by construction")
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            activation,
        })
    }

    pub fn from_weights(weights: Vec<Dense>, activation: Activation) -> Result<Self, NnError> {
        if weights.is_empty() {
            return Err(NnError::Model("model needs at least one layer".into()));
        }
        let mut dims = vec![weights[0].rows()];
        for (i, w) in weights.iter().enumerate() {
            if w.rows() != *dims.last().unwrap() {
                return Err(NnError::Model(format!(
                    "layer {} expects input width {}, previous layer gives {}",
                    i + 1,
                    w.rows(),
                    dims.last().unwrap()
                )));
            }
            if !w.is_finite() {
                return Err(NnError::Model(format!("layer {} has non-finite weights", i + 1)));
            }
            dims.push(w.cols());
        }
        Ok(Self {
            dims,
            weights,
            activation,
        })
    }

    /// Layer count `L`.
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn weights(&self) -> &[Dense] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Dense] {
        &mut self.weights
    }

    /// Replaces all weights; shapes must match the current ones.
    pub fn set_weights(&mut self, weights: &[Dense]) -> Result<(), NnError> {
        if weights.len() != self.weights.len()
            || weights.iter().zip(&self.weights).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(NnError::Model("replacement weights do not match model shape".into()));
        }
        self.weights.clone_from_slice(weights);
        Ok(())
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Activation of 0-based layer `k`; the output layer is linear.
    pub fn layer_activation(&self, k: usize) -> Activation {
        if k + 1 == self.num_layers() {
            Activation::Identity
        } else {
            self.activation
        }
    }

    pub fn num_params(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1]).sum()
    }

    /// Widths of the stored hidden representations, `d_1 … d_{L-1}`.
    pub fn hidden_dims(&self) -> &[usize] {
        &self.dims[1..self.dims.len() - 1]
    }
}
