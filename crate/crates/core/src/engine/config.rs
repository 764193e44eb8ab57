use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::nn::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Sync,
    Async,
}

/// How async workers are driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsyncScheduler {
    /// Deterministic discrete-event simulation on the simulated clock.
    #[default]
    Simulated,
    /// One free-running OS thread per worker.
    Threads,
}

/// Halo values used before the first pull delivers anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColdStart {
    /// Zero vectors.
    #[default]
    Zeros,
    /// Every worker pushes version 0 and pulls once before epoch 1.
    FirstPushBlocking,
}

/// Weights of the server-side average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggWeighting {
    #[default]
    Mean,
    /// Proportional to part size.
    NodeCount,
}

/// Where a worker's halo representations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaloSource {
    /// Values cached from the last pull.
    #[default]
    Store,
    /// Current values computed at the epoch's weights. Test hook; the pull and
    /// push schedule still runs and is still counted.
    Fresh,
}

/// Straggler parts and their per-epoch delay range in simulated time units.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StragglerSpec {
    pub parts: Vec<usize>,
    pub low: f64,
    pub high: f64,
}

impl StragglerSpec {
    pub fn validate(&self, num_parts: usize) -> Result<(), EngineError> {
        if !(self.low.is_finite() && self.high.is_finite()) || self.low < 0.0 {
            return Err(EngineError::Config(format!(
                "straggler delay bounds must be finite and non-negative, got [{}, {}]",
                self.low, self.high
            )));
        }
        if self.low > self.high {
            return Err(EngineError::Config(format!(
                "straggler delay low {} exceeds high {}",
                self.low, self.high
            )));
        }
        if let Some(&p) = self.parts.iter().find(|&&p| p >= num_parts) {
            return Err(EngineError::Config(format!(
                "straggler part {p} out of range for {num_parts} parts"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub sync_interval: usize,
    pub mode: Mode,
    pub scheduler: AsyncScheduler,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Normalise the copies pushed to the store.
    pub normalize_push: bool,
    /// Normalise hidden activations inside the forward pass.
    pub normalize_live: bool,
    pub stragglers: StragglerSpec,
    pub seed: u64,
    pub cold_start: ColdStart,
    pub prefetch: bool,
    pub aggregation: AggWeighting,
    /// Async mixing weight; `None` means `1/M`.
    pub alpha: Option<f64>,
    /// Simulated cost of one epoch over the whole graph.
    pub unit_cost: f64,
    pub halo_source: HaloSource,
    /// Sync epochs at which fresh and stale values are both captured.
    pub probe_epochs: BTreeSet<usize>,
    pub trace_weights: bool,
    pub trace_gradients: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            sync_interval: 10,
            mode: Mode::Sync,
            scheduler: AsyncScheduler::Simulated,
            lr: 0.01,
            optimizer: OptimizerKind::Adam,
            normalize_push: true,
            normalize_live: false,
            stragglers: StragglerSpec::default(),
            seed: 0,
            cold_start: ColdStart::Zeros,
            prefetch: true,
            aggregation: AggWeighting::Mean,
            alpha: None,
            unit_cost: 1.0,
            halo_source: HaloSource::Store,
            probe_epochs: BTreeSet::new(),
            trace_weights: false,
            trace_gradients: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_parts: usize) -> Result<(), EngineError> {
        if num_parts == 0 {
            return Err(EngineError::Config("at least one part is required".into()));
        }
        if self.epochs < 1 {
            return Err(EngineError::Config("epochs must be ≥ 1".into()));
        }
        if self.sync_interval < 1 {
            return Err(EngineError::Config("sync_interval must be ≥ 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(EngineError::Config(format!("learning rate must be finite and ≥ 0, got {}", self.lr)));
        }
        if !self.unit_cost.is_finite() || self.unit_cost <= 0.0 {
            return Err(EngineError::Config(format!("unit_cost must be positive, got {}", self.unit_cost)));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(EngineError::Config(format!("alpha must lie in (0, 1], got {a}")));
            }
        }
        if let Some(&e) = self.probe_epochs.iter().find(|&&e| e == 0 || e > self.epochs) {
            return Err(EngineError::Config(format!(
                "probe epoch {e} outside 1..={}",
                self.epochs
            )));
        }
        if !self.probe_epochs.is_empty() && self.mode == Mode::Async {
            return Err(EngineError::Config("probes need sync mode, where all workers share weights".into()));
        }
        self.stragglers.validate(num_parts)
    }

    pub fn alpha_for(&self, num_parts: usize) -> f64 {
        self.alpha.unwrap_or(1.0 / num_parts as f64)
    }

    /// PULL guard: `r % N == 0`.
    pub fn is_pull_epoch(&self, r: usize) -> bool {
        r.is_multiple_of(self.sync_interval)
    }

    /// PUSH guard: `(r - 1) % N == 0`.
    pub fn is_push_epoch(&self, r: usize) -> bool {
        (r - 1).is_multiple_of(self.sync_interval)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_guards() {
        let cfg = TrainConfig {
            sync_interval: 10,
            ..TrainConfig::default()
        };
        let pulls: Vec<usize> = (1..=30).filter(|&r| cfg.is_pull_epoch(r)).collect();
        let pushes: Vec<usize> = (1..=30).filter(|&r| cfg.is_push_epoch(r)).collect();
        assert_eq!(pulls, vec![10, 20, 30]);
        assert_eq!(pushes, vec![1, 11, 21]);
    }

    #[test]
    fn zero_interval_is_rejected() {
        let cfg = TrainConfig {
            sync_interval: 0,
            ..TrainConfig::default()
        };
        let err = cfg.validate(2).unwrap_err().to_string();
        assert!(err.contains("sync_interval must be ≥ 1"), "{err}");
    }

    #[test]
    fn straggler_validation() {
        let bad = StragglerSpec {
            parts: vec![0],
            low: 10.0,
            high: 8.0,
        };
        assert!(bad.validate(2).is_err());
        let out_of_range = StragglerSpec {
            parts: vec![4],
            low: 8.0,
            high: 10.0,
        };
        assert!(out_of_range.validate(4).is_err());
        assert!(out_of_range.validate(5).is_ok());
    }

    #[test]
    fn probes_must_lie_in_range() {
        let mut cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        cfg.probe_epochs.insert(6);
        assert!(cfg.validate(1).is_err());
        cfg.probe_epochs = [1, 5].into_iter().collect();
        assert!(cfg.validate(1).is_ok());
    }
}
