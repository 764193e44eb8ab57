use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::nn::{Activation, Dense};
use crate::repstore::CounterSnapshot;

/// One line of `metrics.jsonl`.
///
/// Sync runs emit one record per epoch, async runs one per server update.
/// Record 0 describes the initial weights. Losses and F1 scores are evaluated
/// on the whole graph at the server's weights after the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Sync epoch, or async server update count.
    pub epoch: usize,
    /// Async only: the uploading worker and its local epoch.
    pub worker: Option<usize>,
    pub local_epoch: Option<usize>,
    /// Simulated time units.
    pub time: f64,
    pub train_loss: f64,
    /// Mean local loss reported by the workers that contributed.
    pub local_loss: Option<f64>,
    pub train_f1: f64,
    pub val_f1: Option<f64>,
    pub test_f1: Option<f64>,
    /// Norm of the aggregated gradient applied in this step.
    pub grad_norm: Option<f64>,
    /// Oldest halo value in use, in epochs. Cold entries are not counted.
    pub max_staleness: Option<u64>,
    pub mean_halo_age: Option<f64>,
    pub pulled: bool,
    pub pushed: bool,
    pub counters: CounterSnapshot,
}

/// Halo values seen by one part at a probe epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartProbe {
    pub part_id: usize,
    pub halo_nodes: Vec<usize>,
    pub max_degree: usize,
    pub train_count: usize,
    /// Per hidden layer: the values the worker used.
    pub stale: Vec<Dense>,
    /// Per hidden layer: current values at the probe weights, push transform applied.
    pub fresh: Vec<Dense>,
    /// Largest `Σ_{u≠v} P_vu` over the part's rows.
    pub neighbor_row_sum_max: f64,
    /// Per layer `k`: largest row norm of the stale aggregate over training rows.
    pub agg_norm_max: Vec<f64>,
    /// Per layer `k`: largest row norm of `P_in · aggregate_k` over training rows.
    pub prop_agg_norm_max: Vec<f64>,
    /// The part's own gradient with stale halos.
    pub grad: Vec<Dense>,
}

/// Everything captured at one probe epoch, before that epoch's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub epoch: usize,
    pub activation: Activation,
    pub normalize_live: bool,
    pub weights: Vec<Dense>,
    /// Server averaging coefficient of each part.
    pub coefficients: Vec<f64>,
    pub parts: Vec<PartProbe>,
    /// Aggregated gradient with the stale halos the workers used.
    pub grad_stale: Vec<Dense>,
    /// Aggregated gradient of the same local objectives with current halo values.
    pub grad_fresh: Vec<Dense>,
    /// Full-graph gradient.
    pub grad_full: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: Mode,
    pub num_parts: usize,
    pub records: Vec<EpochRecord>,
    pub counters: CounterSnapshot,
    pub probes: Vec<ProbeRecord>,
    /// Server weights after each update, when traced.
    pub weight_trace: Vec<Vec<Dense>>,
    /// Aggregated gradient of each update, when traced.
    pub grad_trace: Vec<Vec<Dense>>,
    /// Age in epochs of every halo value read from the store, by age.
    pub age_histogram: BTreeMap<u64, u64>,
    /// Halo reads that found no value yet.
    pub cold_reads: u64,
    pub ps_updates: u64,
    pub wall_seconds: f64,
}

impl RunMetrics {
    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.train_loss)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// First simulated time at which the train loss is at most `target`.
    pub fn time_to_loss(&self, target: f64) -> Option<f64> {
        self.records.iter().find(|r| r.train_loss <= target).map(|r| r.time)
    }

    pub fn max_staleness(&self) -> Option<u64> {
        self.records.iter().filter_map(|r| r.max_staleness).max()
    }

    /// Writes one JSON object per record.
    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_probes_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        for p in &self.probes {
            serde_json::to_writer(&mut *w, p)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Tracks the versions of the halo values a worker currently holds.
#[derive(Debug, Clone, Default)]
pub(crate) struct AgeTally {
    pub max: Option<u64>,
    pub sum: u64,
    pub count: u64,
}

impl AgeTally {
    pub fn add(&mut self, age: u64) {
        self.max = Some(self.max.map_or(age, |m| m.max(age)));
        self.sum += age;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &AgeTally) {
        if let Some(m) = other.max {
            self.max = Some(self.max.map_or(m, |x| x.max(m)));
        }
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum as f64 / self.count as f64)
    }
}
