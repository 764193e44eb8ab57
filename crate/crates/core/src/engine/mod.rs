//! Training loops: synchronous rounds with a barrier, asynchronous mixing,
//! and the single-machine reference trainer.

mod asynch;
mod config;
mod delay;
mod fresh;
mod full;
mod metrics;
mod server;
mod sync;
mod worker;

use thiserror::Error;

pub use asynch::train_async;
pub use config::{AggWeighting, AsyncScheduler, ColdStart, HaloSource, Mode, StragglerSpec, TrainConfig};
pub use delay::{delay_rng, inject_delay};
pub use fresh::{fresh_halo_gradients, part_coefficients, FreshOptions, HaloGradient};
pub use full::{evaluate, train_full_graph, Evaluation, FullGraph};
pub use metrics::{EpochRecord, PartProbe, ProbeRecord, RunMetrics};
pub use server::ParamServer;
pub use sync::train_sync;

use crate::graph::{build_prop_matrix, Graph};
use crate::nn::{GcnModel, NnError, ShapeError};
use crate::partition::Subgraph;
use crate::repstore::StoreError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("inconsistent inputs: {0}")]
    Mismatch(String),
    #[error("training diverged at step {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("worker failed: {0}")]
    WorkerPanic(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<ShapeError> for EngineError {
    fn from(e: ShapeError) -> Self {
        EngineError::Nn(NnError::Shape(e))
    }
}

/// Runs [`train_sync`] or [`train_async`] according to `cfg.mode`.
pub fn train(g: &Graph, subs: &[Subgraph], model0: &GcnModel, cfg: &TrainConfig) -> Result<(GcnModel, RunMetrics), EngineError> {
    match cfg.mode {
        Mode::Sync => train_sync(g, subs, model0, cfg),
        Mode::Async => train_async(g, subs, model0, cfg),
    }
}

pub(crate) fn owner_table(subs: &[Subgraph], n: usize) -> Vec<usize> {
    let mut owner = vec![0; n];
    for s in subs {
        for &v in &s.local_nodes {
            owner[v] = s.part_id;
        }
    }
    owner
}

/// Validates the inputs shared by both training modes.
fn prepare<'a>(g: &'a Graph, subs: &[Subgraph], model0: &GcnModel, cfg: &TrainConfig) -> Result<FullGraph<'a>, EngineError> {
    cfg.validate(subs.len())?;
    full::check_model(g, model0)?;
    let mut seen = vec![false; g.num_nodes()];
    for (m, s) in subs.iter().enumerate() {
        if s.part_id != m {
            return Err(EngineError::Mismatch(format!("subgraph {m} carries part id {}", s.part_id)));
        }
        for &v in &s.local_nodes {
            if v >= seen.len() || std::mem::replace(&mut seen[v], true) {
                return Err(EngineError::Mismatch(format!("node {v} missing from the graph or owned twice")));
            }
        }
    }
    if let Some(v) = seen.iter().position(|&s| !s) {
        return Err(EngineError::Mismatch(format!("node {v} belongs to no subgraph")));
    }
    FullGraph::new(g, build_prop_matrix(g))
}
