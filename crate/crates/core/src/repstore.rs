//! Versioned in-process store of stale node representations.
//!
//! Keys are `(node, layer)` with `layer` in `1..L`. Each key holds one vector
//! and the epoch at which it was pushed. Reads and writes are atomic per key;
//! batches are not atomic as a whole.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Dense, ShapeError};

const SNAPSHOT_MAGIC: &[u8; 8] = b"DGSTSNAP";
const SNAPSHOT_VERSION: u32 = 1;
const F64_BYTES: u64 = 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("layer {layer} is not storable; valid layers are 1..{num_layers}")]
    InvalidLayer { layer: usize, num_layers: usize },
    #[error("node {node} out of range for {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("part {part} does not own node {node}")]
    NotOwner { node: usize, part: usize },
    #[error("version regression at node {node} layer {layer}: stored {stored}, pushed {pushed}")]
    VersionRegression {
        node: usize,
        layer: usize,
        stored: u64,
        pushed: u64,
    },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("prefetch handle already consumed")]
    HandleConsumed,
    #[error("prefetch worker failed: {0}")]
    PrefetchFailed(String),
    #[error("invalid snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RepKey {
    pub node: usize,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepEntry {
    pub vector: Vec<f64>,
    pub version: u64,
}

/// What a push does when it carries an older version than the stored one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionPolicy {
    /// Reject the whole batch.
    #[default]
    Strict,
    /// Skip the older entries and keep the rest.
    Lenient,
}

/// Monotone I/O counters, shared by all workers.
///
/// `pulled_values` and `pushed_values` count vectors; the byte counters count
/// `8 · width` per vector.
#[derive(Debug, Default)]
pub struct IoCounters {
    pull_ops: AtomicU64,
    push_ops: AtomicU64,
    pulled_values: AtomicU64,
    pushed_values: AtomicU64,
    pulled_bytes: AtomicU64,
    pushed_bytes: AtomicU64,
    param_sync_bytes: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub pull_ops: u64,
    pub push_ops: u64,
    pub pulled_values: u64,
    pub pushed_values: u64,
    pub pulled_bytes: u64,
    pub pushed_bytes: u64,
    pub param_sync_bytes: u64,
}

impl CounterSnapshot {
    /// Scalar count of representation values moved, both directions.
    pub fn rep_scalars(&self) -> u64 {
        (self.pulled_bytes + self.pushed_bytes) / F64_BYTES
    }
}

impl IoCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            pull_ops: self.pull_ops.load(Ordering::SeqCst),
            push_ops: self.push_ops.load(Ordering::SeqCst),
            pulled_values: self.pulled_values.load(Ordering::SeqCst),
            pushed_values: self.pushed_values.load(Ordering::SeqCst),
            pulled_bytes: self.pulled_bytes.load(Ordering::SeqCst),
            pushed_bytes: self.pushed_bytes.load(Ordering::SeqCst),
            param_sync_bytes: self.param_sync_bytes.load(Ordering::SeqCst),
        }
    }

    /// Records `scalars` parameter values moved between a worker and the server.
    pub fn record_param_sync(&self, scalars: u64) {
        self.param_sync_bytes.fetch_add(scalars * F64_BYTES, Ordering::SeqCst);
    }
}

/// Result of a pull, in request order.
#[derive(Debug, Clone, PartialEq)]
pub struct PullResult {
    pub vectors: Dense,
    pub versions: Vec<u64>,
    /// False for keys that were never pushed (cold-start zeros, version 0).
    pub present: Vec<bool>,
}

type Slot = RwLock<Option<Arc<RepEntry>>>;

/// Shared representation store for hidden layers `1..L`.
#[derive(Debug)]
pub struct RepStore {
    num_nodes: usize,
    widths: Vec<usize>,
    policy: VersionPolicy,
    owners: Option<Vec<usize>>,
    slots: Vec<Vec<Slot>>,
    counters: IoCounters,
}

impl RepStore {
    /// `hidden_widths` holds `d_1 … d_{L-1}`; an `L = 1` model stores nothing.
    pub fn new(num_nodes: usize, hidden_widths: &[usize], policy: VersionPolicy) -> Self {
        let slots = hidden_widths
            .iter()
            .map(|_| (0..num_nodes).map(|_| RwLock::new(None)).collect())
            .collect();
        Self {
            num_nodes,
            widths: hidden_widths.to_vec(),
            policy,
            owners: None,
            slots,
            counters: IoCounters::default(),
        }
    }

    /// Enables the check that pushes only touch nodes owned by the pushing part.
    pub fn with_owners(mut self, assignment: Vec<usize>) -> Self {
        assert_eq!(assignment.len(), self.num_nodes, "owner table must cover every node");
        self.owners = Some(assignment);
        self
    }

    /// Model depth `L`.
    pub fn num_layers(&self) -> usize {
        self.widths.len() + 1
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn policy(&self) -> VersionPolicy {
        self.policy
    }

    pub fn width(&self, layer: usize) -> Result<usize, StoreError> {
        self.check_layer(layer)?;
        Ok(self.widths[layer - 1])
    }

    pub fn counters(&self) -> &IoCounters {
        &self.counters
    }

    fn check_layer(&self, layer: usize) -> Result<(), StoreError> {
        if layer == 0 || layer >= self.num_layers() {
            return Err(StoreError::InvalidLayer {
                layer,
                num_layers: self.num_layers(),
            });
        }
        Ok(())
    }

    fn check_node(&self, node: usize) -> Result<(), StoreError> {
        if node >= self.num_nodes {
            return Err(StoreError::NodeOutOfRange {
                node,
                num_nodes: self.num_nodes,
            });
        }
        Ok(())
    }

    /// Writes row `i` of `vectors` to `(node_ids[i], layer)` at `version`.
    /// Returns the number of entries skipped under [`VersionPolicy::Lenient`].
    pub fn push_batch(
        &self,
        part_id: usize,
        layer: usize,
        node_ids: &[usize],
        vectors: &Dense,
        version: u64,
    ) -> Result<usize, StoreError> {
        self.check_layer(layer)?;
        let width = self.widths[layer - 1];
        if vectors.rows() != node_ids.len() || (vectors.cols() != width && !node_ids.is_empty()) {
            return Err(ShapeError::new(
                "push_batch",
                format!("{}x{width}", node_ids.len()),
                format!("{}x{}", vectors.rows(), vectors.cols()),
            )
            .into());
        }
        for &node in node_ids {
            self.check_node(node)?;
            if let Some(owners) = &self.owners {
                if owners[node] != part_id {
                    return Err(StoreError::NotOwner { node, part: part_id });
                }
            }
        }
        if self.policy == VersionPolicy::Strict {
            for &node in node_ids {
                let slot = self.slots[layer - 1][node].read().expect("store lock poisoned");
                if let Some(e) = slot.as_ref() {
                    if e.version > version {
                        return Err(StoreError::VersionRegression {
                            node,
                            layer,
                            stored: e.version,
                            pushed: version,
                        });
                    }
                }
            }
        }
        let mut dropped = 0;
        for (i, &node) in node_ids.iter().enumerate() {
            let entry = Arc::new(RepEntry {
                vector: vectors.row(i).to_vec(),
                version,
            });
            let mut slot = self.slots[layer - 1][node].write().expect("store lock poisoned");
            match slot.as_ref() {
                Some(e) if e.version > version => match self.policy {
                    VersionPolicy::Lenient => dropped += 1,
                    VersionPolicy::Strict => {
                        return Err(StoreError::VersionRegression {
                            node,
                            layer,
                            stored: e.version,
                            pushed: version,
                        })
                    }
                },
                _ => *slot = Some(entry),
            }
        }
        let n = node_ids.len() as u64;
        self.counters.push_ops.fetch_add(1, Ordering::SeqCst);
        self.counters.pushed_values.fetch_add(n, Ordering::SeqCst);
        self.counters
            .pushed_bytes
            .fetch_add(n * width as u64 * F64_BYTES, Ordering::SeqCst);
        Ok(dropped)
    }

    /// Reads `(node_ids[i], layer)` into row `i`. Missing keys read as zeros at version 0.
    pub fn pull_batch(&self, layer: usize, node_ids: &[usize]) -> Result<PullResult, StoreError> {
        self.check_layer(layer)?;
        let width = self.widths[layer - 1];
        let mut vectors = Dense::zeros(node_ids.len(), width);
        let mut versions = vec![0; node_ids.len()];
        let mut present = vec![false; node_ids.len()];
        for (i, &node) in node_ids.iter().enumerate() {
            self.check_node(node)?;
            let entry = self.slots[layer - 1][node].read().expect("store lock poisoned").clone();
            if let Some(e) = entry {
                vectors.row_mut(i).copy_from_slice(&e.vector);
                versions[i] = e.version;
                present[i] = true;
            }
        }
        let n = node_ids.len() as u64;
        self.counters.pull_ops.fetch_add(1, Ordering::SeqCst);
        self.counters.pulled_values.fetch_add(n, Ordering::SeqCst);
        self.counters
            .pulled_bytes
            .fetch_add(n * width as u64 * F64_BYTES, Ordering::SeqCst);
        Ok(PullResult {
            vectors,
            versions,
            present,
        })
    }

    /// Reads one key without touching the counters.
    pub fn get(&self, key: RepKey) -> Result<Option<RepEntry>, StoreError> {
        self.check_layer(key.layer)?;
        self.check_node(key.node)?;
        let slot = self.slots[key.layer - 1][key.node].read().expect("store lock poisoned");
        Ok(slot.as_deref().cloned())
    }

    /// Starts a pull on a background thread.
    pub fn prefetch(self: &Arc<Self>, layer: usize, node_ids: Vec<usize>) -> PrefetchHandle {
        let (tx, rx) = mpsc::sync_channel(1);
        let store = Arc::clone(self);
        std::thread::spawn(move || {
            let _ = tx.send(store.pull_batch(layer, &node_ids));
        });
        PrefetchHandle { rx: Some(rx) }
    }

    /// All present entries, ordered by layer then node.
    pub fn entries(&self) -> Vec<(RepKey, RepEntry)> {
        let mut out = Vec::new();
        for (li, layer) in self.slots.iter().enumerate() {
            for (node, slot) in layer.iter().enumerate() {
                if let Some(e) = slot.read().expect("store lock poisoned").as_deref() {
                    out.push((RepKey { node, layer: li + 1 }, e.clone()));
                }
            }
        }
        out
    }

    /// Binary dump: magic, `u32` format version, `u64` entry count, then per
    /// entry `u64` node, `u64` layer, `u64` version, `u64` width and `width`
    /// little-endian `f64` values.
    pub fn write_snapshot(&self, w: &mut impl Write) -> Result<(), StoreError> {
        let entries = self.entries();
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u64).to_le_bytes())?;
        for (key, e) in &entries {
            for v in [key.node as u64, key.layer as u64, e.version, e.vector.len() as u64] {
                w.write_all(&v.to_le_bytes())?;
            }
            for x in &e.vector {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<(), StoreError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_snapshot(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Parses a dump written by [`RepStore::write_snapshot`].
pub fn read_snapshot(r: &mut impl Read) -> Result<Vec<(RepKey, RepEntry)>, StoreError> {
    fn u64_of(r: &mut impl Read) -> Result<u64, StoreError> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|_| StoreError::Snapshot("truncated".into()))?;
        Ok(u64::from_le_bytes(b))
    }
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| StoreError::Snapshot("truncated header".into()))?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(StoreError::Snapshot("bad magic".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)
        .map_err(|_| StoreError::Snapshot("truncated header".into()))?;
    if u32::from_le_bytes(ver) != SNAPSHOT_VERSION {
        return Err(StoreError::Snapshot(format!("unsupported version {}", u32::from_le_bytes(ver))));
    }
    let count = u64_of(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let node = u64_of(r)? as usize;
        let layer = u64_of(r)? as usize;
        let version = u64_of(r)?;
        let width = u64_of(r)? as usize;
        let vector = (0..width)
            .map(|_| u64_of(r).map(f64::from_bits))
            .collect::<Result<Vec<_>, _>>()?;
        out.push((RepKey { node, layer }, RepEntry { vector, version }));
    }
    Ok(out)
}

/// A pending pull. Single use; can be moved between threads.
#[derive(Debug)]
pub struct PrefetchHandle {
    rx: Option<mpsc::Receiver<Result<PullResult, StoreError>>>,
}

impl PrefetchHandle {
    /// Blocks until the pull finishes. A second call returns [`StoreError::HandleConsumed`].
    pub fn wait(&mut self) -> Result<PullResult, StoreError> {
        let rx = self.rx.take().ok_or(StoreError::HandleConsumed)?;
        rx.recv()
            .map_err(|_| StoreError::PrefetchFailed("prefetch thread exited without a result".into()))?
    }
}
