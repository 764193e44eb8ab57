use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::delay::{delay_rng, inject_delay};
use super::metrics::AgeTally;
use super::{EngineError, TrainConfig};
use crate::nn::network::{backward, forward};
use crate::nn::{cross_entropy, normalize_rows, Dense, ForwardTrace, GcnModel, OptimState};
use crate::partition::Subgraph;
use crate::repstore::{PrefetchHandle, PullResult, RepStore};

/// The copy of a hidden representation that goes to the store.
pub(crate) fn push_transform(h: &Dense, cfg: &TrainConfig) -> Dense {
    if cfg.normalize_push {
        normalize_rows(h)
    } else {
        h.clone()
    }
}

/// What one local epoch produced.
pub(crate) struct StepOutput {
    /// Gradient at the downloaded weights.
    pub grads: Vec<Dense>,
    pub local_loss: Option<f64>,
    /// Transformed hidden representations to push, on push epochs.
    pub push: Option<Vec<Dense>>,
    pub pulled: bool,
    /// Ages of the halo values used this epoch.
    pub in_use: AgeTally,
    /// Ages of values read from the store this epoch.
    pub read_ages: Vec<u64>,
    pub cold_reads: u64,
    pub trace: ForwardTrace,
    pub delay: f64,
}

/// State private to one worker: its subgraph, local model, optimizer and halo cache.
pub(crate) struct Worker<'a> {
    pub sub: &'a Subgraph,
    pub model: GcnModel,
    pub opt: OptimState,
    /// Per hidden layer `k` (index `k - 1`): cached halo rows and their versions.
    pub halo: Vec<Dense>,
    pub versions: Vec<Vec<u64>>,
    pub present: Vec<Vec<bool>>,
    rng: ChaCha8Rng,
    /// Simulated compute time of one local epoch.
    pub cost: f64,
    train_count: usize,
}

impl<'a> Worker<'a> {
    pub fn new(sub: &'a Subgraph, model0: &GcnModel, cfg: &TrainConfig, total_nodes: usize) -> Self {
        let hidden = model0.hidden_dims();
        Self {
            sub,
            model: model0.clone(),
            opt: OptimState::new(cfg.optimizer, cfg.lr, model0),
            halo: hidden.iter().map(|&d| Dense::zeros(sub.num_halo(), d)).collect(),
            versions: hidden.iter().map(|_| vec![0; sub.num_halo()]).collect(),
            present: hidden.iter().map(|_| vec![false; sub.num_halo()]).collect(),
            rng: delay_rng(cfg.seed, sub.part_id),
            cost: cfg.unit_cost * sub.num_local() as f64 / total_nodes as f64,
            train_count: sub.train_mask.iter().filter(|&&t| t).count(),
        }
    }

    fn store_pull(&mut self, k: usize, res: PullResult, r: u64, read_ages: &mut Vec<u64>, cold: &mut u64) {
        for (&v, &p) in res.versions.iter().zip(&res.present) {
            if p {
                read_ages.push(r.saturating_sub(v));
            } else {
                *cold += 1;
            }
        }
        self.halo[k - 1] = res.vectors;
        self.versions[k - 1] = res.versions;
        self.present[k - 1] = res.present;
    }

    /// Forward pass at `weights` with the cached halo, returning the copies to push.
    pub fn prime(&mut self, weights: &[Dense], cfg: &TrainConfig) -> Result<Vec<Dense>, EngineError> {
        self.model.set_weights(weights)?;
        let halo = &self.halo;
        let trace = forward(&self.model, self.sub.view(), cfg.normalize_live, |k| {
            Ok::<_, EngineError>(halo[k - 1].clone())
        })?;
        Ok(trace.hidden().iter().map(|h| push_transform(h, cfg)).collect())
    }

    /// Blocking pull of every hidden layer into the cache.
    pub fn pull_all(&mut self, store: &RepStore, r: u64) -> Result<(Vec<u64>, u64), EngineError> {
        let mut ages = Vec::new();
        let mut cold = 0;
        for k in 1..self.model.num_layers() {
            let res = store.pull_batch(k, &self.sub.halo_nodes)?;
            self.store_pull(k, res, r, &mut ages, &mut cold);
        }
        Ok((ages, cold))
    }

    /// One local epoch `r` starting from `weights`: pull on pull epochs, forward,
    /// loss, backward, one optimizer step. Pushing is left to the caller.
    ///
    /// `fresh` holds current global hidden representations when the halo
    /// source is [`super::HaloSource::Fresh`].
    pub fn step(
        &mut self,
        r: usize,
        weights: &[Dense],
        store: &Arc<RepStore>,
        cfg: &TrainConfig,
        fresh: Option<&[Dense]>,
    ) -> Result<StepOutput, EngineError> {
        self.model.set_weights(weights)?;
        let layers = self.model.num_layers();
        let pulled = layers > 1 && cfg.is_pull_epoch(r);
        let mut handles: Vec<Option<PrefetchHandle>> = if pulled && cfg.prefetch {
            (1..layers)
                .map(|k| Some(store.prefetch(k, self.sub.halo_nodes.clone())))
                .collect()
        } else {
            Vec::new()
        };
        let mut read_ages = Vec::new();
        let mut cold_reads = 0;
        let model = self.model.clone();
        let sub = self.sub;
        let trace = forward(&model, sub.view(), cfg.normalize_live, |k| {
            if pulled {
                let res = match handles.get_mut(k - 1).and_then(Option::take) {
                    Some(mut h) => h.wait()?,
                    None => store.pull_batch(k, &sub.halo_nodes)?,
                };
                self.store_pull(k, res, r as u64, &mut read_ages, &mut cold_reads);
            }
            Ok::<_, EngineError>(match fresh {
                Some(f) => push_transform(&f[k - 1].select_rows(&sub.halo_nodes), cfg),
                None => self.halo[k - 1].clone(),
            })
        })?;

        let mut in_use = AgeTally::default();
        for (vs, ps) in self.versions.iter().zip(&self.present) {
            for (&v, &p) in vs.iter().zip(ps) {
                if p {
                    in_use.add((r as u64).saturating_sub(v));
                }
            }
        }

        let (local_loss, grads) = if self.train_count == 0 {
            let zeros = model.weights().iter().map(|w| Dense::zeros(w.rows(), w.cols())).collect();
            (None, zeros)
        } else {
            let (loss, g_logits) = cross_entropy(&trace.logits, &sub.labels, &sub.train_mask)?;
            if !loss.is_finite() {
                return Err(EngineError::Divergence { epoch: r, loss });
            }
            let g = backward(&model, sub.view(), &trace, &g_logits, cfg.normalize_live)?;
            (Some(loss), g.weights)
        };
        self.opt.apply_update(&mut self.model, &grads)?;
        if !self.model.weights().iter().all(Dense::is_finite) {
            return Err(EngineError::Divergence {
                epoch: r,
                loss: local_loss.unwrap_or(f64::NAN),
            });
        }

        let push = (layers > 1 && cfg.is_push_epoch(r))
            .then(|| trace.hidden().iter().map(|h| push_transform(h, cfg)).collect());
        let delay = inject_delay(&cfg.stragglers, sub.part_id, &mut self.rng)?;
        Ok(StepOutput {
            grads,
            local_loss,
            push,
            pulled,
            in_use,
            read_ages,
            cold_reads,
            trace,
            delay,
        })
    }

    /// Pushes `reps` (one matrix per hidden layer) at `version`.
    pub fn push(&self, store: &RepStore, reps: &[Dense], version: u64) -> Result<(), EngineError> {
        for (k, h) in reps.iter().enumerate() {
            store.push_batch(self.sub.part_id, k + 1, &self.sub.local_nodes, h, version)?;
        }
        Ok(())
    }
}
