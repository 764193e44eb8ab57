use std::collections::BTreeMap;
use std::time::Instant;

use super::metrics::{EpochRecord, RunMetrics};
use super::{EngineError, Mode, TrainConfig};
use crate::graph::Graph;
use crate::nn::network::{backward, forward_closed};
use crate::nn::{cross_entropy, micro_f1, stacked_norm, Csr, Dense, ForwardTrace, GcnModel, LocalView, NnError, OptimState};
use crate::repstore::CounterSnapshot;

/// The whole graph as a single view with an empty halo.
#[derive(Debug, Clone)]
pub struct FullGraph<'a> {
    g: &'a Graph,
    p: Csr,
    p_out: Csr,
    x_halo: Dense,
}

/// Full-graph loss and F1 scores at one set of weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub train_loss: f64,
    pub train_f1: f64,
    pub val_f1: Option<f64>,
    pub test_f1: Option<f64>,
}

impl<'a> FullGraph<'a> {
    pub fn new(g: &'a Graph, p: Csr) -> Result<Self, EngineError> {
        let n = g.num_nodes();
        if p.rows() != n || p.cols() != n {
            return Err(EngineError::Mismatch(format!(
                "propagation matrix is {}x{}, graph has {n} nodes",
                p.rows(),
                p.cols()
            )));
        }
        Ok(Self {
            g,
            p,
            p_out: Csr::empty(n, 0),
            x_halo: Dense::zeros(0, g.feature_dim()),
        })
    }

    pub fn graph(&self) -> &Graph {
        self.g
    }

    pub fn prop(&self) -> &Csr {
        &self.p
    }

    pub fn view(&self) -> LocalView<'_> {
        LocalView {
            p_in: &self.p,
            p_out: &self.p_out,
            x_in: self.g.features(),
            x_halo: &self.x_halo,
        }
    }

    pub fn forward(&self, model: &GcnModel, normalize_live: bool) -> Result<ForwardTrace, EngineError> {
        Ok(forward_closed(model, self.view(), normalize_live)?)
    }

    /// Train loss and its gradient with respect to every weight.
    pub fn loss_and_gradient(&self, model: &GcnModel, normalize_live: bool) -> Result<(f64, Vec<Dense>), EngineError> {
        let trace = self.forward(model, normalize_live)?;
        let (loss, g_logits) = cross_entropy(&trace.logits, self.g.labels(), &self.g.masks().train)?;
        let grads = backward(model, self.view(), &trace, &g_logits, normalize_live)?;
        Ok((loss, grads.weights))
    }

    pub fn evaluate(&self, model: &GcnModel, normalize_live: bool) -> Result<Evaluation, EngineError> {
        let trace = self.forward(model, normalize_live)?;
        let labels = self.g.labels();
        let masks = self.g.masks();
        let (train_loss, _) = cross_entropy(&trace.logits, labels, &masks.train)?;
        let f1 = |mask: &[bool]| match micro_f1(&trace.logits, labels, mask) {
            Ok(v) => Ok(Some(v)),
            Err(NnError::EmptyMask) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Evaluation {
            train_loss,
            train_f1: micro_f1(&trace.logits, labels, &masks.train)?,
            val_f1: f1(&masks.val)?,
            test_f1: f1(&masks.test)?,
        })
    }
}

/// Micro-F1 of a full-graph forward pass over `mask`.
pub fn evaluate(model: &GcnModel, g: &Graph, p: &Csr, mask: &[bool]) -> Result<f64, EngineError> {
    let full = FullGraph::new(g, p.clone())?;
    let trace = full.forward(model, false)?;
    Ok(micro_f1(&trace.logits, g.labels(), mask)?)
}

pub(crate) fn record_from(epoch: usize, time: f64, eval: &Evaluation, counters: CounterSnapshot) -> EpochRecord {
    EpochRecord {
        epoch,
        worker: None,
        local_epoch: None,
        time,
        train_loss: eval.train_loss,
        local_loss: None,
        train_f1: eval.train_f1,
        val_f1: eval.val_f1,
        test_f1: eval.test_f1,
        grad_norm: None,
        max_staleness: None,
        mean_halo_age: None,
        pulled: false,
        pushed: false,
        counters,
    }
}

pub(crate) fn check_model(g: &Graph, model: &GcnModel) -> Result<(), EngineError> {
    let dims = model.dims();
    if dims[0] != g.feature_dim() || dims[dims.len() - 1] != g.num_classes() {
        return Err(EngineError::Mismatch(format!(
            "model dims {dims:?} do not fit {} features and {} classes",
            g.feature_dim(),
            g.num_classes()
        )));
    }
    Ok(())
}

/// Plain full-batch training on one machine. Each epoch costs `unit_cost`.
pub fn train_full_graph(g: &Graph, p: &Csr, model0: &GcnModel, cfg: &TrainConfig) -> Result<(GcnModel, RunMetrics), EngineError> {
    cfg.validate(1)?;
    check_model(g, model0)?;
    let start = Instant::now();
    let full = FullGraph::new(g, p.clone())?;
    let mut model = model0.clone();
    let mut opt = OptimState::new(cfg.optimizer, cfg.lr, &model);
    let mut records = vec![record_from(0, 0.0, &full.evaluate(&model, cfg.normalize_live)?, CounterSnapshot::default())];
    let mut weight_trace = Vec::new();
    let mut grad_trace = Vec::new();
    for r in 1..=cfg.epochs {
        let (loss, grads) = full.loss_and_gradient(&model, cfg.normalize_live)?;
        if !loss.is_finite() {
            return Err(EngineError::Divergence { epoch: r, loss });
        }
        opt.apply_update(&mut model, &grads)?;
        if !model.weights().iter().all(Dense::is_finite) {
            return Err(EngineError::Divergence { epoch: r, loss: f64::NAN });
        }
        let eval = full.evaluate(&model, cfg.normalize_live)?;
        if !eval.train_loss.is_finite() {
            return Err(EngineError::Divergence {
                epoch: r,
                loss: eval.train_loss,
            });
        }
        let mut rec = record_from(r, r as f64 * cfg.unit_cost, &eval, CounterSnapshot::default());
        rec.local_loss = Some(loss);
        rec.grad_norm = Some(stacked_norm(&grads));
        records.push(rec);
        if cfg.trace_weights {
            weight_trace.push(model.weights().to_vec());
        }
        if cfg.trace_gradients {
            grad_trace.push(grads);
        }
    }
    let metrics = RunMetrics {
        mode: Mode::Sync,
        num_parts: 1,
        records,
        counters: CounterSnapshot::default(),
        probes: Vec::new(),
        weight_trace,
        grad_trace,
        age_histogram: BTreeMap::new(),
        cold_reads: 0,
        ps_updates: cfg.epochs as u64,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, metrics))
}
