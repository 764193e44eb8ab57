use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Barrier, Mutex, RwLock};
use std::time::Instant;

use super::fresh::{build_probe, part_coefficients};
use super::full::{record_from, FullGraph};
use super::metrics::{AgeTally, EpochRecord, ProbeRecord, RunMetrics};
use super::server::ParamServer;
use super::worker::{StepOutput, Worker};
use super::{prepare, ColdStart, EngineError, HaloSource, Mode, TrainConfig};
use crate::graph::Graph;
use crate::nn::{stacked_norm, Dense, ForwardTrace, GcnModel};
use crate::partition::Subgraph;
use crate::repstore::{CounterSnapshot, RepStore, VersionPolicy};

/// What a worker hands the round leader besides its weights.
struct Upload {
    local_loss: Option<f64>,
    grads: Vec<Dense>,
    in_use: AgeTally,
    read_ages: Vec<u64>,
    cold_reads: u64,
    pulled: bool,
    pushed: bool,
    busy: f64,
    trace: Option<ForwardTrace>,
}

/// A finished round, sent to the metrics collector.
pub(crate) struct Pending {
    pub epoch: usize,
    pub worker: Option<usize>,
    pub local_epoch: Option<usize>,
    pub time: f64,
    pub weights: Vec<Dense>,
    pub local_loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub in_use: AgeTally,
    pub pulled: bool,
    pub pushed: bool,
    pub counters: CounterSnapshot,
}

#[derive(Default)]
struct Extras {
    probes: Vec<ProbeRecord>,
    weight_trace: Vec<Vec<Dense>>,
    grad_trace: Vec<Vec<Dense>>,
    age_histogram: BTreeMap<u64, u64>,
    cold_reads: u64,
}

impl Extras {
    fn tally_reads(&mut self, ages: &[u64], cold: u64) {
        for &a in ages {
            *self.age_histogram.entry(a).or_default() += 1;
        }
        self.cold_reads += cold;
    }
}

struct Shared<'a> {
    cfg: &'a TrainConfig,
    subs: &'a [Subgraph],
    model0: &'a GcnModel,
    full: &'a FullGraph<'a>,
    store: Arc<RepStore>,
    ps: Mutex<ParamServer>,
    barrier: Barrier,
    abort: AtomicBool,
    /// Epoch of the first failure; workers stop after that epoch's last barrier.
    failed_epoch: AtomicUsize,
    failure: Mutex<Option<EngineError>>,
    slots: Mutex<Vec<Option<Upload>>>,
    fresh: RwLock<Option<Vec<Dense>>>,
    clock: Mutex<f64>,
    coef: Vec<f64>,
    extras: Mutex<Extras>,
}

impl Shared<'_> {
    /// Runs `f` unless the run is already aborting; errors and panics abort it.
    fn guarded<T>(&self, epoch: usize, f: impl FnOnce() -> Result<T, EngineError>) -> Option<T> {
        if self.abort.load(Ordering::SeqCst) {
            return None;
        }
        let err = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(v)) => return Some(v),
            Ok(Err(e)) => e,
            Err(payload) => EngineError::WorkerPanic(panic_message(payload.as_ref())),
        };
        let mut slot = self.failure.lock().expect("failure lock");
        if slot.is_none() {
            *slot = Some(err);
        }
        self.failed_epoch.fetch_min(epoch, Ordering::SeqCst);
        self.abort.store(true, Ordering::SeqCst);
        None
    }

    fn param_values(&self) -> u64 {
        self.model0.num_params() as u64
    }

    fn current_fresh(&self) -> Option<Vec<Dense>> {
        self.fresh.read().expect("fresh lock").clone()
    }

    fn set_fresh(&self, weights: &[Dense]) -> Result<(), EngineError> {
        if self.cfg.halo_source == HaloSource::Fresh {
            let model = GcnModel::from_weights(weights.to_vec(), self.model0.activation())?;
            let trace = self.full.forward(&model, self.cfg.normalize_live)?;
            *self.fresh.write().expect("fresh lock") = Some(trace.hidden().to_vec());
        }
        Ok(())
    }
}

pub(crate) fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".into()
    }
}

/// Turns finished rounds into records, evaluating the full graph off the worker threads.
pub(crate) fn collect(
    rx: Receiver<Pending>,
    full: &FullGraph<'_>,
    activation: crate::nn::Activation,
    normalize_live: bool,
) -> Result<Vec<EpochRecord>, EngineError> {
    let mut out = Vec::new();
    for p in rx {
        let model = GcnModel::from_weights(p.weights, activation)?;
        let eval = full.evaluate(&model, normalize_live)?;
        if !eval.train_loss.is_finite() {
            return Err(EngineError::Divergence {
                epoch: p.epoch,
                loss: eval.train_loss,
            });
        }
        let mut rec = record_from(p.epoch, p.time, &eval, p.counters);
        rec.worker = p.worker;
        rec.local_epoch = p.local_epoch;
        rec.local_loss = p.local_loss;
        rec.grad_norm = p.grad_norm;
        rec.max_staleness = p.in_use.max;
        rec.mean_halo_age = p.in_use.mean();
        rec.pulled = p.pulled;
        rec.pushed = p.pushed;
        out.push(rec);
    }
    Ok(out)
}

/// Synchronous training: one thread per part, three barriers per epoch.
///
/// Within epoch `r` every worker downloads the global weights and runs its
/// local step (pulling first on pull epochs). After the first barrier the
/// workers push and upload; after the second one worker closes the round;
/// the third releases everyone into the next epoch. Pulls therefore never see
/// pushes from their own epoch.
pub fn train_sync(g: &Graph, subs: &[Subgraph], model0: &GcnModel, cfg: &TrainConfig) -> Result<(GcnModel, RunMetrics), EngineError> {
    let full = prepare(g, subs, model0, cfg)?;
    let start = Instant::now();
    let m_parts = subs.len();
    let owners = super::owner_table(subs, g.num_nodes());
    let shared = Shared {
        cfg,
        subs,
        model0,
        full: &full,
        store: Arc::new(RepStore::new(g.num_nodes(), model0.hidden_dims(), VersionPolicy::Strict).with_owners(owners)),
        ps: Mutex::new(ParamServer::new(model0.weights().to_vec(), m_parts, cfg.alpha_for(m_parts))),
        barrier: Barrier::new(m_parts),
        abort: AtomicBool::new(false),
        failed_epoch: AtomicUsize::new(usize::MAX),
        failure: Mutex::new(None),
        slots: Mutex::new((0..m_parts).map(|_| None).collect()),
        fresh: RwLock::new(None),
        clock: Mutex::new(0.0),
        coef: part_coefficients(subs, cfg.aggregation),
        extras: Mutex::new(Extras::default()),
    };
    shared.set_fresh(model0.weights())?;
    let record0 = record_from(0, 0.0, &full.evaluate(model0, cfg.normalize_live)?, CounterSnapshot::default());

    let (tx, rx) = channel::<Pending>();
    let collected = std::thread::scope(|s| {
        let collector = s.spawn(|| collect(rx, &full, model0.activation(), cfg.normalize_live));
        for m in 0..m_parts {
            let tx = tx.clone();
            let shared = &shared;
            s.spawn(move || run_worker(shared, m, tx));
        }
        drop(tx);
        collector.join()
    });
    if let Some(err) = shared.failure.lock().expect("failure lock").take() {
        return Err(err);
    }
    let mut records = vec![record0];
    records.extend(collected.map_err(|p| EngineError::WorkerPanic(panic_message(p.as_ref())))??);

    let ps = shared.ps.into_inner().expect("ps lock");
    let extras = shared.extras.into_inner().expect("extras lock");
    let model = GcnModel::from_weights(ps.global().to_vec(), model0.activation())?;
    let metrics = RunMetrics {
        mode: Mode::Sync,
        num_parts: m_parts,
        records,
        counters: shared.store.counters().snapshot(),
        probes: extras.probes,
        weight_trace: extras.weight_trace,
        grad_trace: extras.grad_trace,
        age_histogram: extras.age_histogram,
        cold_reads: extras.cold_reads,
        ps_updates: ps.updates(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, metrics))
}

fn run_worker(sh: &Shared<'_>, m: usize, tx: Sender<Pending>) {
    let cfg = sh.cfg;
    let mut worker = Worker::new(&sh.subs[m], sh.model0, cfg, sh.store.num_nodes());
    let layers = sh.model0.num_layers();

    if cfg.cold_start == ColdStart::FirstPushBlocking && layers > 1 {
        let reps = sh.guarded(0, || {
            let w = sh.ps.lock().expect("ps lock").global().to_vec();
            worker.prime(&w, cfg)
        });
        sh.barrier.wait();
        if let Some(reps) = reps {
            sh.guarded(0, || worker.push(&sh.store, &reps, 0));
        }
        sh.barrier.wait();
        sh.guarded(0, || {
            let (ages, cold) = worker.pull_all(&sh.store, 0)?;
            sh.extras.lock().expect("extras lock").tally_reads(&ages, cold);
            Ok(())
        });
        sh.barrier.wait();
    }

    for r in 1..=cfg.epochs {
        let out: Option<StepOutput> = sh.guarded(r, || {
            let w = sh.ps.lock().expect("ps lock").global().to_vec();
            sh.store.counters().record_param_sync(sh.param_values());
            let fresh = sh.current_fresh();
            worker.step(r, &w, &sh.store, cfg, fresh.as_deref())
        });
        sh.barrier.wait();
        if let Some(out) = out {
            sh.guarded(r, || {
                if let Some(reps) = &out.push {
                    worker.push(&sh.store, reps, r as u64)?;
                }
                sh.ps.lock().expect("ps lock").submit(m, worker.model.weights().to_vec())?;
                sh.store.counters().record_param_sync(sh.param_values());
                let upload = Upload {
                    local_loss: out.local_loss,
                    grads: out.grads,
                    in_use: out.in_use,
                    read_ages: out.read_ages,
                    cold_reads: out.cold_reads,
                    pulled: out.pulled,
                    pushed: out.push.is_some(),
                    busy: worker.cost + out.delay,
                    trace: cfg.probe_epochs.contains(&r).then_some(out.trace),
                };
                sh.slots.lock().expect("slots lock")[m] = Some(upload);
                Ok(())
            });
        }
        if sh.barrier.wait().is_leader() {
            sh.guarded(r, || close_round(sh, r, &tx));
        }
        sh.barrier.wait();
        if sh.failed_epoch.load(Ordering::SeqCst) <= r {
            break;
        }
    }
}

fn close_round(sh: &Shared<'_>, r: usize, tx: &Sender<Pending>) -> Result<(), EngineError> {
    let cfg = sh.cfg;
    let uploads: Vec<Upload> = sh
        .slots
        .lock()
        .expect("slots lock")
        .iter_mut()
        .enumerate()
        .map(|(m, s)| s.take().ok_or_else(|| EngineError::Mismatch(format!("worker {m} missing from round {r}"))))
        .collect::<Result<_, _>>()?;

    let (w_before, w_after) = {
        let mut ps = sh.ps.lock().expect("ps lock");
        let before = ps.global().to_vec();
        ps.finish_round(&sh.coef)?;
        (before, ps.global().to_vec())
    };
    if !w_after.iter().all(Dense::is_finite) {
        return Err(EngineError::Divergence { epoch: r, loss: f64::NAN });
    }

    let mut agg: Vec<Dense> = w_before.iter().map(|w| Dense::zeros(w.rows(), w.cols())).collect();
    for (u, &c) in uploads.iter().zip(&sh.coef) {
        for (a, gw) in agg.iter_mut().zip(&u.grads) {
            a.axpy(c, gw)?;
        }
    }
    let time = {
        let mut clock = sh.clock.lock().expect("clock lock");
        *clock += uploads.iter().map(|u| u.busy).fold(0.0, f64::max);
        *clock
    };
    let mut in_use = AgeTally::default();
    let mut extras = sh.extras.lock().expect("extras lock");
    for u in &uploads {
        in_use.merge(&u.in_use);
        extras.tally_reads(&u.read_ages, u.cold_reads);
    }
    let losses: Vec<f64> = uploads.iter().filter_map(|u| u.local_loss).collect();
    let local_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);

    if cfg.probe_epochs.contains(&r) {
        let model = GcnModel::from_weights(w_before, sh.model0.activation())?;
        let traces: Vec<&ForwardTrace> = uploads
            .iter()
            .map(|u| u.trace.as_ref().expect("probe epochs keep traces"))
            .collect();
        let grads: Vec<Vec<Dense>> = uploads.iter().map(|u| u.grads.clone()).collect();
        extras
            .probes
            .push(build_probe(sh.full, sh.subs, &model, cfg, r, &traces, &grads, agg.clone())?);
    }
    sh.set_fresh(&w_after)?;
    if cfg.trace_weights {
        extras.weight_trace.push(w_after.clone());
    }
    let grad_norm = stacked_norm(&agg);
    if cfg.trace_gradients {
        extras.grad_trace.push(agg);
    }
    drop(extras);

    let pending = Pending {
        epoch: r,
        worker: None,
        local_epoch: None,
        time,
        weights: w_after,
        local_loss,
        grad_norm: Some(grad_norm),
        in_use,
        pulled: uploads.iter().any(|u| u.pulled),
        pushed: uploads.iter().any(|u| u.pushed),
        counters: sh.store.counters().snapshot(),
    };
    tx.send(pending)
        .map_err(|_| EngineError::Mismatch("metrics collector stopped early".into()))
}
