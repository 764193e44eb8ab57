use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::channel;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use super::full::{record_from, FullGraph};
use super::metrics::{EpochRecord, RunMetrics};
use super::server::ParamServer;
use super::sync::{collect, panic_message, Pending};
use super::worker::{StepOutput, Worker};
use super::{owner_table, prepare, AsyncScheduler, ColdStart, EngineError, HaloSource, Mode, TrainConfig};
use crate::graph::Graph;
use crate::nn::{stacked_norm, Dense, GcnModel};
use crate::partition::Subgraph;
use crate::repstore::{CounterSnapshot, RepStore, VersionPolicy};

/// Asynchronous training: each worker runs `R` local epochs against the latest
/// global weights and the server mixes every upload in on arrival.
pub fn train_async(g: &Graph, subs: &[Subgraph], model0: &GcnModel, cfg: &TrainConfig) -> Result<(GcnModel, RunMetrics), EngineError> {
    let full = prepare(g, subs, model0, cfg)?;
    match cfg.scheduler {
        AsyncScheduler::Simulated => run_simulated(g, subs, model0, cfg, &full),
        AsyncScheduler::Threads => run_threads(g, subs, model0, cfg, &full),
    }
}

fn new_store(g: &Graph, subs: &[Subgraph], model0: &GcnModel) -> Arc<RepStore> {
    Arc::new(
        RepStore::new(g.num_nodes(), model0.hidden_dims(), VersionPolicy::Lenient).with_owners(owner_table(subs, g.num_nodes())),
    )
}

fn fresh_hidden(full: &FullGraph<'_>, weights: &[Dense], model0: &GcnModel, cfg: &TrainConfig) -> Result<Option<Vec<Dense>>, EngineError> {
    if cfg.halo_source != HaloSource::Fresh {
        return Ok(None);
    }
    let model = GcnModel::from_weights(weights.to_vec(), model0.activation())?;
    Ok(Some(full.forward(&model, cfg.normalize_live)?.hidden().to_vec()))
}

/// Push version 0 from every worker, then pull once.
fn prime_all(workers: &mut [Worker<'_>], store: &RepStore, weights: &[Dense], cfg: &TrainConfig) -> Result<(BTreeMap<u64, u64>, u64), EngineError> {
    let mut hist = BTreeMap::new();
    let mut cold = 0;
    let reps: Vec<Vec<Dense>> = workers.iter_mut().map(|w| w.prime(weights, cfg)).collect::<Result<_, _>>()?;
    for (w, r) in workers.iter().zip(&reps) {
        w.push(store, r, 0)?;
    }
    for w in workers.iter_mut() {
        let (ages, c) = w.pull_all(store, 0)?;
        for a in ages {
            *hist.entry(a).or_default() += 1;
        }
        cold += c;
    }
    Ok((hist, cold))
}

struct InFlight {
    finish: f64,
    epoch: usize,
    out: StepOutput,
    weights: Vec<Dense>,
}

/// Discrete-event schedule on the simulated clock. A local epoch reads the
/// server and the store when it starts and pushes and uploads when it
/// finishes, `cost + delay` later. Ties go to the lower worker id.
fn run_simulated(
    g: &Graph,
    subs: &[Subgraph],
    model0: &GcnModel,
    cfg: &TrainConfig,
    full: &FullGraph<'_>,
) -> Result<(GcnModel, RunMetrics), EngineError> {
    let start = Instant::now();
    let m_parts = subs.len();
    let store = new_store(g, subs, model0);
    let mut ps = ParamServer::new(model0.weights().to_vec(), m_parts, cfg.alpha_for(m_parts));
    let mut workers: Vec<Worker<'_>> = subs.iter().map(|s| Worker::new(s, model0, cfg, g.num_nodes())).collect();
    let params = model0.num_params() as u64;

    let mut age_histogram = BTreeMap::new();
    let mut cold_reads = 0;
    if cfg.cold_start == ColdStart::FirstPushBlocking && model0.num_layers() > 1 {
        (age_histogram, cold_reads) = prime_all(&mut workers, &store, model0.weights(), cfg)?;
    }

    let launch = |w: &mut Worker<'_>, epoch: usize, at: f64, ps: &ParamServer| -> Result<InFlight, EngineError> {
        let weights = ps.global().to_vec();
        store.counters().record_param_sync(params);
        let fresh = fresh_hidden(full, &weights, model0, cfg)?;
        let out = w.step(epoch, &weights, &store, cfg, fresh.as_deref())?;
        Ok(InFlight {
            finish: at + w.cost + out.delay,
            epoch,
            weights: w.model.weights().to_vec(),
            out,
        })
    };

    let mut inflight: Vec<Option<InFlight>> = Vec::with_capacity(m_parts);
    for w in workers.iter_mut() {
        inflight.push(Some(launch(w, 1, 0.0, &ps)?));
    }

    let mut records = vec![record_from(0, 0.0, &full.evaluate(model0, cfg.normalize_live)?, CounterSnapshot::default())];
    let mut weight_trace = Vec::new();
    let mut grad_trace = Vec::new();
    loop {
        let next = inflight
            .iter()
            .enumerate()
            .filter_map(|(m, f)| f.as_ref().map(|f| (f.finish, m)))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let Some((_, m)) = next else { break };
        let done = inflight[m].take().expect("selected in-flight epoch");
        if let Some(reps) = &done.out.push {
            workers[m].push(&store, reps, done.epoch as u64)?;
        }
        ps.mix(&done.weights)?;
        store.counters().record_param_sync(params);
        if !ps.global().iter().all(Dense::is_finite) {
            return Err(EngineError::Divergence {
                epoch: ps.updates() as usize,
                loss: f64::NAN,
            });
        }
        for &a in &done.out.read_ages {
            *age_histogram.entry(a).or_default() += 1;
        }
        cold_reads += done.out.cold_reads;

        let model = GcnModel::from_weights(ps.global().to_vec(), model0.activation())?;
        let eval = full.evaluate(&model, cfg.normalize_live)?;
        if !eval.train_loss.is_finite() {
            return Err(EngineError::Divergence {
                epoch: ps.updates() as usize,
                loss: eval.train_loss,
            });
        }
        let mut rec = record_from(ps.updates() as usize, done.finish, &eval, store.counters().snapshot());
        rec.worker = Some(m);
        rec.local_epoch = Some(done.epoch);
        rec.local_loss = done.out.local_loss;
        rec.grad_norm = Some(stacked_norm(&done.out.grads));
        rec.max_staleness = done.out.in_use.max;
        rec.mean_halo_age = done.out.in_use.mean();
        rec.pulled = done.out.pulled;
        rec.pushed = done.out.push.is_some();
        records.push(rec);
        if cfg.trace_weights {
            weight_trace.push(ps.global().to_vec());
        }
        if cfg.trace_gradients {
            grad_trace.push(done.out.grads);
        }

        if done.epoch < cfg.epochs {
            inflight[m] = Some(launch(&mut workers[m], done.epoch + 1, done.finish, &ps)?);
        }
    }

    let model = GcnModel::from_weights(ps.global().to_vec(), model0.activation())?;
    let metrics = RunMetrics {
        mode: Mode::Async,
        num_parts: m_parts,
        records,
        counters: store.counters().snapshot(),
        probes: Vec::new(),
        weight_trace,
        grad_trace,
        age_histogram,
        cold_reads,
        ps_updates: ps.updates(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, metrics))
}

struct ThreadExtras {
    age_histogram: BTreeMap<u64, u64>,
    cold_reads: u64,
    weight_trace: Vec<(u64, Vec<Dense>)>,
    grad_trace: Vec<(u64, Vec<Dense>)>,
}

/// Free-running threads. Each worker keeps its own simulated clock; records
/// are ordered by server update.
fn run_threads(
    g: &Graph,
    subs: &[Subgraph],
    model0: &GcnModel,
    cfg: &TrainConfig,
    full: &FullGraph<'_>,
) -> Result<(GcnModel, RunMetrics), EngineError> {
    let start = Instant::now();
    let m_parts = subs.len();
    let store = new_store(g, subs, model0);
    let ps = Mutex::new(ParamServer::new(model0.weights().to_vec(), m_parts, cfg.alpha_for(m_parts)));
    let mut workers: Vec<Worker<'_>> = subs.iter().map(|s| Worker::new(s, model0, cfg, g.num_nodes())).collect();
    let params = model0.num_params() as u64;
    let extras = Mutex::new(ThreadExtras {
        age_histogram: BTreeMap::new(),
        cold_reads: 0,
        weight_trace: Vec::new(),
        grad_trace: Vec::new(),
    });
    if cfg.cold_start == ColdStart::FirstPushBlocking && model0.num_layers() > 1 {
        let (h, c) = prime_all(&mut workers, &store, model0.weights(), cfg)?;
        let mut e = extras.lock().expect("extras lock");
        e.age_histogram = h;
        e.cold_reads = c;
    }
    let abort = AtomicBool::new(false);
    let failure: Mutex<Option<EngineError>> = Mutex::new(None);
    let record0 = record_from(0, 0.0, &full.evaluate(model0, cfg.normalize_live)?, CounterSnapshot::default());

    let (tx, rx) = channel::<Pending>();
    let collected = std::thread::scope(|s| {
        let collector = s.spawn(|| collect(rx, full, model0.activation(), cfg.normalize_live));
        for (m, mut worker) in workers.into_iter().enumerate() {
            let tx = tx.clone();
            let (store, ps, extras, abort, failure) = (&store, &ps, &extras, &abort, &failure);
            s.spawn(move || {
                let mut clock = 0.0;
                let body = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| -> Result<(), EngineError> {
                    for r in 1..=cfg.epochs {
                        if abort.load(Ordering::SeqCst) {
                            return Ok(());
                        }
                        let weights = ps.lock().expect("ps lock").global().to_vec();
                        store.counters().record_param_sync(params);
                        let fresh = fresh_hidden(full, &weights, model0, cfg)?;
                        let out = worker.step(r, &weights, store, cfg, fresh.as_deref())?;
                        if let Some(reps) = &out.push {
                            worker.push(store, reps, r as u64)?;
                        }
                        clock += worker.cost + out.delay;
                        let (update, global, counters) = {
                            let mut ps = ps.lock().expect("ps lock");
                            ps.mix(worker.model.weights())?;
                            store.counters().record_param_sync(params);
                            (ps.updates(), ps.global().to_vec(), store.counters().snapshot())
                        };
                        {
                            let mut e = extras.lock().expect("extras lock");
                            for &a in &out.read_ages {
                                *e.age_histogram.entry(a).or_default() += 1;
                            }
                            e.cold_reads += out.cold_reads;
                            if cfg.trace_weights {
                                e.weight_trace.push((update, global.clone()));
                            }
                            if cfg.trace_gradients {
                                e.grad_trace.push((update, out.grads.clone()));
                            }
                        }
                        let pending = Pending {
                            epoch: update as usize,
                            worker: Some(m),
                            local_epoch: Some(r),
                            time: clock,
                            weights: global,
                            local_loss: out.local_loss,
                            grad_norm: Some(stacked_norm(&out.grads)),
                            in_use: out.in_use,
                            pulled: out.pulled,
                            pushed: out.push.is_some(),
                            counters,
                        };
                        if tx.send(pending).is_err() {
                            return Err(EngineError::Mismatch("metrics collector stopped early".into()));
                        }
                    }
                    Ok(())
                }));
                let err = match body {
                    Ok(Ok(())) => return,
                    Ok(Err(e)) => e,
                    Err(p) => EngineError::WorkerPanic(panic_message(p.as_ref())),
                };
                failure.lock().expect("failure lock").get_or_insert(err);
                abort.store(true, Ordering::SeqCst);
            });
        }
        drop(tx);
        collector.join()
    });
    if let Some(err) = failure.into_inner().expect("failure lock") {
        return Err(err);
    }
    let mut tail: Vec<EpochRecord> = collected.map_err(|p| EngineError::WorkerPanic(panic_message(p.as_ref())))??;
    tail.sort_by_key(|r| r.epoch);
    let mut records = vec![record0];
    records.extend(tail);

    let ps = ps.into_inner().expect("ps lock");
    let mut extras = extras.into_inner().expect("extras lock");
    extras.weight_trace.sort_by_key(|(u, _)| *u);
    extras.grad_trace.sort_by_key(|(u, _)| *u);
    let model = GcnModel::from_weights(ps.global().to_vec(), model0.activation())?;
    let metrics = RunMetrics {
        mode: Mode::Async,
        num_parts: m_parts,
        records,
        counters: store.counters().snapshot(),
        probes: Vec::new(),
        weight_trace: extras.weight_trace.into_iter().map(|(_, w)| w).collect(),
        grad_trace: extras.grad_trace.into_iter().map(|(_, g)| g).collect(),
        age_histogram: extras.age_histogram,
        cold_reads: extras.cold_reads,
        ps_updates: ps.updates(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, metrics))
}
