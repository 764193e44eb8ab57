use digest_core::engine::{
    train_async, train_full_graph, train_sync, AggWeighting, AsyncScheduler, ColdStart, EngineError, FullGraph, HaloSource,
    Mode, StragglerSpec, TrainConfig,
};
use digest_core::graph::{build_prop_matrix, generate_sbm, karate_club, Graph, Masks};
use digest_core::nn::layer::layer_forward;
use digest_core::nn::{stacked_distance, Activation, Dense, GcnModel, OptimizerKind};
use digest_core::partition::{build_subgraphs, partition_graph, Partition, PartitionMethod, Subgraph};

fn sbm(seed: u64) -> Graph {
    generate_sbm(3, 10, 0.4, 0.05, seed, 4).unwrap()
}

fn split(g: &Graph, parts: usize, seed: u64) -> Vec<Subgraph> {
    let p = build_prop_matrix(g);
    let part = partition_graph(g, parts, PartitionMethod::Random, seed).unwrap();
    build_subgraphs(g, &p, &part).unwrap()
}

fn model(g: &Graph, hidden: &[usize], act: Activation, seed: u64) -> GcnModel {
    let mut dims = vec![g.feature_dim()];
    dims.extend_from_slice(hidden);
    dims.push(g.num_classes());
    GcnModel::new(&dims, act, seed).unwrap()
}

#[test]
fn single_part_sync_matches_full_graph_oracle() {
    let g = sbm(1);
    let subs = split(&g, 1, 0);
    let m0 = model(&g, &[6], Activation::Relu, 3);
    let cfg = TrainConfig {
        epochs: 15,
        sync_interval: 1,
        trace_gradients: true,
        trace_weights: true,
        ..TrainConfig::default()
    };
    let (_, sync) = train_sync(&g, &subs, &m0, &cfg).unwrap();
    let (_, oracle) = train_full_graph(&g, &build_prop_matrix(&g), &m0, &cfg).unwrap();
    for (a, b) in sync.grad_trace.iter().zip(&oracle.grad_trace) {
        for (x, y) in a.iter().zip(b) {
            for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }
    assert_eq!(sync.records.len(), oracle.records.len());
    for (a, b) in sync.records.iter().zip(&oracle.records) {
        assert!((a.train_loss - b.train_loss).abs() <= 1e-12);
    }
}

#[test]
fn pulled_halo_is_the_previous_push() {
    // path 0-1-2-3 split {0,1} {2,3}
    let x = Dense::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0], vec![-1.0, 2.0]]).unwrap();
    let g = Graph::new(4, &[(0, 1), (1, 2), (2, 3)], x, vec![0, 0, 1, 1], Masks::all(4)).unwrap();
    let p = build_prop_matrix(&g);
    let part = Partition::new(vec![0, 0, 1, 1], 2).unwrap();
    let subs = build_subgraphs(&g, &p, &part).unwrap();
    let m0 = model(&g, &[3], Activation::Identity, 5);
    let cfg = TrainConfig {
        epochs: 4,
        sync_interval: 1,
        lr: 0.0,
        optimizer: OptimizerKind::Sgd,
        normalize_push: false,
        probe_epochs: (1..=4).collect(),
        ..TrainConfig::default()
    };
    let (_, metrics) = train_sync(&g, &subs, &m0, &cfg).unwrap();
    let full = FullGraph::new(&g, p.clone()).unwrap();
    let oracle_h1 = full.forward(&m0, false).unwrap().hidden()[0].clone();
    // the owner's own layer-1 computation, in the order it runs it
    let owner_h1: Vec<Dense> = subs
        .iter()
        .map(|s| layer_forward(&s.p_in, &s.p_out, &s.x_in, &s.x_halo, &m0.weights()[0], Activation::Identity).unwrap().0)
        .collect();
    for probe in &metrics.probes {
        for pp in &probe.parts {
            let stale = &pp.stale[0];
            for (i, &h) in pp.halo_nodes.iter().enumerate() {
                if probe.epoch == 1 {
                    assert!(stale.row(i).iter().all(|&v| v == 0.0));
                    continue;
                }
                let owner = part.part_of(h);
                let li = subs[owner].local_nodes.iter().position(|&v| v == h).unwrap();
                for (a, b) in stale.row(i).iter().zip(owner_h1[owner].row(li)) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
                for (a, b) in stale.row(i).iter().zip(oracle_h1.row(h)) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }
}

#[test]
fn schedule_counts() {
    let g = sbm(2);
    let subs = split(&g, 4, 1);
    let m0 = model(&g, &[4, 4], Activation::Relu, 0);
    let r = 40;
    for n in [1, 5, 10, 20] {
        let cfg = TrainConfig {
            epochs: r,
            sync_interval: n,
            ..TrainConfig::default()
        };
        let (_, metrics) = train_sync(&g, &subs, &m0, &cfg).unwrap();
        let c = metrics.counters;
        assert_eq!(c.pull_ops as usize, (r / n) * 2 * 4, "N={n}");
        assert_eq!(c.push_ops as usize, ((r - 1) / n + 1) * 2 * 4, "N={n}");
        for rec in &metrics.records[1..] {
            assert_eq!(rec.pulled, rec.epoch % n == 0);
            assert_eq!(rec.pushed, (rec.epoch - 1) % n == 0);
        }
    }
}

#[test]
fn sync_is_deterministic() {
    let g = sbm(3);
    let subs = split(&g, 3, 2);
    let m0 = model(&g, &[5], Activation::Relu, 1);
    let cfg = TrainConfig {
        epochs: 12,
        sync_interval: 2,
        trace_weights: true,
        ..TrainConfig::default()
    };
    let (a, ma) = train_sync(&g, &subs, &m0, &cfg).unwrap();
    let (b, mb) = train_sync(&g, &subs, &m0, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ma.weight_trace, mb.weight_trace);
    assert_eq!(ma.records, mb.records);
}

#[test]
fn staleness_is_bounded() {
    let g = sbm(4);
    let subs = split(&g, 3, 0);
    let m0 = model(&g, &[4], Activation::Relu, 2);
    for n in [1, 2, 3, 5] {
        let cfg = TrainConfig {
            epochs: 30,
            sync_interval: n,
            ..TrainConfig::default()
        };
        let (_, metrics) = train_sync(&g, &subs, &m0, &cfg).unwrap();
        let worst = metrics.max_staleness().unwrap();
        assert!((worst as usize) < 2 * n, "N={n} age {worst}");
        let expected = if n == 1 { 1 } else { 2 * n - 2 };
        assert_eq!(worst as usize, expected, "N={n}");
        // epochs before the first pull see only cold values
        for rec in &metrics.records[1..n] {
            assert_eq!(rec.max_staleness, None);
        }
    }
}

#[test]
fn first_push_blocking_primes_the_halo() {
    let g = sbm(5);
    let subs = split(&g, 2, 0);
    let m0 = model(&g, &[4, 3], Activation::Relu, 2);
    let base = TrainConfig {
        epochs: 6,
        sync_interval: 3,
        ..TrainConfig::default()
    };
    let primed = TrainConfig {
        cold_start: ColdStart::FirstPushBlocking,
        ..base.clone()
    };
    let (_, cold) = train_sync(&g, &subs, &m0, &base).unwrap();
    let (_, warm) = train_sync(&g, &subs, &m0, &primed).unwrap();
    // one extra push and pull per hidden layer per worker
    assert_eq!(warm.counters.push_ops, cold.counters.push_ops + 4);
    assert_eq!(warm.counters.pull_ops, cold.counters.pull_ops + 4);
    assert_eq!(cold.records[1].max_staleness, None);
    assert_eq!(warm.records[1].max_staleness, Some(1));
    assert_eq!(warm.cold_reads, 0);
}

#[test]
fn async_single_worker_equals_sync() {
    let g = sbm(6);
    let subs = split(&g, 1, 0);
    let m0 = model(&g, &[5], Activation::Relu, 4);
    let cfg = TrainConfig {
        epochs: 10,
        sync_interval: 1,
        trace_weights: true,
        ..TrainConfig::default()
    };
    let (_, s) = train_sync(&g, &subs, &m0, &cfg).unwrap();
    let (_, a) = train_async(&g, &subs, &m0, &TrainConfig { mode: Mode::Async, ..cfg }).unwrap();
    assert_eq!(s.weight_trace, a.weight_trace);
    let sl: Vec<f64> = s.records.iter().map(|r| r.train_loss).collect();
    let al: Vec<f64> = a.records.iter().map(|r| r.train_loss).collect();
    assert_eq!(sl, al);
}

#[test]
fn async_update_count_and_time_order() {
    let g = sbm(7);
    let subs = split(&g, 3, 0);
    let m0 = model(&g, &[4], Activation::Relu, 0);
    for scheduler in [AsyncScheduler::Simulated, AsyncScheduler::Threads] {
        let cfg = TrainConfig {
            epochs: 9,
            sync_interval: 2,
            mode: Mode::Async,
            scheduler,
            ..TrainConfig::default()
        };
        let (_, m) = train_async(&g, &subs, &m0, &cfg).unwrap();
        assert_eq!(m.ps_updates, 27);
        assert_eq!(m.records.len(), 28);
        let pulls_per_worker = 9 / 2;
        assert_eq!(m.counters.pull_ops as usize, pulls_per_worker * 3);
        if scheduler == AsyncScheduler::Simulated {
            assert!(m.records.windows(2).all(|w| w[0].time <= w[1].time));
        }
    }
}

#[test]
fn straggler_slows_only_itself_in_async() {
    let g = generate_sbm(4, 8, 0.4, 0.05, 3, 4).unwrap();
    let part = Partition::new((0..32).map(|v| v / 8).collect(), 4).unwrap();
    let subs = build_subgraphs(&g, &build_prop_matrix(&g), &part).unwrap();
    let m0 = model(&g, &[4], Activation::Relu, 0);
    let r = 20;
    let cfg = TrainConfig {
        epochs: r,
        sync_interval: 5,
        mode: Mode::Async,
        stragglers: StragglerSpec {
            parts: vec![2],
            low: 2.0,
            high: 2.0,
        },
        ..TrainConfig::default()
    };
    let (_, m) = train_async(&g, &subs, &m0, &cfg).unwrap();
    assert_eq!(m.ps_updates, 4 * r as u64);
    let finish = |w: usize| m.records.iter().filter(|x| x.worker == Some(w)).map(|x| x.time).fold(0.0, f64::max);
    let epoch_time = 0.25;
    let fast = finish(0);
    assert!((fast - r as f64 * epoch_time).abs() < 1e-9);
    let slow = finish(2);
    let expect = fast * (1.0 + 2.0 / epoch_time);
    assert!((slow - expect).abs() < 1e-9, "{slow} vs {expect}");

    let (_, s) = train_sync(&g, &subs, &m0, &TrainConfig { mode: Mode::Sync, ..cfg }).unwrap();
    assert!((s.last().unwrap().time - expect).abs() < 1e-9);
}

#[test]
fn training_reduces_loss_and_gradient_energy() {
    let g = generate_sbm(3, 20, 0.3, 0.02, 9, 3).unwrap();
    let subs = split(&g, 3, 1);
    let m0 = model(&g, &[8], Activation::Relu, 7);
    for mode in [Mode::Sync, Mode::Async] {
        let cfg = TrainConfig {
            epochs: 80,
            sync_interval: 5,
            mode,
            ..TrainConfig::default()
        };
        let (_, m) = digest_core::engine::train(&g, &subs, &m0, &cfg).unwrap();
        let recs = &m.records;
        assert!(recs.last().unwrap().train_loss < recs[1].train_loss);
        let sq: Vec<f64> = recs[1..].iter().map(|r| r.grad_norm.unwrap().powi(2)).collect();
        let running = |t: usize| sq[..t].iter().sum::<f64>() / t as f64;
        let t = sq.len() / 2;
        assert!(running(2 * t) < running(t), "{mode:?}");
    }
}

#[test]
fn fresh_halo_hook_removes_staleness() {
    let g = sbm(8);
    let subs = split(&g, 3, 0);
    let m0 = model(&g, &[4], Activation::Identity, 1);
    let cfg = TrainConfig {
        epochs: 6,
        sync_interval: 1,
        halo_source: HaloSource::Fresh,
        probe_epochs: (1..=6).collect(),
        ..TrainConfig::default()
    };
    let (_, m) = train_sync(&g, &subs, &m0, &cfg).unwrap();
    for p in &m.probes {
        for pp in &p.parts {
            assert_eq!(pp.stale, pp.fresh);
        }
        assert!(stacked_distance(&p.grad_stale, &p.grad_fresh) < 1e-12);
    }
}

#[test]
fn divergence_is_reported() {
    let g = karate_club();
    let subs = split(&g, 2, 0);
    let m0 = model(&g, &[4], Activation::Identity, 0);
    let cfg = TrainConfig {
        epochs: 50,
        lr: 1e200,
        optimizer: OptimizerKind::Sgd,
        ..TrainConfig::default()
    };
    let err = train_sync(&g, &subs, &m0, &cfg).unwrap_err();
    assert!(matches!(err, EngineError::Divergence { .. }), "{err}");
}

#[test]
fn invalid_inputs_are_rejected() {
    let g = karate_club();
    let subs = split(&g, 2, 0);
    let m0 = model(&g, &[4], Activation::Relu, 0);
    let bad = TrainConfig {
        sync_interval: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(train_sync(&g, &subs, &m0, &bad), Err(EngineError::Config(_))));
    assert!(matches!(train_sync(&g, &subs[..1], &m0, &TrainConfig::default()), Err(EngineError::Mismatch(_))));
    let wrong = GcnModel::new(&[3, 2], Activation::Relu, 0).unwrap();
    assert!(train_sync(&g, &subs, &wrong, &TrainConfig::default()).is_err());
}

#[test]
fn node_weighted_aggregation_runs() {
    let g = sbm(9);
    let part = Partition::new((0..30).map(|v| usize::from(v >= 20)).collect(), 2).unwrap();
    let subs = build_subgraphs(&g, &build_prop_matrix(&g), &part).unwrap();
    let m0 = model(&g, &[4], Activation::Relu, 0);
    let cfg = TrainConfig {
        epochs: 5,
        aggregation: AggWeighting::NodeCount,
        lr: 0.0,
        optimizer: OptimizerKind::Sgd,
        ..TrainConfig::default()
    };
    let (m, _) = train_sync(&g, &subs, &m0, &cfg).unwrap();
    // η = 0 keeps every local copy equal, and the weights sum to one
    assert!(stacked_distance(m.weights(), m0.weights()) < 1e-15);
}
