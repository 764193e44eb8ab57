use std::sync::Arc;

use digest_core::nn::Dense;
use digest_core::repstore::{RepKey, RepStore, StoreError, VersionPolicy};

const WIDTH: usize = 6;

/// A row whose contents are a function of `(node, version)` plus a checksum.
fn row(node: usize, version: u64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..WIDTH - 1).map(|j| (node * 1000 + j) as f64 + version as f64 * 0.5).collect();
    v.push(v.iter().sum());
    v
}

fn check_row(node: usize, version: u64, got: &[f64]) {
    let sum: f64 = got[..WIDTH - 1].iter().sum();
    assert_eq!(sum.to_bits(), got[WIDTH - 1].to_bits(), "torn row at node {node}");
    if version > 0 {
        assert_eq!(got, row(node, version).as_slice(), "row does not match its version");
    } else {
        assert!(got.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn concurrent_pushes_and_pulls_are_never_torn() {
    let parts = 4;
    let nodes_per_part = 16;
    let n = parts * nodes_per_part;
    let rounds = 150u64;
    let owners: Vec<usize> = (0..n).map(|v| v % parts).collect();
    let store = Arc::new(RepStore::new(n, &[WIDTH, WIDTH], VersionPolicy::Strict).with_owners(owners.clone()));

    std::thread::scope(|s| {
        for p in 0..parts {
            let store = &store;
            let owned: Vec<usize> = (0..n).filter(|&v| owners[v] == p).collect();
            s.spawn(move || {
                for version in 1..=rounds {
                    let rows: Vec<Vec<f64>> = owned.iter().map(|&v| row(v, version)).collect();
                    let m = Dense::from_rows(&rows).unwrap();
                    for layer in 1..=2 {
                        store.push_batch(p, layer, &owned, &m, version).unwrap();
                    }
                }
            });
        }
        for reader in 0..4 {
            let store = &store;
            s.spawn(move || {
                let ids: Vec<usize> = (0..n).filter(|v| v % 3 == reader % 3).collect();
                let mut last = vec![0u64; n];
                for i in 0..300 {
                    let layer = 1 + i % 2;
                    let res = store.pull_batch(layer, &ids).unwrap();
                    for (k, &v) in ids.iter().enumerate() {
                        check_row(v, res.versions[k], res.vectors.row(k));
                        assert_eq!(res.present[k], res.versions[k] > 0);
                        if layer == 1 {
                            assert!(res.versions[k] >= last[v], "version went backwards");
                            last[v] = res.versions[k];
                        }
                    }
                }
            });
        }
    });

    for v in 0..n {
        for layer in 1..=2 {
            let e = store.get(RepKey { node: v, layer }).unwrap().unwrap();
            assert_eq!(e.version, rounds);
            check_row(v, rounds, &e.vector);
        }
    }
    let c = store.counters().snapshot();
    assert_eq!(c.push_ops, parts as u64 * rounds * 2);
    assert_eq!(c.pushed_values, n as u64 * rounds * 2);
    assert_eq!(c.pushed_bytes, c.pushed_values * WIDTH as u64 * 8);
    assert_eq!(c.pull_ops, 4 * 300);
}

#[test]
fn prefetch_sees_at_least_what_was_visible_at_issue() {
    let n = 8;
    let store = Arc::new(RepStore::new(n, &[WIDTH], VersionPolicy::Strict));
    let ids: Vec<usize> = (0..n).collect();
    std::thread::scope(|s| {
        let writer = &store;
        s.spawn(move || {
            for version in 1..=400u64 {
                let rows: Vec<Vec<f64>> = (0..n).map(|v| row(v, version)).collect();
                writer.push_batch(0, 1, &(0..n).collect::<Vec<_>>(), &Dense::from_rows(&rows).unwrap(), version).unwrap();
            }
        });
        for _ in 0..200 {
            let seen: Vec<u64> = ids
                .iter()
                .map(|&v| store.get(RepKey { node: v, layer: 1 }).unwrap().map_or(0, |e| e.version))
                .collect();
            let mut handle = store.prefetch(1, ids.clone());
            let res = handle.wait().unwrap();
            for (k, &v) in ids.iter().enumerate() {
                assert!(res.versions[k] >= seen[k]);
                check_row(v, res.versions[k], res.vectors.row(k));
            }
            assert!(matches!(handle.wait(), Err(StoreError::HandleConsumed)));
        }
    });
}

#[test]
fn strict_store_rejects_a_stale_writer_without_partial_writes() {
    let store = RepStore::new(4, &[WIDTH], VersionPolicy::Strict);
    let fresh = Dense::from_rows(&[row(0, 5), row(1, 5)]).unwrap();
    store.push_batch(0, 1, &[0, 1], &fresh, 5).unwrap();
    let mixed = Dense::from_rows(&[row(2, 3), row(1, 3)]).unwrap();
    let err = store.push_batch(0, 1, &[2, 1], &mixed, 3).unwrap_err();
    assert!(matches!(err, StoreError::VersionRegression { node: 1, stored: 5, pushed: 3, .. }));
    assert!(store.get(RepKey { node: 2, layer: 1 }).unwrap().is_none());
}

#[test]
fn lenient_store_keeps_the_newest_value() {
    let store = RepStore::new(2, &[WIDTH], VersionPolicy::Lenient);
    store.push_batch(0, 1, &[0], &Dense::from_rows(&[row(0, 7)]).unwrap(), 7).unwrap();
    let dropped = store.push_batch(0, 1, &[0, 1], &Dense::from_rows(&[row(0, 4), row(1, 4)]).unwrap(), 4).unwrap();
    assert_eq!(dropped, 1);
    let res = store.pull_batch(1, &[0, 1]).unwrap();
    assert_eq!(res.versions, vec![7, 4]);
    check_row(0, 7, res.vectors.row(0));
}

#[test]
fn snapshot_file_round_trip() {
    let store = RepStore::new(3, &[WIDTH, 2], VersionPolicy::Strict);
    store.push_batch(0, 1, &[2], &Dense::from_rows(&[row(2, 9)]).unwrap(), 9).unwrap();
    store.push_batch(0, 2, &[0], &Dense::from_rows(&[vec![1.5, -0.25]]).unwrap(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.bin");
    store.save_snapshot(&path).unwrap();
    let back = digest_core::repstore::read_snapshot(&mut std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, store.entries());
}
