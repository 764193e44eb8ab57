use digest_core::graph::{build_prop_matrix, Graph, Masks};
use digest_core::nn::network::{forward, forward_closed, LocalView};
use digest_core::nn::{layer_forward, Activation, Csr, Dense, GcnModel, ShapeError};
use digest_core::partition::{build_subgraphs, Partition};
use proptest::prelude::*;

fn graph_strategy() -> impl Strategy<Value = Graph> {
    (2usize..14).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec((0..n, 0..n), 0..3 * n),
            prop::collection::vec(-2.0f64..2.0, n * 3),
        )
            .prop_map(|(n, edges, feats)| {
                let x = Dense::from_vec(n, 3, feats).unwrap();
                let labels = (0..n).map(|v| v % 2).collect();
                Graph::new(n, &edges, x, labels, Masks::all(n)).unwrap()
            })
    })
}

/// A graph plus a partition into `m` non-empty parts.
fn split_strategy() -> impl Strategy<Value = (Graph, Partition)> {
    graph_strategy().prop_flat_map(|g| {
        let n = g.num_nodes();
        (1..=n.min(4)).prop_flat_map(move |m| {
            let g = g.clone();
            prop::collection::vec(0..m, n).prop_map(move |mut a| {
                for (v, slot) in a.iter_mut().take(m).enumerate() {
                    *slot = v;
                }
                (g.clone(), Partition::new(a, m).unwrap())
            })
        })
    })
}

fn dense(rows: usize, cols: usize, vals: &[f64]) -> Dense {
    Dense::from_vec(rows, cols, vals[..rows * cols].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn propagation_matrix_is_symmetric_normalised(g in graph_strategy()) {
        let p = build_prop_matrix(&g);
        let n = g.num_nodes();
        prop_assert_eq!(p.nnz(), n + 2 * g.num_edges());
        for u in 0..n {
            for v in 0..n {
                prop_assert_eq!(p.get(u, v).to_bits(), p.get(v, u).to_bits());
                let expected = if u == v || g.has_edge(u, v) {
                    1.0 / (((g.degree(u) + 1) * (g.degree(v) + 1)) as f64).sqrt()
                } else {
                    0.0
                };
                prop_assert!((p.get(u, v) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn split_reconstructs_the_propagation_matrix((g, part) in split_strategy()) {
        let p = build_prop_matrix(&g);
        let subs = build_subgraphs(&g, &p, &part).unwrap();
        let n = g.num_nodes();
        let mut owned = vec![0usize; n];
        for s in &subs {
            prop_assert!(s.halo_nodes.windows(2).all(|w| w[0] < w[1]));
            for &h in &s.halo_nodes {
                prop_assert!(part.part_of(h) != s.part_id);
            }
            for (i, &v) in s.local_nodes.iter().enumerate() {
                owned[v] += 1;
                let mut row = vec![0.0; n];
                for (c, w) in s.p_in.row_iter(i) {
                    row[s.local_nodes[c]] += w;
                }
                for (c, w) in s.p_out.row_iter(i) {
                    row[s.halo_nodes[c]] += w;
                }
                for (u, &x) in row.iter().enumerate() {
                    prop_assert_eq!(x.to_bits(), p.get(v, u).to_bits());
                }
            }
        }
        prop_assert!(owned.iter().all(|&c| c == 1));
        let halo_total: usize = subs.iter().map(|s| s.num_halo()).sum();
        let boundary: usize = (0..n)
            .map(|v| (0..part.num_parts()).filter(|&m| m != part.part_of(v) && g.neighbors(v).iter().any(|&u| part.part_of(u) == m)).count())
            .sum();
        prop_assert_eq!(halo_total, boundary);
    }

    #[test]
    fn identity_layer_is_linear_in_the_halo(
        vals in prop::collection::vec(-3.0f64..3.0, 64),
        a in -2.0f64..2.0,
    ) {
        let p_in = Csr::from_rows(2, vec![vec![(0, 0.5), (1, 0.25)], vec![(1, 1.0 / 3.0)]]).unwrap();
        let p_out = Csr::from_rows(3, vec![vec![(2, 0.4)], vec![(0, 0.2), (1, 0.7)]]).unwrap();
        let h_in = dense(2, 2, &vals[0..]);
        let h1 = dense(3, 2, &vals[4..]);
        let h2 = dense(3, 2, &vals[10..]);
        let w = dense(2, 3, &vals[16..]);
        let f = |h: &Dense| layer_forward(&p_in, &p_out, &h_in, h, &w, Activation::Identity).unwrap().0;
        let zero = Dense::zeros(3, 2);
        let mut mixed = h1.clone();
        mixed.axpy(a, &h2).unwrap();
        // f(h1 + a h2) = f(h1) + a (f(h2) - f(0))
        let mut expect = f(&h1);
        expect.axpy(a, &f(&h2).sub(&f(&zero)).unwrap()).unwrap();
        let got = f(&mixed);
        for (x, y) in got.as_slice().iter().zip(expect.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_halos_reproduce_the_full_graph_forward(
        (g, part) in split_strategy(),
        seed in 0u64..1000,
        relu in any::<bool>(),
        normalize in any::<bool>(),
    ) {
        let act = if relu { Activation::Relu } else { Activation::Identity };
        let model = GcnModel::new(&[3, 4, 3, 2], act, seed).unwrap();
        let p = build_prop_matrix(&g);
        let empty = Csr::empty(g.num_nodes(), 0);
        let no_halo = Dense::zeros(0, 3);
        let full = forward_closed(
            &model,
            LocalView { p_in: &p, p_out: &empty, x_in: g.features(), x_halo: &no_halo },
            normalize,
        )
        .unwrap();
        for s in build_subgraphs(&g, &p, &part).unwrap() {
            let local = forward(&model, s.view(), normalize, |k| {
                Ok::<_, ShapeError>(full.inputs[k].select_rows(&s.halo_nodes))
            })
            .unwrap();
            let expect = full.logits.select_rows(&s.local_nodes);
            for (x, y) in local.logits.as_slice().iter().zip(expect.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
