//! Immutable undirected graphs with node features, labels and split masks,
//! plus the symmetric-normalised GCN propagation matrix.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Csr, Dense};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("invalid graph: {0}")]
    Validation(String),
}

fn read_text(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Per-node membership in the train, validation and test splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    /// Every node in every split.
    pub fn all(n: usize) -> Self {
        Self {
            train: vec![true; n],
            val: vec![true; n],
            test: vec![true; n],
        }
    }

    /// Disjoint seeded split: the first `train` fraction of a shuffled node
    /// order goes to train, the next `val` fraction to validation, the rest to test.
    pub fn random_split(n: usize, train: f64, val: f64, seed: u64) -> Result<Self, GraphError> {
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 {
            return Err(GraphError::Validation(format!(
                "split fractions train={train} val={val} must be in [0,1] and sum to at most 1"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (train * n as f64).round() as usize;
        let n_val = ((val * n as f64).round() as usize).min(n - n_train);
        let mut masks = Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        };
        for (rank, &v) in order.iter().enumerate() {
            if rank < n_train {
                masks.train[v] = true;
            } else if rank < n_train + n_val {
                masks.val[v] = true;
            } else {
                masks.test[v] = true;
            }
        }
        Ok(masks)
    }

    /// Reads one split name (`train`, `val`, `test`) per line, row = node.
    pub fn from_csv(path: &Path, n: usize) -> Result<Self, GraphError> {
        let text = read_text(path)?;
        let file = path.display().to_string();
        let mut masks = Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        };
        let mut rows = 0;
        for (i, line) in text.lines().enumerate() {
            let name = line.trim();
            if name.is_empty() || name.starts_with('#') {
                continue;
            }
            if rows >= n {
                return Err(GraphError::Parse {
                    file,
                    line: i + 1,
                    msg: format!("more mask rows than the {n} nodes"),
                });
            }
            match name {
                "train" => masks.train[rows] = true,
                "val" | "valid" | "validation" => masks.val[rows] = true,
                "test" => masks.test[rows] = true,
                other => {
                    return Err(GraphError::Parse {
                        file,
                        line: i + 1,
                        msg: format!("unknown split name {other:?}"),
                    })
                }
            }
            rows += 1;
        }
        if rows != n {
            return Err(GraphError::Validation(format!("{file}: {rows} mask rows for {n} nodes")));
        }
        Ok(masks)
    }
}

/// Fractions used when a dataset carries no split of its own.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.5;
pub const DEFAULT_VAL_FRACTION: f64 = 0.25;

/// An undirected graph stored as a symmetric CSR pattern without self-loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    features: Dense,
    labels: Vec<usize>,
    num_classes: usize,
    masks: Masks,
}

impl Graph {
    /// Builds a graph from an edge list. Edges are symmetrised and
    /// deduplicated; self-loops are dropped.
    pub fn new(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Dense,
        labels: Vec<usize>,
        masks: Masks,
    ) -> Result<Self, GraphError> {
        if num_nodes == 0 {
            return Err(GraphError::Validation("graph has zero nodes".into()));
        }
        if features.rows() != num_nodes {
            return Err(GraphError::Validation(format!(
                "{} feature rows for {num_nodes} nodes",
                features.rows()
            )));
        }
        if labels.len() != num_nodes {
            return Err(GraphError::Validation(format!(
                "{} labels for {num_nodes} nodes",
                labels.len()
            )));
        }
        if masks.train.len() != num_nodes || masks.val.len() != num_nodes || masks.test.len() != num_nodes {
            return Err(GraphError::Validation("mask length differs from node count".into()));
        }
        if !features.is_finite() {
            return Err(GraphError::Validation("features contain non-finite values".into()));
        }
        let mut adj = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(GraphError::Validation(format!(
                    "edge ({u}, {v}) references a node outside [0, {num_nodes})"
                )));
            }
            if u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        let mut indptr = Vec::with_capacity(num_nodes + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for mut nbrs in adj {
            nbrs.sort_unstable();
            nbrs.dedup();
            indices.extend(nbrs);
            indptr.push(indices.len());
        }
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        Ok(Self {
            indptr,
            indices,
            features,
            labels,
            num_classes,
            masks,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.indptr.len() - 1
    }

    /// Undirected edge count.
    pub fn num_edges(&self) -> usize {
        self.indices.len() / 2
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.indices[self.indptr[v]..self.indptr[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.indptr[v + 1] - self.indptr[v]
    }

    pub fn degree_sum(&self) -> usize {
        self.indices.len()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.num_nodes()).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            self.neighbors(u).iter().copied().filter(move |&v| u < v).map(move |v| (u, v))
        })
    }

    pub fn features(&self) -> &Dense {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    pub fn with_masks(mut self, masks: Masks) -> Result<Self, GraphError> {
        if masks.train.len() != self.num_nodes() {
            return Err(GraphError::Validation("mask length differs from node count".into()));
        }
        self.masks = masks;
        Ok(self)
    }
}

/// Parses whitespace-separated `u v` pairs, one per line. `#` starts a comment.
pub fn parse_edge_list(text: &str, file: &str) -> Result<Vec<(usize, usize)>, GraphError> {
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| GraphError::Parse {
            file: file.to_string(),
            line: i + 1,
            msg,
        };
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err(format!("expected two node ids, got {line:?}")));
        };
        let u = a.parse().map_err(|_| err(format!("bad node id {a:?}")))?;
        let v = b.parse().map_err(|_| err(format!("bad node id {b:?}")))?;
        edges.push((u, v));
    }
    Ok(edges)
}

fn read_table(path: &Path) -> Result<Vec<Vec<f64>>, GraphError> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| GraphError::Parse {
            file: file.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| GraphError::Parse {
            file: file.clone(),
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| GraphError::Parse {
                    file: file.clone(),
                    line,
                    msg: format!("not a number: {f:?}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Loads a graph from an edge list, a headerless feature CSV (row = node), a
/// label CSV (one class id per row) and an optional split-name mask file.
/// Without a mask file the nodes get a seeded default split.
pub fn load_edge_list(
    edges_path: &Path,
    features_path: &Path,
    labels_path: &Path,
    masks_path: Option<&Path>,
) -> Result<Graph, GraphError> {
    let edges = parse_edge_list(&read_text(edges_path)?, &edges_path.display().to_string())?;
    let rows = read_table(features_path)?;
    let n = rows.len();
    let features = Dense::from_rows(&rows).map_err(|e| GraphError::Validation(format!("features: {e}")))?;
    let label_rows = read_table(labels_path)?;
    let labels = label_rows
        .iter()
        .enumerate()
        .map(|(i, r)| match r.as_slice() {
            [x] if *x >= 0.0 && x.fract() == 0.0 => Ok(*x as usize),
            _ => Err(GraphError::Parse {
                file: labels_path.display().to_string(),
                line: i + 1,
                msg: format!("expected one non-negative integer label, got {r:?}"),
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let masks = match masks_path {
        Some(p) => Masks::from_csv(p, n)?,
        None => Masks::random_split(n, DEFAULT_TRAIN_FRACTION, DEFAULT_VAL_FRACTION, 0)?,
    };
    Graph::new(n, &edges, features, labels, masks)
}

/// Stochastic block model: `blocks` groups of `nodes_per_block` nodes, edges
/// inside a block with probability `p_in` and across blocks with `p_out`.
/// Labels are block ids; features are the one-hot block id (in the first
/// `blocks` of `feature_dim` columns) plus N(0, 0.1²) noise.
pub fn generate_sbm(
    blocks: usize,
    nodes_per_block: usize,
    p_in: f64,
    p_out: f64,
    seed: u64,
    feature_dim: usize,
) -> Result<Graph, GraphError> {
    if blocks == 0 || nodes_per_block == 0 {
        return Err(GraphError::Validation("SBM needs at least one node".into()));
    }
    if !(0.0 <= p_out && p_out <= p_in && p_in <= 1.0) {
        return Err(GraphError::Validation(format!(
            "SBM probabilities must satisfy 0 <= p_out <= p_in <= 1, got p_in={p_in} p_out={p_out}"
        )));
    }
    if feature_dim < blocks {
        return Err(GraphError::Validation(format!(
            "feature_dim {feature_dim} cannot hold a one-hot of {blocks} blocks"
        )));
    }
    let n = blocks * nodes_per_block;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = |v: usize| v / nodes_per_block;
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block(u) == block(v) { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    let mut features = Dense::zeros(n, feature_dim);
    for v in 0..n {
        for c in 0..feature_dim {
            let onehot = if c == block(v) { 1.0 } else { 0.0 };
            features.set(v, c, onehot + noise.sample(&mut rng));
        }
    }
    let labels = (0..n).map(block).collect();
    let masks = Masks::random_split(n, DEFAULT_TRAIN_FRACTION, DEFAULT_VAL_FRACTION, seed.wrapping_add(1))?;
    Graph::new(n, &edges, features, labels, masks)
}

const KARATE_EDGES: [(usize, usize); 78] = [
    (0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (0, 7), (0, 8), (0, 10), (0, 11),
    (0, 12), (0, 13), (0, 17), (0, 19), (0, 21), (0, 31), (1, 2), (1, 3), (1, 7), (1, 13),
    (1, 17), (1, 19), (1, 21), (1, 30), (2, 3), (2, 7), (2, 8), (2, 9), (2, 13), (2, 27),
    (2, 28), (2, 32), (3, 7), (3, 12), (3, 13), (4, 6), (4, 10), (5, 6), (5, 10), (5, 16),
    (6, 16), (8, 30), (8, 32), (8, 33), (9, 33), (13, 33), (14, 32), (14, 33), (15, 32), (15, 33),
    (18, 32), (18, 33), (19, 33), (20, 32), (20, 33), (22, 32), (22, 33), (23, 25), (23, 27), (23, 29),
    (23, 32), (23, 33), (24, 25), (24, 27), (24, 31), (25, 31), (26, 29), (26, 33), (27, 33), (28, 31),
    (28, 33), (29, 32), (29, 33), (30, 32), (30, 33), (31, 32), (31, 33), (32, 33),
];

const KARATE_INSTRUCTOR_SIDE: [usize; 17] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12, 13, 16, 17, 19, 21];

/// Zachary's karate club: 34 members, 78 friendships, labelled by the side
/// each member joined after the split. Features are one-hot node ids.
pub fn karate_club() -> Graph {
    let n = 34;
    let mut labels = vec![1; n];
    for &v in &KARATE_INSTRUCTOR_SIDE {
        labels[v] = 0;
    }
    let mut features = Dense::zeros(n, n);
    for v in 0..n {
        features.set(v, v, 1.0);
    }
    let masks = Masks::random_split(n, DEFAULT_TRAIN_FRACTION, DEFAULT_VAL_FRACTION, 0).expect("valid fractions");
    Graph::new(n, &KARATE_EDGES, features, labels, masks).expect("builtin dataset is valid")
}

/// The GCN propagation matrix `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃ = D + I`.
pub fn build_prop_matrix(g: &Graph) -> Csr {
    let n = g.num_nodes();
    let deg1: Vec<f64> = (0..n).map(|v| (g.degree(v) + 1) as f64).collect();
    let rows = (0..n)
        .map(|u| {
            let mut row: Vec<(usize, f64)> = g
                .neighbors(u)
                .iter()
                .map(|&v| (v, 1.0 / (deg1[u] * deg1[v]).sqrt()))
                .collect();
            row.push((u, 1.0 / deg1[u]));
            row
        })
        .collect();
    Csr::from_rows(n, rows).expect("pattern built from a valid graph")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(edges: &[(usize, usize)], n: usize) -> Graph {
        Graph::new(n, edges, Dense::zeros(n, 1), vec![0; n], Masks::all(n)).unwrap()
    }

    #[test]
    fn smallest_graph_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("edges.txt");
        let f = dir.path().join("features.csv");
        let l = dir.path().join("labels.csv");
        fs::write(&e, "# two nodes\n0 1\n").unwrap();
        fs::write(&f, "1.0\n2.0\n").unwrap();
        fs::write(&l, "0\n1\n").unwrap();
        let g = load_edge_list(&e, &f, &l, None).unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.features().as_slice(), &[1.0, 2.0]);

        fs::write(&e, "0 1\n1 0\n").unwrap();
        assert_eq!(load_edge_list(&e, &f, &l, None).unwrap(), g);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_edge_list("0 1\n\n1 x\n", "e.txt") {
            Err(GraphError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_edge_list("0 1 2\n", "e.txt").is_err());
    }

    #[test]
    fn dangling_node_is_rejected() {
        let err = Graph::new(2, &[(0, 2)], Dense::zeros(2, 1), vec![0, 0], Masks::all(2));
        assert!(matches!(err, Err(GraphError::Validation(_))));
    }

    #[test]
    fn mask_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("masks.csv");
        fs::write(&p, "train\nval\ntest\n").unwrap();
        let m = Masks::from_csv(&p, 3).unwrap();
        assert_eq!(m.train, vec![true, false, false]);
        assert_eq!(m.test, vec![false, false, true]);
        assert!(Masks::from_csv(&p, 4).is_err());
        fs::write(&p, "train\nbogus\ntest\n").unwrap();
        assert!(Masks::from_csv(&p, 3).is_err());
    }

    #[test]
    fn karate_club_counts() {
        let g = karate_club();
        assert_eq!(g.num_nodes(), 34);
        assert_eq!(g.num_edges(), 78);
        assert_eq!(g.degree_sum(), 156);
        assert_eq!(g.degree(0), 16);
        assert_eq!(g.degree(33), 17);
        assert_eq!(g.labels().iter().filter(|&&l| l == 0).count(), 17);
    }

    #[test]
    fn sbm_small_cases() {
        let g = generate_sbm(2, 1, 1.0, 0.0, 3, 2).unwrap();
        assert_eq!(g.num_edges(), 0);
        assert_eq!(g.labels(), &[0, 1]);
        let t = generate_sbm(1, 3, 1.0, 0.0, 3, 1).unwrap();
        assert_eq!(t.num_edges(), 3);
        assert!(t.has_edge(0, 1) && t.has_edge(1, 2) && t.has_edge(0, 2));
        assert!(generate_sbm(0, 5, 0.5, 0.1, 0, 1).is_err());
        assert!(generate_sbm(2, 5, 0.1, 0.5, 0, 2).is_err());
    }

    #[test]
    fn sbm_intra_block_edges_near_expectation() {
        let g = generate_sbm(2, 50, 0.3, 0.01, 7, 2).unwrap();
        let intra = g.edges().filter(|&(u, v)| u / 50 == v / 50).count() as f64;
        // two blocks of C(50,2) Bernoulli(0.3) pairs
        let trials: f64 = 2.0 * 1225.0;
        let mean = trials * 0.3;
        let sd = (trials * 0.3 * 0.7).sqrt();
        assert!((intra - mean).abs() <= 3.0 * sd, "{intra} vs {mean} ± {}", 3.0 * sd);
    }

    #[test]
    fn sbm_is_reproducible() {
        let a = generate_sbm(3, 20, 0.4, 0.05, 99, 5).unwrap();
        let b = generate_sbm(3, 20, 0.4, 0.05, 99, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_sbm(3, 20, 0.4, 0.05, 100, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn prop_matrix_hand_values() {
        let p = build_prop_matrix(&tiny(&[(0, 1)], 2));
        assert_eq!(p.to_dense().as_slice(), &[0.5, 0.5, 0.5, 0.5]);
        let p = build_prop_matrix(&tiny(&[], 1));
        assert_eq!(p.to_dense().as_slice(), &[1.0]);
        let p = build_prop_matrix(&tiny(&[(0, 1), (1, 2)], 3));
        assert!((p.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert_eq!(p.get(0, 2), 0.0);
    }

    #[test]
    fn regular_graph_rows_sum_to_one() {
        // 5-cycle
        let g = tiny(&[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)], 5);
        let p = build_prop_matrix(&g);
        for r in 0..5 {
            assert!((p.row_sum(r) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_split_is_disjoint_and_complete() {
        let m = Masks::random_split(101, 0.5, 0.25, 4).unwrap();
        for v in 0..101 {
            assert_eq!(m.train[v] as u8 + m.val[v] as u8 + m.test[v] as u8, 1);
        }
        assert_eq!(m.train.iter().filter(|&&b| b).count(), 51);
    }
}
