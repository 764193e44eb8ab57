//! Node partitioning and the per-part split of the propagation matrix.
//!
//! Part `m` owns the nodes `V_m`. Its halo is every neighbour of `V_m` that
//! lives in another part. Rows of the global propagation matrix for `V_m`
//! are split by column into `P_in` (local columns) and `P_out` (halo
//! columns), so that `P_in + P_out` reproduces those rows exactly.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Graph;
use crate::nn::{Csr, Dense, LocalView};

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("invalid partition: {0}")]
    Validation(String),
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMethod {
    Random,
    #[default]
    BfsGreedy,
}

/// Assignment of every node to exactly one of `num_parts` non-empty parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<usize>,
    num_parts: usize,
}

impl Partition {
    pub fn new(assignment: Vec<usize>, num_parts: usize) -> Result<Self, PartitionError> {
        if num_parts == 0 {
            return Err(PartitionError::Validation("need at least one part".into()));
        }
        let mut sizes = vec![0usize; num_parts];
        for (v, &p) in assignment.iter().enumerate() {
            if p >= num_parts {
                return Err(PartitionError::Validation(format!(
                    "node {v} assigned to part {p}, only {num_parts} parts"
                )));
            }
            sizes[p] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(PartitionError::Validation(format!("part {empty} is empty")));
        }
        Ok(Self { assignment, num_parts })
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn part_of(&self, v: usize) -> usize {
        self.assignment[v]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_parts];
        for &p in &self.assignment {
            sizes[p] += 1;
        }
        sizes
    }

    /// Number of undirected edges whose endpoints sit in different parts.
    pub fn cut_edges(&self, g: &Graph) -> usize {
        g.edges().filter(|&(u, v)| self.assignment[u] != self.assignment[v]).count()
    }

    /// Reads `node_id,part_id` rows. A header line is allowed.
    pub fn from_csv(path: &Path, num_nodes: usize) -> Result<Self, PartitionError> {
        let text = fs::read_to_string(path)?;
        let file = path.display().to_string();
        let mut assignment = vec![usize::MAX; num_nodes];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("node")) {
                continue;
            }
            let err = |msg: String| PartitionError::Parse {
                file: file.clone(),
                line: i + 1,
                msg,
            };
            let mut it = line.split(',').map(str::trim);
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(err(format!("expected node_id,part_id, got {line:?}")));
            };
            let v: usize = a.parse().map_err(|_| err(format!("bad node id {a:?}")))?;
            let p: usize = b.parse().map_err(|_| err(format!("bad part id {b:?}")))?;
            if v >= num_nodes {
                return Err(err(format!("node {v} outside [0, {num_nodes})")));
            }
            if assignment[v] != usize::MAX {
                return Err(err(format!("node {v} assigned twice")));
            }
            assignment[v] = p;
        }
        if let Some(v) = assignment.iter().position(|&p| p == usize::MAX) {
            return Err(PartitionError::Validation(format!("node {v} has no part")));
        }
        let num_parts = assignment.iter().max().map_or(0, |&m| m + 1);
        Self::new(assignment, num_parts)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), PartitionError> {
        let mut out = String::from("node_id,part_id\n");
        for (v, p) in self.assignment.iter().enumerate() {
            out.push_str(&format!("{v},{p}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Splits the nodes of `g` into `parts` non-empty parts.
///
/// `Random` shuffles the nodes and deals them round-robin, so part sizes
/// differ by at most one. `BfsGreedy` grows one region per part from seeded
/// start nodes, always extending the currently smallest region through its
/// BFS frontier (restarting from an unassigned node when the frontier runs
/// dry), which also keeps sizes within one of each other.
pub fn partition_graph(g: &Graph, parts: usize, method: PartitionMethod, seed: u64) -> Result<Partition, PartitionError> {
    let n = g.num_nodes();
    if parts == 0 || parts > n {
        return Err(PartitionError::Validation(format!(
            "part count {parts} must be in [1, {n}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let assignment = match method {
        PartitionMethod::Random => {
            let mut a = vec![0; n];
            for (rank, &v) in order.iter().enumerate() {
                a[v] = rank % parts;
            }
            a
        }
        PartitionMethod::BfsGreedy => bfs_greedy(g, parts, &order),
    };
    Partition::new(assignment, parts)
}

fn bfs_greedy(g: &Graph, parts: usize, order: &[usize]) -> Vec<usize> {
    const NONE: usize = usize::MAX;
    let n = g.num_nodes();
    let mut assignment = vec![NONE; n];
    let mut sizes = vec![0usize; parts];
    let mut frontiers: Vec<VecDeque<usize>> = vec![VecDeque::new(); parts];
    // `order` is a seeded permutation; it supplies both the initial seeds and restarts
    let mut next_free = 0;
    let assign = |v: usize, p: usize, assignment: &mut Vec<usize>, sizes: &mut Vec<usize>, frontier: &mut VecDeque<usize>| {
        assignment[v] = p;
        sizes[p] += 1;
        frontier.extend(g.neighbors(v).iter().copied());
    };
    for p in 0..parts {
        let v = order[p];
        assign(v, p, &mut assignment, &mut sizes, &mut frontiers[p]);
    }
    let mut remaining = n - parts;
    while remaining > 0 {
        let p = (0..parts).min_by_key(|&p| (sizes[p], p)).unwrap();
        let mut picked = None;
        while let Some(v) = frontiers[p].pop_front() {
            if assignment[v] == NONE {
                picked = Some(v);
                break;
            }
        }
        let v = match picked {
            Some(v) => v,
            None => {
                while assignment[order[next_free]] != NONE {
                    next_free += 1;
                }
                order[next_free]
            }
        };
        assign(v, p, &mut assignment, &mut sizes, &mut frontiers[p]);
        remaining -= 1;
    }
    assignment
}

/// One part's view of the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgraph {
    pub part_id: usize,
    /// Owned nodes, ascending global id.
    pub local_nodes: Vec<usize>,
    /// Neighbours of `local_nodes` owned elsewhere, ascending global id.
    pub halo_nodes: Vec<usize>,
    pub p_in: Csr,
    pub p_out: Csr,
    pub x_in: Dense,
    pub x_halo: Dense,
    pub labels: Vec<usize>,
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
    /// Largest full-graph degree among the owned nodes.
    pub max_degree: usize,
}

impl Subgraph {
    pub fn view(&self) -> LocalView<'_> {
        LocalView {
            p_in: &self.p_in,
            p_out: &self.p_out,
            x_in: &self.x_in,
            x_halo: &self.x_halo,
        }
    }

    pub fn num_local(&self) -> usize {
        self.local_nodes.len()
    }

    pub fn num_halo(&self) -> usize {
        self.halo_nodes.len()
    }
}

/// Builds one [`Subgraph`] per part from the global propagation matrix.
pub fn build_subgraphs(g: &Graph, p: &Csr, part: &Partition) -> Result<Vec<Subgraph>, PartitionError> {
    let n = g.num_nodes();
    if p.rows() != n || p.cols() != n || part.assignment().len() != n {
        return Err(PartitionError::Validation(format!(
            "graph has {n} nodes, propagation matrix is {}x{}, partition covers {}",
            p.rows(),
            p.cols(),
            part.assignment().len()
        )));
    }
    let mut local_index = vec![0usize; n];
    let mut locals: Vec<Vec<usize>> = vec![Vec::new(); part.num_parts()];
    for (v, idx) in local_index.iter_mut().enumerate() {
        let m = part.part_of(v);
        *idx = locals[m].len();
        locals[m].push(v);
    }
    let masks = g.masks();
    let mut subs = Vec::with_capacity(part.num_parts());
    for (m, local_nodes) in locals.into_iter().enumerate() {
        let mut halo_nodes: Vec<usize> = local_nodes
            .iter()
            .flat_map(|&v| g.neighbors(v).iter().copied())
            .filter(|&u| part.part_of(u) != m)
            .collect();
        halo_nodes.sort_unstable();
        halo_nodes.dedup();
        let mut in_rows = Vec::with_capacity(local_nodes.len());
        let mut out_rows = Vec::with_capacity(local_nodes.len());
        for &v in &local_nodes {
            let mut ri = Vec::new();
            let mut ro = Vec::new();
            for (u, w) in p.row_iter(v) {
                if part.part_of(u) == m {
                    ri.push((local_index[u], w));
                } else {
                    let h = halo_nodes.binary_search(&u).map_err(|_| {
                        PartitionError::Validation(format!(
                            "propagation entry ({v},{u}) is not an edge of the graph"
                        ))
                    })?;
                    ro.push((h, w));
                }
            }
            in_rows.push(ri);
            out_rows.push(ro);
        }
        let shape = |e: crate::nn::ShapeError| PartitionError::Validation(e.to_string());
        let sub = Subgraph {
            part_id: m,
            p_in: Csr::from_rows(local_nodes.len(), in_rows).map_err(shape)?,
            p_out: Csr::from_rows(halo_nodes.len(), out_rows).map_err(shape)?,
            x_in: g.features().select_rows(&local_nodes),
            x_halo: g.features().select_rows(&halo_nodes),
            labels: local_nodes.iter().map(|&v| g.labels()[v]).collect(),
            train_mask: local_nodes.iter().map(|&v| masks.train[v]).collect(),
            val_mask: local_nodes.iter().map(|&v| masks.val[v]).collect(),
            test_mask: local_nodes.iter().map(|&v| masks.test[v]).collect(),
            max_degree: local_nodes.iter().map(|&v| g.degree(v)).max().unwrap_or(0),
            local_nodes,
            halo_nodes,
        };
        subs.push(sub);
    }
    Ok(subs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartStats {
    pub part_id: usize,
    pub local: usize,
    pub halo: usize,
    /// `|halo| / |local|`: extra representation memory relative to ignoring the halo.
    pub halo_ratio: f64,
    pub max_degree: usize,
    /// `(|local| + |halo|) · L · d` scalars held per training iteration.
    pub memory_elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub parts: Vec<PartStats>,
    pub mean_halo_ratio: f64,
    /// Undirected cut edges; each appears as a halo entry on both sides.
    pub cut_edges: usize,
    pub max_memory_elements: usize,
}

/// Halo ratios, cut size and per-part memory estimate for `layers` layers of width `width`.
pub fn partition_stats(subs: &[Subgraph], layers: usize, width: usize) -> Result<PartitionStats, PartitionError> {
    if subs.is_empty() {
        return Err(PartitionError::Validation("no subgraphs".into()));
    }
    let parts: Vec<PartStats> = subs
        .iter()
        .map(|s| PartStats {
            part_id: s.part_id,
            local: s.num_local(),
            halo: s.num_halo(),
            halo_ratio: s.num_halo() as f64 / s.num_local() as f64,
            max_degree: s.max_degree,
            memory_elements: (s.num_local() + s.num_halo()) * layers * width,
        })
        .collect();
    let mean_halo_ratio = parts.iter().map(|p| p.halo_ratio).sum::<f64>() / parts.len() as f64;
    let cut_entries: usize = subs.iter().map(|s| s.p_out.nnz()).sum();
    Ok(PartitionStats {
        mean_halo_ratio,
        cut_edges: cut_entries / 2,
        max_memory_elements: parts.iter().map(|p| p.memory_elements).max().unwrap_or(0),
        parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_prop_matrix, karate_club, Masks};

    fn tiny(edges: &[(usize, usize)], n: usize) -> Graph {
        Graph::new(n, edges, Dense::zeros(n, 1), vec![0; n], Masks::all(n)).unwrap()
    }

    fn complete(n: usize) -> Graph {
        let edges: Vec<_> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
        tiny(&edges, n)
    }

    #[test]
    fn single_part() {
        let g = karate_club();
        for method in [PartitionMethod::Random, PartitionMethod::BfsGreedy] {
            let p = partition_graph(&g, 1, method, 3).unwrap();
            assert!(p.assignment().iter().all(|&a| a == 0));
        }
        let subs = build_subgraphs(&g, &build_prop_matrix(&g), &partition_graph(&g, 1, PartitionMethod::Random, 0).unwrap()).unwrap();
        assert_eq!(subs.len(), 1);
        assert!(subs[0].halo_nodes.is_empty());
        assert_eq!(subs[0].p_out.cols(), 0);
        assert_eq!(partition_stats(&subs, 2, 16).unwrap().parts[0].halo_ratio, 0.0);
    }

    #[test]
    fn random_balance_on_isolated_nodes() {
        let g = tiny(&[], 4);
        let p = partition_graph(&g, 2, PartitionMethod::Random, 0).unwrap();
        assert_eq!(p.sizes(), vec![2, 2]);
    }

    #[test]
    fn too_many_parts() {
        let g = tiny(&[], 3);
        assert!(partition_graph(&g, 4, PartitionMethod::Random, 0).is_err());
        assert!(partition_graph(&g, 0, PartitionMethod::BfsGreedy, 0).is_err());
    }

    #[test]
    fn bfs_greedy_beats_random_cut_on_karate() {
        let g = karate_club();
        let greedy = partition_graph(&g, 2, PartitionMethod::BfsGreedy, 1).unwrap();
        let random_mean = (0..10)
            .map(|s| partition_graph(&g, 2, PartitionMethod::Random, s).unwrap().cut_edges(&g) as f64)
            .sum::<f64>()
            / 10.0;
        assert!((greedy.cut_edges(&g) as f64) <= random_mean, "{} vs {random_mean}", greedy.cut_edges(&g));
        let sizes = greedy.sizes();
        assert!(sizes.iter().all(|&s| s <= (1.1f64 * 34.0 / 2.0).ceil() as usize));
    }

    #[test]
    fn two_node_split() {
        let g = tiny(&[(0, 1)], 2);
        let p = build_prop_matrix(&g);
        let part = Partition::new(vec![0, 1], 2).unwrap();
        let subs = build_subgraphs(&g, &p, &part).unwrap();
        for (m, s) in subs.iter().enumerate() {
            assert_eq!(s.p_in.to_dense().as_slice(), &[0.5]);
            assert_eq!(s.p_out.to_dense().as_slice(), &[0.5]);
            assert_eq!(s.halo_nodes, vec![1 - m]);
        }
        let stats = partition_stats(&subs, 2, 4).unwrap();
        assert_eq!(stats.parts[0].halo_ratio, 1.0);
        assert_eq!(stats.cut_edges, 1);
    }

    #[test]
    fn path_split() {
        let g = tiny(&[(0, 1), (1, 2)], 3);
        let p = build_prop_matrix(&g);
        let part = Partition::new(vec![0, 0, 1], 2).unwrap();
        let subs = build_subgraphs(&g, &p, &part).unwrap();
        assert_eq!(subs[0].halo_nodes, vec![2]);
        assert!((subs[0].p_out.get(1, 0) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert_eq!(subs[0].p_out.row(0).0.len(), 0);
    }

    #[test]
    fn complete_graph_bisection_ratio() {
        let g = complete(4);
        let subs = build_subgraphs(&g, &build_prop_matrix(&g), &Partition::new(vec![0, 0, 1, 1], 2).unwrap()).unwrap();
        let stats = partition_stats(&subs, 2, 8).unwrap();
        assert!(stats.parts.iter().all(|p| p.halo_ratio == 1.0));
        assert_eq!(stats.parts[0].memory_elements, 4 * 2 * 8);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("part.csv");
        let g = karate_club();
        let p = partition_graph(&g, 3, PartitionMethod::BfsGreedy, 5).unwrap();
        p.write_csv(&path).unwrap();
        assert_eq!(Partition::from_csv(&path, 34).unwrap(), p);
        fs::write(&path, "0,0\n0,1\n").unwrap();
        assert!(Partition::from_csv(&path, 2).is_err());
    }

    #[test]
    fn empty_part_is_rejected() {
        assert!(Partition::new(vec![0, 0, 2], 3).is_err());
    }
}
