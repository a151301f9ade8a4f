//! Immutable attributed graphs in compressed-row form, plus the structural
//! diagnostics (homophily, neighbor-label distributions) and perturbations
//! used throughout the simulator.

use std::collections::HashSet;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::sparse::{CsrPattern, SparseMatrix};

/// Node-attributed graph with class labels.
///
/// Neighbor lists are sorted and free of duplicates and self-loops. An
/// undirected graph stores both `(u, v)` and `(v, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    undirected: bool,
}

impl Graph {
    /// Canonicalizes an edge list into a graph. Self-loops are dropped and
    /// duplicate entries collapse; undirected input is symmetrized.
    pub fn from_edges(
        edges: &[(usize, usize)],
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        undirected: bool,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(Error::input(format!(
                "{} feature rows but {} labels",
                n,
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::input(format!(
                "label {y} of node {i} is outside [0, {num_classes})"
            )));
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::input(format!(
                    "edge ({u}, {v}) has an endpoint outside [0, {n})"
                )));
            }
            if u == v {
                continue;
            }
            adj[u].push(v);
            if undirected {
                adj[v].push(u);
            }
        }
        let mut row_offsets = Vec::with_capacity(n + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::new();
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
            col_indices.extend_from_slice(row);
            row_offsets.push(col_indices.len());
        }
        Ok(Self {
            num_nodes: n,
            row_offsets,
            col_indices,
            features,
            labels,
            num_classes,
            undirected,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn is_undirected(&self) -> bool {
        self.undirected
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[u]..self.row_offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.row_offsets[u + 1] - self.row_offsets[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Number of stored directed entries.
    pub fn num_entries(&self) -> usize {
        self.col_indices.len()
    }

    /// Edge count, with each undirected edge counted once.
    pub fn num_edges(&self) -> usize {
        if self.undirected {
            self.col_indices.len() / 2
        } else {
            self.col_indices.len()
        }
    }

    /// Unique edges; undirected edges are reported once as `(u, v)` with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for u in 0..self.num_nodes {
            for &v in self.neighbors(u) {
                if !self.undirected || u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Checks every structural invariant; graphs built through this module
    /// always pass.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        if self.row_offsets.len() != n + 1 || self.row_offsets[0] != 0 {
            return Err(Error::input("row_offsets has the wrong length or start"));
        }
        if self.row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::input("row_offsets is not monotone"));
        }
        if self.row_offsets[n] != self.col_indices.len() {
            return Err(Error::input("row_offsets[N] != number of stored entries"));
        }
        if self.features.nrows() != n || self.labels.len() != n {
            return Err(Error::input("features/labels do not have N rows"));
        }
        if self.labels.iter().any(|&y| y >= self.num_classes) {
            return Err(Error::input("label out of range"));
        }
        for u in 0..n {
            let row = self.neighbors(u);
            if row.iter().any(|&v| v >= n) {
                return Err(Error::input(format!("row {u} has an out-of-range index")));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::input(format!("row {u} is unsorted or has duplicates")));
            }
            if row.contains(&u) {
                return Err(Error::input(format!("row {u} stores a self-loop")));
            }
            if self.undirected && row.iter().any(|&v| !self.has_edge(v, u)) {
                return Err(Error::input(format!("row {u} breaks symmetry")));
            }
        }
        Ok(())
    }

    pub fn pattern(&self) -> CsrPattern {
        CsrPattern::new(
            self.num_nodes,
            self.num_nodes,
            self.row_offsets.clone(),
            self.col_indices.clone(),
        )
        .expect("graph structure is a valid pattern")
    }

    /// Row-normalized adjacency (mean over neighbors; isolated nodes get an
    /// empty row).
    pub fn mean_adjacency(&self) -> SparseMatrix {
        SparseMatrix::row_mean(Arc::new(self.pattern()))
    }

    /// Fraction of edges whose endpoints share a class.
    pub fn edge_homophily(&self) -> Result<f64> {
        if self.col_indices.is_empty() {
            return Err(Error::Undefined(
                "homophily ratio: graph has no edges".to_string(),
            ));
        }
        // Undirected edges are stored twice, which leaves the ratio unchanged.
        let mut same = 0usize;
        for u in 0..self.num_nodes {
            same += self
                .neighbors(u)
                .iter()
                .filter(|&&v| self.labels[v] == self.labels[u])
                .count();
        }
        Ok(same as f64 / self.col_indices.len() as f64)
    }

    pub fn neighbor_label_distribution(&self) -> NeighborLabelDistribution {
        let c = self.num_classes;
        let mut m = Array2::<f64>::zeros((c, c));
        for u in 0..self.num_nodes {
            for &v in self.neighbors(u) {
                m[[self.labels[u], self.labels[v]]] += 1.0;
            }
        }
        for mut row in m.axis_iter_mut(Axis(0)) {
            let total: f64 = row.sum();
            if total > 0.0 {
                row.mapv_inplace(|x| x / total);
            }
        }
        NeighborLabelDistribution { matrix: m }
    }

    /// Edge-flip noise: every edge is dropped with probability `p`, and each
    /// drop is replaced by one uniformly random pair that is not an edge at
    /// insertion time. Deterministic for a given seed.
    pub fn flip_edge_noise(&self, p: f64, seed: u64) -> Result<Graph> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::input(format!("flip probability {p} outside [0, 1]")));
        }
        let mut rng = seeded(seed);
        let key = |u: usize, v: usize| {
            if self.undirected && v < u {
                (v, u)
            } else {
                (u, v)
            }
        };
        let original = self.edges();
        let mut present: HashSet<(usize, usize)> = original.iter().copied().collect();
        let mut result = Vec::with_capacity(original.len());
        let mut removed = 0usize;
        for &(u, v) in &original {
            if rng.gen_bool(p) {
                present.remove(&(u, v));
                removed += 1;
            } else {
                result.push((u, v));
            }
        }

        let n = self.num_nodes;
        let slots = if self.undirected {
            n * n.saturating_sub(1) / 2
        } else {
            n * n.saturating_sub(1)
        };
        let free = slots - present.len();
        if removed > 0 && free < 4 * removed {
            // Dense regime: enumerate the free pairs and draw without replacement.
            let mut candidates: Vec<(usize, usize)> = (0..n)
                .flat_map(|u| (0..n).map(move |v| (u, v)))
                .filter(|&(u, v)| u != v && (!self.undirected || u < v))
                .filter(|e| !present.contains(e))
                .collect();
            let (chosen, _) = candidates.partial_shuffle(&mut rng, removed);
            result.extend_from_slice(chosen);
        } else {
            let mut inserted = 0;
            while inserted < removed {
                let u = rng.gen_range(0..n);
                let v = rng.gen_range(0..n);
                if u == v {
                    continue;
                }
                let e = key(u, v);
                if present.insert(e) {
                    result.push(e);
                    inserted += 1;
                }
            }
        }
        Graph::from_edges(
            &result,
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
            self.undirected,
        )
    }

    /// Subgraph induced by `nodes`, relabeled to `0..len` in ascending order of
    /// original id. Returns the graph and the new-to-old id mapping.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<(Graph, Vec<usize>)> {
        let mut keep: Vec<usize> = nodes.to_vec();
        keep.sort_unstable();
        keep.dedup();
        if keep.is_empty() {
            return Err(Error::input("induced_subgraph needs a non-empty node set"));
        }
        if let Some(&bad) = keep.iter().find(|&&u| u >= self.num_nodes) {
            return Err(Error::input(format!(
                "node {bad} outside [0, {})",
                self.num_nodes
            )));
        }
        let mut new_id = vec![usize::MAX; self.num_nodes];
        for (i, &u) in keep.iter().enumerate() {
            new_id[u] = i;
        }
        let mut edges = Vec::new();
        for &u in &keep {
            for &v in self.neighbors(u) {
                if new_id[v] != usize::MAX {
                    edges.push((new_id[u], new_id[v]));
                }
            }
        }
        let features = self.features.select(Axis(0), &keep);
        let labels = keep.iter().map(|&u| self.labels[u]).collect();
        // Stored entries are already symmetric, so no re-symmetrization needed.
        let mut g = Graph::from_edges(&edges, features, labels, self.num_classes, false)?;
        g.undirected = self.undirected;
        Ok((g, keep))
    }
}

/// Row-stochastic class-to-class neighbor matrix: entry `(i, j)` is the
/// fraction of edges leaving class-`i` nodes that land on class-`j` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborLabelDistribution {
    pub matrix: Array2<f64>,
}

impl NeighborLabelDistribution {
    pub fn num_classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn frobenius_distance(&self, other: &Self) -> Result<f64> {
        if self.matrix.dim() != other.matrix.dim() {
            return Err(Error::input(format!(
                "class counts differ: {} vs {}",
                self.num_classes(),
                other.num_classes()
            )));
        }
        Ok((&self.matrix - &other.matrix)
            .iter()
            .map(|d| d * d)
            .sum::<f64>()
            .sqrt())
    }
}

/// Disjoint train / validation / test node masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSplit {
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

impl NodeSplit {
    /// Shuffles nodes into five near-equal groups: three train, one
    /// validation, one test.
    pub fn five_groups(num_nodes: usize, rng: &mut Rng) -> Result<Self> {
        if num_nodes < 5 {
            return Err(Error::input(format!(
                "a five-group split needs at least 5 nodes, got {num_nodes}"
            )));
        }
        let mut order: Vec<usize> = (0..num_nodes).collect();
        order.shuffle(rng);
        let mut split = Self {
            train_mask: vec![false; num_nodes],
            val_mask: vec![false; num_nodes],
            test_mask: vec![false; num_nodes],
        };
        for (pos, &u) in order.iter().enumerate() {
            match pos % 5 {
                0..=2 => split.train_mask[u] = true,
                3 => split.val_mask[u] = true,
                _ => split.test_mask[u] = true,
            }
        }
        Ok(split)
    }

    pub fn len(&self) -> usize {
        self.train_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_mask.is_empty()
    }

    /// `(train, val, test)` sizes.
    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |m: &[bool]| m.iter().filter(|&&b| b).count();
        (c(&self.train_mask), c(&self.val_mask), c(&self.test_mask))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.train_mask.len();
        if self.val_mask.len() != n || self.test_mask.len() != n {
            return Err(Error::input("split masks differ in length"));
        }
        for i in 0..n {
            let hits = self.train_mask[i] as u8 + self.val_mask[i] as u8 + self.test_mask[i] as u8;
            if hits > 1 {
                return Err(Error::input(format!("node {i} is in more than one split")));
            }
        }
        Ok(())
    }
}

/// Collects rows into a dense matrix, rejecting ragged input.
pub fn features_from_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != d) {
        return Err(Error::input(format!(
            "feature row {i} has {} values, expected {d}",
            rows[i].len()
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), d), flat).expect("checked shape"))
}
