//! Planted-partition generator for heterophilic graphs with equal expected
//! degree across classes, and a multi-client variant whose clients disagree
//! on which classes neighbor each other.
//!
//! Edges: every node initiates `mean_degree / 2` undirected edges (the
//! fractional part is drawn as a Bernoulli extra edge). The far endpoint's
//! class is drawn from the initiator's row of the class-mixing matrix and the
//! node uniformly within that class; self-loops and duplicates are rejected
//! and redrawn. With a doubly stochastic mixing matrix every class has the
//! same expected degree.
//!
//! Features: isotropic unit-variance Gaussian blobs around class means that
//! sit on a centered regular simplex with pairwise distance
//! `feature_separation`.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{seeded, stream_seed, Rng};

/// Square row-stochastic class mixing matrix, stored row-major.
pub type MixingMatrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub target_homophily: f64,
    pub mean_degree: f64,
    pub feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_mixing: Option<MixingMatrix>,
    pub feature_separation: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_nodes: 1000,
            num_classes: 5,
            target_homophily: 0.2,
            mean_degree: 10.0,
            feature_dim: 16,
            class_mixing: None,
            feature_separation: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_nodes < self.num_classes {
            return Err(Error::input(format!(
                "need at least one node per class ({} nodes, {} classes)",
                self.num_nodes, self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.target_homophily) {
            return Err(Error::input("target_homophily must lie in [0, 1]"));
        }
        if self.num_classes == 1 && self.target_homophily < 1.0 {
            return Err(Error::input("a single class forces homophily 1"));
        }
        if !(self.mean_degree >= 1.0) {
            return Err(Error::input("mean_degree must be at least 1"));
        }
        if self.mean_degree >= self.num_nodes as f64 {
            return Err(Error::input(format!(
                "mean_degree {} is infeasible for {} nodes",
                self.mean_degree, self.num_nodes
            )));
        }
        if self.feature_dim < self.num_classes {
            return Err(Error::input(format!(
                "feature_dim ({}) must be at least num_classes ({})",
                self.feature_dim, self.num_classes
            )));
        }
        if let Some(m) = &self.class_mixing {
            validate_mixing(m, self.num_classes)?;
        }
        Ok(())
    }

    /// The mixing matrix in effect: the override if present, otherwise
    /// [`default_mixing`].
    pub fn mixing(&self) -> MixingMatrix {
        self.class_mixing
            .clone()
            .unwrap_or_else(|| default_mixing(self.num_classes, self.target_homophily))
    }
}

pub fn validate_mixing(m: &MixingMatrix, c: usize) -> Result<()> {
    if m.len() != c || m.iter().any(|r| r.len() != c) {
        return Err(Error::input(format!("class_mixing must be {c}×{c}")));
    }
    for (i, row) in m.iter().enumerate() {
        if row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::input(format!("class_mixing row {i} has a negative entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!("class_mixing row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// `h` on the diagonal, `(1 - h) / (C - 1)` elsewhere.
pub fn default_mixing(c: usize, h: f64) -> MixingMatrix {
    let off = if c > 1 { (1.0 - h) / (c as f64 - 1.0) } else { 0.0 };
    (0..c)
        .map(|i| (0..c).map(|j| if i == j { h } else { off }).collect())
        .collect()
}

/// Class shift applied to client `client`'s off-diagonal mass.
pub fn rotation_shift(client: usize, num_classes: usize) -> usize {
    1 + client % (num_classes - 1)
}

/// Client-specific mixing: the diagonal of `base` is kept, and the
/// off-diagonal mass of row `c` is moved onto class
/// `(c + rotation_shift(client)) mod C`, then blended with `base` by
/// `strength`.
pub fn rotated_mixing(base: &MixingMatrix, client: usize, strength: f64) -> MixingMatrix {
    let c = base.len();
    let shift = rotation_shift(client, c);
    (0..c)
        .map(|i| {
            (0..c)
                .map(|j| {
                    let rotated = if i == j {
                        base[i][i]
                    } else if j == (i + shift) % c {
                        1.0 - base[i][i]
                    } else {
                        0.0
                    };
                    (1.0 - strength) * base[i][j] + strength * rotated
                })
                .collect()
        })
        .collect()
}

/// Class means on a centered regular simplex with pairwise distance `sep`,
/// embedded in the first `C` of `d` coordinates.
pub fn class_means(c: usize, d: usize, sep: f64) -> Array2<f64> {
    let scale = sep / std::f64::consts::SQRT_2;
    let mut means = Array2::zeros((c, d));
    for k in 0..c {
        for j in 0..c {
            let e = if j == k { 1.0 } else { 0.0 };
            means[[k, j]] = scale * (e - 1.0 / c as f64);
        }
    }
    means
}

pub fn generate_graph(cfg: &GeneratorConfig) -> Result<Graph> {
    cfg.validate()?;
    generate_with_mixing(cfg, &cfg.mixing(), &mut seeded(cfg.seed))
}

fn generate_with_mixing(cfg: &GeneratorConfig, mixing: &MixingMatrix, rng: &mut Rng) -> Result<Graph> {
    let n = cfg.num_nodes;
    let c = cfg.num_classes;
    validate_mixing(mixing, c)?;

    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(rng);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (u, &y) in labels.iter().enumerate() {
        members[y].push(u);
    }

    let half = cfg.mean_degree / 2.0;
    let base = half.floor() as usize;
    let frac = half - half.floor();
    let mut present = std::collections::HashSet::new();
    let mut edges = Vec::with_capacity(n * (base + 1));
    for u in 0..n {
        let count = base + usize::from(frac > 0.0 && rng.gen_bool(frac));
        let row = &mixing[labels[u]];
        for _ in 0..count {
            // Bounded retries keep tiny or saturated classes from spinning.
            for _ in 0..64 {
                let target_class = sample_row(row, rng);
                let pool = &members[target_class];
                let v = pool[rng.gen_range(0..pool.len())];
                if v == u {
                    continue;
                }
                let key = (u.min(v), u.max(v));
                if present.insert(key) {
                    edges.push(key);
                    break;
                }
            }
        }
    }

    let means = class_means(c, cfg.feature_dim, cfg.feature_separation);
    let mut features = Array2::<f64>::zeros((n, cfg.feature_dim));
    for u in 0..n {
        for j in 0..cfg.feature_dim {
            let z: f64 = StandardNormal.sample(rng);
            features[[u, j]] = means[[labels[u], j]] + z;
        }
    }
    Graph::from_edges(&edges, features, labels, c, true)
}

fn sample_row(row: &[f64], rng: &mut Rng) -> usize {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if r < acc {
            return j;
        }
    }
    // Rounding slack: fall back to the last class with positive mass.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Graphs for `m` clients that share classes and feature distributions but
/// have rotated class-mixing matrices.
#[derive(Debug, Clone)]
pub struct ConflictingClients {
    pub graphs: Vec<Graph>,
    pub mixings: Vec<MixingMatrix>,
}

pub fn generate_conflicting_clients(
    cfg: &GeneratorConfig,
    m: usize,
    conflict_strength: f64,
) -> Result<ConflictingClients> {
    cfg.validate()?;
    if m < 2 {
        return Err(Error::input("need at least two clients"));
    }
    if cfg.num_classes < 2 {
        return Err(Error::input("need at least two classes"));
    }
    if !(0.0..=1.0).contains(&conflict_strength) {
        return Err(Error::input("conflict_strength must lie in [0, 1]"));
    }
    let base = cfg.mixing();
    let mut graphs = Vec::with_capacity(m);
    let mut mixings = Vec::with_capacity(m);
    for i in 0..m {
        let mixing = rotated_mixing(&base, i, conflict_strength);
        let mut rng = seeded(stream_seed(cfg.seed, "client-graph", i as u64));
        graphs.push(generate_with_mixing(cfg, &mixing, &mut rng)?);
        mixings.push(mixing);
    }
    Ok(ConflictingClients { graphs, mixings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, c: usize, h: f64, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            num_nodes: n,
            num_classes: c,
            target_homophily: h,
            mean_degree: 10.0,
            feature_dim: c.max(4),
            class_mixing: None,
            feature_separation: 1.0,
            seed,
        }
    }

    #[test]
    fn homophily_endpoints_are_exact() {
        let g = generate_graph(&cfg(400, 2, 1.0, 1)).unwrap();
        assert_eq!(g.edge_homophily().unwrap(), 1.0);
        let g = generate_graph(&cfg(400, 2, 0.0, 1)).unwrap();
        assert_eq!(g.edge_homophily().unwrap(), 0.0);
    }

    #[test]
    fn balanced_classes_and_determinism() {
        let a = generate_graph(&cfg(103, 5, 0.3, 4)).unwrap();
        let counts = a.class_counts();
        assert!(counts.iter().all(|&k| k == 20 || k == 21));
        assert_eq!(counts.iter().sum::<usize>(), 103);
        assert_eq!(a, generate_graph(&cfg(103, 5, 0.3, 4)).unwrap());
        a.validate().unwrap();
    }

    #[test]
    fn infeasible_degree() {
        let mut c = cfg(10, 2, 0.5, 0);
        c.mean_degree = 10.0;
        assert!(generate_graph(&c).is_err());
        c.mean_degree = 0.5;
        assert!(generate_graph(&c).is_err());
    }

    #[test]
    fn simplex_means_have_requested_spacing() {
        let m = class_means(5, 8, 1.0);
        for a in 0..5 {
            for b in 0..a {
                let d: f64 = (&m.row(a) - &m.row(b)).mapv(|x| x * x).sum().sqrt();
                assert!((d - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_targets() {
        let base = default_mixing(3, 0.2);
        let m0 = rotated_mixing(&base, 0, 1.0);
        let m1 = rotated_mixing(&base, 1, 1.0);
        assert!((m0[0][1] - 0.8).abs() < 1e-12 && m0[0][2] == 0.0);
        assert!((m1[0][2] - 0.8).abs() < 1e-12 && m1[0][1] == 0.0);
        assert_eq!(rotated_mixing(&base, 1, 0.0), base);
        for row in rotated_mixing(&base, 1, 0.4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conflicting_clients_share_class_counts() {
        let out = generate_conflicting_clients(&cfg(200, 3, 0.2, 2), 2, 0.7).unwrap();
        assert_eq!(out.graphs[0].class_counts(), out.graphs[1].class_counts());
        assert!(generate_conflicting_clients(&cfg(200, 3, 0.2, 2), 1, 0.7).is_err());
    }
}
