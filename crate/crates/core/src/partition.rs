//! Splitting one graph into per-client subgraphs.
//!
//! Two partitioners are provided: Louvain modularity maximization followed
//! by merging of undersized communities, and a balanced graph-growing
//! partitioner (multi-source BFS with greedy boundary refinement) that
//! stands in for METIS. The latter is always reported as `balanced`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeSplit};
use crate::rng::{seeded, stream_seed};

/// Non-overlapping assignment of nodes to clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionAssignment {
    pub client_of: Vec<usize>,
    pub num_clients: usize,
}

impl PartitionAssignment {
    /// Relabels arbitrary community ids to `0..M` in order of first appearance.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map = HashMap::new();
        let client_of = labels
            .iter()
            .map(|&l| {
                let next = map.len();
                *map.entry(l).or_insert(next)
            })
            .collect();
        Self {
            client_of,
            num_clients: map.len(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_clients];
        for &c in &self.client_of {
            s[c] += 1;
        }
        s
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.num_clients];
        for (u, &c) in self.client_of.iter().enumerate() {
            m[c].push(u);
        }
        m
    }

    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.client_of.len() != num_nodes {
            return Err(Error::input(format!(
                "assignment covers {} nodes, graph has {num_nodes}",
                self.client_of.len()
            )));
        }
        if self.client_of.iter().any(|&c| c >= self.num_clients) {
            return Err(Error::input("client id out of range"));
        }
        if let Some(c) = self.sizes().iter().position(|&s| s == 0) {
            return Err(Error::input(format!("client {c} has no nodes")));
        }
        Ok(())
    }

    /// Number of stored adjacency entries that cross clients.
    pub fn cut_entries(&self, g: &Graph) -> usize {
        (0..g.num_nodes())
            .map(|u| {
                g.neighbors(u)
                    .iter()
                    .filter(|&&v| self.client_of[u] != self.client_of[v])
                    .count()
            })
            .sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("node_id,client_id\n");
        for (u, c) in self.client_of.iter().enumerate() {
            text.push_str(&format!("{u},{c}\n"));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut pairs = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let parse = |j: usize| -> Result<usize> {
                rec.get(j)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Parse {
                        file: path.to_path_buf(),
                        line: i + 2,
                        msg: "expected node_id,client_id".into(),
                    })
            };
            pairs.push((parse(0)?, parse(1)?));
        }
        pairs.sort_unstable();
        if pairs.iter().enumerate().any(|(i, &(u, _))| i != u) {
            return Err(Error::input("assignment csv must list every node exactly once"));
        }
        let client_of: Vec<usize> = pairs.into_iter().map(|(_, c)| c).collect();
        let num_clients = client_of.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            client_of,
            num_clients,
        })
    }
}

/// Newman modularity of `assignment` on an unweighted undirected graph.
pub fn modularity(g: &Graph, community_of: &[usize]) -> f64 {
    let two_m = g.num_entries() as f64;
    if two_m == 0.0 {
        return 0.0;
    }
    let k = community_of.iter().max().map_or(0, |m| m + 1);
    let mut intra = vec![0.0; k];
    let mut tot = vec![0.0; k];
    for u in 0..g.num_nodes() {
        let cu = community_of[u];
        tot[cu] += g.degree(u) as f64;
        for &v in g.neighbors(u) {
            if community_of[v] == cu {
                intra[cu] += 1.0;
            }
        }
    }
    intra
        .iter()
        .zip(&tot)
        .map(|(&a, &t)| a / two_m - (t / two_m).powi(2))
        .sum()
}

/// Weighted symmetric graph used between Louvain levels. `adj[i]` holds
/// `(j, A_ij)` with `A_ii` (ordered-pair convention) included.
struct LevelGraph {
    adj: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
    two_m: f64,
}

impl LevelGraph {
    fn from_graph(g: &Graph) -> Self {
        let adj: Vec<Vec<(usize, f64)>> = (0..g.num_nodes())
            .map(|u| g.neighbors(u).iter().map(|&v| (v, 1.0)).collect())
            .collect();
        Self::with_adj(adj)
    }

    fn with_adj(adj: Vec<Vec<(usize, f64)>>) -> Self {
        let degree: Vec<f64> = adj.iter().map(|r| r.iter().map(|e| e.1).sum()).collect();
        let two_m = degree.iter().sum();
        Self { adj, degree, two_m }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn modularity(&self, community: &[usize]) -> f64 {
        let k = community.iter().max().map_or(0, |m| m + 1);
        let mut intra = vec![0.0; k];
        let mut tot = vec![0.0; k];
        for i in 0..self.len() {
            tot[community[i]] += self.degree[i];
            for &(j, w) in &self.adj[i] {
                if community[i] == community[j] {
                    intra[community[i]] += w;
                }
            }
        }
        intra
            .iter()
            .zip(&tot)
            .map(|(&a, &t)| a / self.two_m - (t / self.two_m).powi(2))
            .sum()
    }

    /// One local-moving phase. Returns compacted community ids and whether any
    /// node moved.
    fn local_moves(&self, rng: &mut crate::rng::Rng) -> (Vec<usize>, bool) {
        let n = self.len();
        let mut community: Vec<usize> = (0..n).collect();
        let mut tot = self.degree.clone();
        let mut order: Vec<usize> = (0..n).collect();
        let mut moved_any = false;
        let mut link = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        loop {
            order.shuffle(rng);
            let mut moved = false;
            for &i in &order {
                let ci = community[i];
                let ki = self.degree[i];
                for &(j, w) in &self.adj[i] {
                    if j == i {
                        continue;
                    }
                    let cj = community[j];
                    if link[cj] == 0.0 {
                        touched.push(cj);
                    }
                    link[cj] += w;
                }
                tot[ci] -= ki;
                let gain = |c: usize, link_c: f64| link_c - tot[c] * ki / self.two_m;
                let mut best = ci;
                let mut best_gain = gain(ci, link[ci]);
                for &c in &touched {
                    let g = gain(c, link[c]);
                    if g > best_gain + 1e-12 || (g >= best_gain - 1e-12 && c < best && best != ci)
                    {
                        best = c;
                        best_gain = g;
                    }
                }
                tot[best] += ki;
                if best != ci {
                    community[i] = best;
                    moved = true;
                    moved_any = true;
                }
                for &c in &touched {
                    link[c] = 0.0;
                }
                touched.clear();
            }
            if !moved {
                break;
            }
        }
        let compact = PartitionAssignment::from_labels(&community).client_of;
        (compact, moved_any)
    }

    fn aggregate(&self, community: &[usize]) -> Self {
        let k = community.iter().max().map_or(0, |m| m + 1);
        let mut maps: Vec<HashMap<usize, f64>> = vec![HashMap::new(); k];
        for i in 0..self.len() {
            for &(j, w) in &self.adj[i] {
                *maps[community[i]].entry(community[j]).or_insert(0.0) += w;
            }
        }
        let adj = maps
            .into_iter()
            .map(|m| {
                let mut row: Vec<(usize, f64)> = m.into_iter().collect();
                row.sort_unstable_by_key(|e| e.0);
                row
            })
            .collect();
        Self::with_adj(adj)
    }
}

/// Louvain community detection (resolution 1). The node visit order of every
/// local-moving sweep is shuffled from `seed`.
pub fn louvain(g: &Graph, seed: u64) -> Result<PartitionAssignment> {
    louvain_with_trace(g, seed).map(|(pa, _)| pa)
}

/// Louvain plus the modularity of the original graph after each level.
pub fn louvain_with_trace(g: &Graph, seed: u64) -> Result<(PartitionAssignment, Vec<f64>)> {
    if !g.is_undirected() {
        return Err(Error::input("louvain requires an undirected graph"));
    }
    if g.num_edges() == 0 {
        return Err(Error::input("louvain requires at least one edge"));
    }
    let mut rng = seeded(seed);
    let mut level = LevelGraph::from_graph(g);
    let mut node_comm: Vec<usize> = (0..g.num_nodes()).collect();
    let mut trace = vec![modularity(g, &node_comm)];
    loop {
        let before = level.modularity(&(0..level.len()).collect::<Vec<_>>());
        let (community, moved) = level.local_moves(&mut rng);
        if !moved {
            break;
        }
        let after = level.modularity(&community);
        for c in node_comm.iter_mut() {
            *c = community[*c];
        }
        trace.push(modularity(g, &node_comm));
        if after - before < 1e-10 {
            break;
        }
        level = level.aggregate(&community);
    }
    Ok((PartitionAssignment::from_labels(&node_comm), trace))
}

/// Merges every community smaller than `min_size` wholesale into a uniformly
/// chosen community that meets the threshold.
pub fn merge_small_communities(
    g: &Graph,
    pa: &PartitionAssignment,
    min_size: usize,
    seed: u64,
) -> Result<PartitionAssignment> {
    pa.validate(g.num_nodes())?;
    let sizes = pa.sizes();
    let large: Vec<usize> = (0..pa.num_clients)
        .filter(|&c| sizes[c] >= min_size)
        .collect();
    if large.is_empty() {
        let biggest = sizes.iter().max().copied().unwrap_or(0);
        return Err(Error::input(format!(
            "no community has at least {min_size} nodes (largest has {biggest}); \
             use a smaller min_size"
        )));
    }
    let mut rng = seeded(seed);
    let mut target = vec![usize::MAX; pa.num_clients];
    for (new_id, &c) in large.iter().enumerate() {
        target[c] = new_id;
    }
    for c in 0..pa.num_clients {
        if target[c] == usize::MAX {
            target[c] = rng.gen_range(0..large.len());
        }
    }
    Ok(PartitionAssignment {
        client_of: pa.client_of.iter().map(|&c| target[c]).collect(),
        num_clients: large.len(),
    })
}

/// Largest allowed deviation of a part size from `N/m`.
pub fn balance_tolerance(num_nodes: usize, m: usize) -> usize {
    (0.05 * num_nodes as f64 / m as f64).floor() as usize
}

/// Balanced `m`-way partition: farthest-first seeds, round-robin BFS growth to
/// exact target sizes, then greedy single-node moves that strictly reduce the
/// cut while keeping every part within [`balance_tolerance`] of `N/m`.
pub fn balanced_partition(g: &Graph, m: usize, seed: u64) -> Result<PartitionAssignment> {
    let n = g.num_nodes();
    if m == 0 || m > n {
        return Err(Error::input(format!(
            "cannot split {n} nodes into {m} parts"
        )));
    }
    let mut rng = seeded(seed);
    let targets: Vec<usize> = (0..m).map(|i| n / m + usize::from(i < n % m)).collect();

    // Farthest-first seeds; unreachable nodes count as infinitely far.
    let mut seeds = vec![rng.gen_range(0..n)];
    let mut dist = bfs_distances(g, &seeds);
    while seeds.len() < m {
        let far = dist.iter().copied().max().unwrap_or(0);
        let candidates: Vec<usize> = (0..n)
            .filter(|&u| dist[u] == far && !seeds.contains(&u))
            .collect();
        let next = candidates[rng.gen_range(0..candidates.len())];
        seeds.push(next);
        let d_new = bfs_distances(g, &[next]);
        for u in 0..n {
            dist[u] = dist[u].min(d_new[u]);
        }
    }

    const UNASSIGNED: usize = usize::MAX;
    let mut part = vec![UNASSIGNED; n];
    let mut sizes = vec![0usize; m];
    let mut frontiers: Vec<std::collections::VecDeque<usize>> = seeds
        .iter()
        .map(|&s| std::collections::VecDeque::from([s]))
        .collect();
    let mut assigned = 0;
    while assigned < n {
        for p in 0..m {
            if sizes[p] >= targets[p] {
                continue;
            }
            let mut placed = false;
            while let Some(u) = frontiers[p].pop_front() {
                if part[u] != UNASSIGNED {
                    continue;
                }
                part[u] = p;
                sizes[p] += 1;
                assigned += 1;
                frontiers[p].extend(g.neighbors(u).iter().filter(|&&v| part[v] == UNASSIGNED));
                placed = true;
                break;
            }
            if !placed {
                // Component exhausted: restart this part from a random free node.
                let free: Vec<usize> = (0..n).filter(|&u| part[u] == UNASSIGNED).collect();
                if let Some(&u) = free.get(rng.gen_range(0..free.len().max(1))) {
                    part[u] = p;
                    sizes[p] += 1;
                    assigned += 1;
                    frontiers[p].extend(g.neighbors(u).iter().filter(|&&v| part[v] == UNASSIGNED));
                }
            }
            if assigned == n {
                break;
            }
        }
    }

    refine_boundary(g, &mut part, &mut sizes, balance_tolerance(n, m));
    Ok(PartitionAssignment {
        client_of: part,
        num_clients: m,
    })
}

fn bfs_distances(g: &Graph, sources: &[usize]) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.num_nodes()];
    let mut queue = std::collections::VecDeque::new();
    for &s in sources {
        dist[s] = 0;
        queue.push_back(s);
    }
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

fn refine_boundary(g: &Graph, part: &mut [usize], sizes: &mut [usize], tol: usize) {
    let n = g.num_nodes();
    let m = sizes.len();
    let ideal = n as f64 / m as f64;
    let within = |s: usize| (s as f64 - ideal).abs() <= tol as f64;
    let mut counts = vec![0usize; m];
    for _ in 0..50 {
        let mut improved = false;
        for u in 0..n {
            let own = part[u];
            for &v in g.neighbors(u) {
                counts[part[v]] += 1;
            }
            let mut best = own;
            let mut best_gain = 0isize;
            for p in 0..m {
                if p == own || counts[p] == 0 {
                    continue;
                }
                let gain = counts[p] as isize - counts[own] as isize;
                if gain > best_gain && sizes[own] > 1 && within(sizes[own] - 1) && within(sizes[p] + 1) {
                    best = p;
                    best_gain = gain;
                }
            }
            for &v in g.neighbors(u) {
                counts[part[v]] = 0;
            }
            if best != own {
                part[u] = best;
                sizes[own] -= 1;
                sizes[best] += 1;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
}

/// One client's share of a partitioned graph.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub graph: Graph,
    pub split: NodeSplit,
    /// Original node id of every local node.
    pub global_ids: Vec<usize>,
}

/// Induces each client's subgraph and draws its seeded five-group split.
pub fn make_federated_dataset(
    g: &Graph,
    pa: &PartitionAssignment,
    seed: u64,
) -> Result<Vec<ClientData>> {
    pa.validate(g.num_nodes())?;
    pa.members()
        .iter()
        .enumerate()
        .map(|(c, nodes)| {
            if nodes.len() < 5 {
                return Err(Error::input(format!(
                    "client {c} has {} nodes; at least 5 are needed for a split",
                    nodes.len()
                )));
            }
            let (graph, global_ids) = g.induced_subgraph(nodes)?;
            let mut rng = seeded(stream_seed(seed, "split", c as u64));
            let split = NodeSplit::five_groups(graph.num_nodes(), &mut rng)?;
            Ok(ClientData {
                graph,
                split,
                global_ids,
            })
        })
        .collect()
}

/// Wraps independently generated client graphs as a federated dataset,
/// drawing each client's split from the same seeded streams as
/// [`make_federated_dataset`].
pub fn client_data_from_graphs(graphs: Vec<Graph>, seed: u64) -> Result<Vec<ClientData>> {
    graphs
        .into_iter()
        .enumerate()
        .map(|(c, graph)| {
            let mut rng = seeded(stream_seed(seed, "split", c as u64));
            let split = NodeSplit::five_groups(graph.num_nodes(), &mut rng)?;
            let global_ids = (0..graph.num_nodes()).collect();
            Ok(ClientData {
                graph,
                split,
                global_ids,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::from_edges(edges, Array2::zeros((n, 1)), vec![0; n], 1, true).unwrap()
    }

    fn two_triangles() -> Graph {
        graph(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)])
    }

    #[test]
    fn louvain_small_cases() {
        let pa = louvain(&two_triangles(), 3).unwrap();
        assert_eq!(pa.num_clients, 2);
        assert_eq!(pa.client_of[0], pa.client_of[2]);
        assert_ne!(pa.client_of[0], pa.client_of[3]);
        let k4 = graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(louvain(&k4, 0).unwrap().num_clients, 1);
        assert!(louvain(&graph(3, &[]), 0).is_err());
        let directed =
            Graph::from_edges(&[(0, 1)], Array2::zeros((2, 1)), vec![0, 0], 1, false).unwrap();
        assert!(louvain(&directed, 0).is_err());
    }

    #[test]
    fn merge_examples() {
        let n = 130;
        let g = graph(n, &[]);
        let labels: Vec<usize> = (0..n).map(|u| if u < 60 { 0 } else if u < 120 { 1 } else { 2 }).collect();
        let pa = PartitionAssignment::from_labels(&labels);
        let merged = merge_small_communities(&g, &pa, 50, 1).unwrap();
        assert_eq!(merged.num_clients, 2);
        let s = merged.sizes();
        assert!(s == vec![70, 60] || s == vec![60, 70]);
        let same = merge_small_communities(&g, &pa, 10, 1).unwrap();
        assert_eq!(same, pa);
        assert!(merge_small_communities(&g, &pa, 100, 1).is_err());
    }

    #[test]
    fn balanced_extremes() {
        let g = two_triangles();
        let one = balanced_partition(&g, 1, 0).unwrap();
        assert_eq!(one.sizes(), vec![6]);
        let all = balanced_partition(&g, 6, 0).unwrap();
        assert_eq!(all.sizes(), vec![1; 6]);
        assert!(balanced_partition(&g, 7, 0).is_err());
        let halves = balanced_partition(&g, 2, 5).unwrap();
        assert_eq!(halves.cut_entries(&g), 0);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pa = PartitionAssignment::from_labels(&[4, 4, 9, 1]);
        let p = dir.path().join("pa.csv");
        pa.write_csv(&p).unwrap();
        assert_eq!(PartitionAssignment::read_csv(&p).unwrap(), pa);
    }

    #[test]
    fn dataset_requires_five_nodes() {
        let g = graph(6, &[]);
        let pa = PartitionAssignment::from_labels(&[0, 0, 0, 0, 0, 1]);
        assert!(make_federated_dataset(&g, &pa, 0).is_err());
    }
}
