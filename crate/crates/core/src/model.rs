//! Dual-channel GNN with a learned latent graph.
//!
//! Layout of one forward pass:
//!
//! ```text
//! Z_sl = relu(Â X W_sl)                        structure-learner embeddings
//! φ(u,v) = mean_h cos(w¹_h ⊙ z_u, w²_h ⊙ z_v)  pairwise metric
//! Ã     = top-k of φ per node, weights kept    latent graph
//! Z⁰    = relu(X W_f0)
//! Eˡ    = Â Zˡ⁻¹ W_locˡ,  Hˡ = norm(Ã) Zˡ⁻¹ W_gˡ
//! Zˡ    = relu(α Eˡ + (1 − α) Hˡ)
//! logits = [X, Z⁰, …, Z^L] W_c
//! ```
//!
//! `Â` is the mean-aggregation adjacency and `norm(Ã)` divides every retained
//! weight by the absolute row sum. The `Plain` architecture drops the
//! structure learner and the global layers, which leaves a mean-aggregation
//! GNN with the same readout.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine, grad_check, scale_columns, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::graph::Graph;
use crate::io::{read_json, write_json};
use crate::optim::AdamState;
use crate::rng::{seeded, Rng};
use crate::sparse::CsrPattern;

pub const F0: &str = "f0";
pub const SL_GNN: &str = "sl_gnn";
pub const SL_HEADS: &str = "sl_heads";
pub const CLASSIFIER: &str = "classifier";

pub fn global_layer(l: usize) -> String {
    format!("global_{l}")
}

pub fn local_layer(l: usize) -> String {
    format!("local_{l}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    DualChannel,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MultiHead,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sparsifier {
    /// Top-k per node, retained φ values as edge weights.
    #[serde(alias = "topk")]
    TopK,
    /// Top-k per node, unit edge weights, straight-through gradient.
    #[serde(alias = "topk_binary")]
    TopKBinary,
    /// Every ordered pair kept with probability `(φ + 1) / 2`.
    Bernoulli,
}

impl std::str::FromStr for Sparsifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" | "top_k" => Ok(Self::TopK),
            "topk_binary" | "top_k_binary" | "binary" => Ok(Self::TopKBinary),
            "bernoulli" => Ok(Self::Bernoulli),
            _ => Err(Error::Usage(format!(
                "unknown sparsifier `{s}` (expected topk, topk_binary or bernoulli)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub alpha: f64,
    pub lambda_smooth: f64,
    pub mu_smooth: f64,
    pub k_neighbors: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub sparsifier: Sparsifier,
    pub metric: Metric,
    pub architecture: Architecture,
    pub f0_channel: Channel,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            lambda_smooth: 0.1,
            mu_smooth: 0.1,
            k_neighbors: 20,
            num_heads: 4,
            num_layers: 2,
            hidden_dim: 32,
            learning_rate: 0.005,
            sparsifier: Sparsifier::TopK,
            metric: Metric::MultiHead,
            architecture: Architecture::DualChannel,
            f0_channel: Channel::Local,
        }
    }
}

impl Hyperparams {
    /// Single-channel GNN over the original graph: `α = 1`, no structure
    /// learner, no smoothness terms.
    pub fn plain(&self) -> Self {
        Self {
            alpha: 1.0,
            lambda_smooth: 0.0,
            mu_smooth: 0.0,
            architecture: Architecture::Plain,
            ..self.clone()
        }
    }

    pub fn is_dual(&self) -> bool {
        self.architecture == Architecture::DualChannel
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::input(format!("hyperparameter {m}")));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.lambda_smooth >= 0.0) || !(self.mu_smooth >= 0.0) {
            return bad("lambda and mu must be non-negative");
        }
        if self.k_neighbors == 0 {
            return bad("k must be positive");
        }
        if self.num_heads == 0 || self.num_layers == 0 || self.hidden_dim == 0 {
            return bad("heads, layers and hidden_dim must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    /// Width of `[X, Z⁰, …, Z^L]`.
    pub fn readout_dim(&self, feature_dim: usize) -> usize {
        feature_dim + self.hidden_dim * (self.num_layers + 1)
    }
}

/// Named weight blocks of one client's model and the channel each belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    blocks: BTreeMap<String, Array2<f64>>,
    channel_of: BTreeMap<String, Channel>,
}

impl ModelParams {
    /// Seeded initialization: weights uniform in `±1/√fan_in`, head vectors
    /// `1 + U(±0.01)`. Clients that share a seed start identical.
    pub fn init(hp: &Hyperparams, feature_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        hp.validate()?;
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::input("feature_dim and num_classes must be positive"));
        }
        let h = hp.hidden_dim;
        let mut shapes: Vec<(String, (usize, usize), Channel)> = vec![
            (F0.into(), (feature_dim, h), hp.f0_channel),
            (CLASSIFIER.into(), (hp.readout_dim(feature_dim), num_classes), Channel::Local),
        ];
        for l in 1..=hp.num_layers {
            shapes.push((local_layer(l), (h, h), Channel::Local));
        }
        if hp.is_dual() {
            shapes.push((SL_GNN.into(), (feature_dim, h), Channel::Global));
            if hp.metric == Metric::MultiHead {
                shapes.push((SL_HEADS.into(), (2 * hp.num_heads, h), Channel::Global));
            }
            for l in 1..=hp.num_layers {
                shapes.push((global_layer(l), (h, h), Channel::Global));
            }
        }
        shapes.sort_by(|a, b| a.0.cmp(&b.0));

        let mut rng = seeded(seed);
        let mut blocks = BTreeMap::new();
        let mut channel_of = BTreeMap::new();
        for (name, (r, c), ch) in shapes {
            let value = if name == SL_HEADS {
                Array2::from_shape_fn((r, c), |_| 1.0 + rng.gen_range(-0.01..0.01))
            } else {
                let b = 1.0 / (r as f64).sqrt();
                Array2::from_shape_fn((r, c), |_| rng.gen_range(-b..b))
            };
            blocks.insert(name.clone(), value);
            channel_of.insert(name, ch);
        }
        Ok(Self { blocks, channel_of })
    }

    pub fn from_blocks(
        blocks: BTreeMap<String, Array2<f64>>,
        channel_of: BTreeMap<String, Channel>,
    ) -> Result<Self> {
        if blocks.keys().ne(channel_of.keys()) {
            return Err(Error::input("every block needs exactly one channel assignment"));
        }
        Ok(Self { blocks, channel_of })
    }

    pub fn block(&self, name: &str) -> Option<&Array2<f64>> {
        self.blocks.get(name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.blocks.get_mut(name)
    }

    fn require(&self, name: &str) -> Result<&Array2<f64>> {
        self.blocks
            .get(name)
            .ok_or_else(|| Error::Usage(format!("model has no `{name}` block")))
    }

    pub fn blocks(&self) -> &BTreeMap<String, Array2<f64>> {
        &self.blocks
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(String::as_str)
    }

    pub fn channel_of(&self) -> &BTreeMap<String, Channel> {
        &self.channel_of
    }

    pub fn channel(&self, name: &str) -> Option<Channel> {
        self.channel_of.get(name).copied()
    }

    pub fn set_channel(&mut self, name: &str, ch: Channel) -> Result<()> {
        match self.channel_of.get_mut(name) {
            Some(slot) => {
                *slot = ch;
                Ok(())
            }
            None => Err(Error::Usage(format!("model has no `{name}` block"))),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks.values().map(Array2::len).sum()
    }

    /// Same block names and shapes.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|((n1, a), (n2, b))| n1 == n2 && a.dim() == b.dim())
    }
}

/// Per-graph constants reused by every step on that graph.
#[derive(Debug, Clone)]
pub struct GraphContext {
    adjacency: Arc<CsrPattern>,
    adjacency_values: Array2<f64>,
    features: Array2<f64>,
    labels: Arc<Vec<usize>>,
    num_classes: usize,
}

impl GraphContext {
    pub fn new(g: &Graph) -> Self {
        let adj = g.mean_adjacency();
        let nnz = adj.values.len();
        Self {
            adjacency: adj.pattern,
            adjacency_values: Array2::from_shape_vec((nnz, 1), adj.values)
                .expect("one value per entry"),
            features: g.features().clone(),
            labels: Arc::new(g.labels().to_vec()),
            num_classes: g.num_classes(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Sparse learned graph: retained neighbors of every node with their
/// weights, plus the absolute-row-sum normalization used for propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGraph {
    pattern: Arc<CsrPattern>,
    weights: Vec<f64>,
    normalized: Vec<f64>,
}

impl LatentGraph {
    pub fn new(pattern: Arc<CsrPattern>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != pattern.nnz() {
            return Err(Error::input(format!(
                "{} weights for {} latent edges",
                weights.len(),
                pattern.nnz()
            )));
        }
        let mut normalized = vec![0.0; weights.len()];
        for r in 0..pattern.n_rows() {
            let range = pattern.row_range(r);
            let s: f64 = weights[range.clone()].iter().map(|w| w.abs()).sum();
            if s > 0.0 {
                for e in range {
                    normalized[e] = weights[e] / s;
                }
            }
        }
        Ok(Self {
            pattern,
            weights,
            normalized,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.pattern.n_rows()
    }

    pub fn pattern(&self) -> &Arc<CsrPattern> {
        &self.pattern
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn normalized_weights(&self) -> &[f64] {
        &self.normalized
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        self.pattern.row(u)
    }

    pub fn neighbor_weights(&self, u: usize) -> &[f64] {
        &self.weights[self.pattern.row_range(u)]
    }

    pub fn out_degree(&self, u: usize) -> usize {
        self.pattern.row(u).len()
    }

    pub fn num_entries(&self) -> usize {
        self.weights.len()
    }

    /// Same pattern with new weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(Arc::clone(&self.pattern), weights)
    }
}

fn head_rows(heads: &Array2<f64>, num_heads: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if heads.nrows() != 2 * num_heads {
        return Err(Error::shape(
            "pairwise_metric",
            format!("{} head rows for {num_heads} heads", heads.nrows()),
        ));
    }
    let w1 = (0..num_heads).map(|h| heads.row(h).to_vec()).collect();
    let w2 = (0..num_heads).map(|h| heads.row(num_heads + h).to_vec()).collect();
    Ok((w1, w2))
}

/// Scalar metric `φ(z_u, z_v)` computed one pair at a time.
pub fn pairwise_metric(params: &ModelParams, hp: &Hyperparams, z: &Array2<f64>, u: usize, v: usize) -> Result<f64> {
    let n = z.nrows();
    if u >= n || v >= n {
        return Err(Error::input(format!("node pair ({u}, {v}) out of range {n}")));
    }
    let zu = z.row(u).to_vec();
    let zv = z.row(v).to_vec();
    match hp.metric {
        Metric::Cosine => Ok(cosine(&zu, &zv)),
        Metric::MultiHead => {
            let (w1, w2) = head_rows(params.require(SL_HEADS)?, hp.num_heads)?;
            if w1[0].len() != zu.len() {
                return Err(Error::shape("pairwise_metric", "head width differs from embedding width"));
            }
            let mut total = 0.0;
            for h in 0..hp.num_heads {
                let a: Vec<f64> = zu.iter().zip(&w1[h]).map(|(x, w)| x * w).collect();
                let b: Vec<f64> = zv.iter().zip(&w2[h]).map(|(x, w)| x * w).collect();
                total += cosine(&a, &b);
            }
            Ok(total / hp.num_heads as f64)
        }
    }
}

fn normalize_rows(mut a: Array2<f64>) -> Array2<f64> {
    for mut row in a.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    a
}

/// Dense `N × N` matrix of φ for every ordered pair.
pub fn metric_matrix(params: &ModelParams, hp: &Hyperparams, z: &Array2<f64>) -> Result<Array2<f64>> {
    match hp.metric {
        Metric::Cosine => {
            let p = normalize_rows(z.clone());
            Ok(p.dot(&p.t()))
        }
        Metric::MultiHead => {
            let heads = params.require(SL_HEADS)?;
            head_rows(heads, hp.num_heads)?;
            if heads.ncols() != z.ncols() {
                return Err(Error::shape("metric_matrix", "head width differs from embedding width"));
            }
            let h = hp.num_heads;
            let views_p: Vec<Array2<f64>> =
                (0..h).map(|i| normalize_rows(scale_columns(z, &heads.row(i).to_vec()))).collect();
            let views_q: Vec<Array2<f64>> =
                (0..h).map(|i| normalize_rows(scale_columns(z, &heads.row(h + i).to_vec()))).collect();
            let p = ndarray::concatenate(
                ndarray::Axis(1),
                &views_p.iter().map(|a| a.view()).collect::<Vec<_>>(),
            )
            .map_err(|e| Error::shape("metric_matrix", e.to_string()))?;
            let q = ndarray::concatenate(
                ndarray::Axis(1),
                &views_q.iter().map(|a| a.view()).collect::<Vec<_>>(),
            )
            .map_err(|e| Error::shape("metric_matrix", e.to_string()))?;
            Ok(p.dot(&q.t()) / h as f64)
        }
    }
}

/// Keeps the `k` largest entries of every row of `phi`, excluding the
/// diagonal. Ties go to the smaller node id.
pub fn select_top_k(phi: &Array2<f64>, k: usize) -> Result<LatentGraph> {
    let n = phi.nrows();
    if k >= n {
        return Err(Error::input(format!("k = {k} must be smaller than the node count {n}")));
    }
    let mut rows = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n * k);
    // Best `k` candidates so far, ordered by descending φ then ascending id.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for u in 0..n {
        let row = phi.row(u);
        best.clear();
        for (v, &x) in row.iter().enumerate() {
            if v == u {
                continue;
            }
            // Candidates arrive in ascending id, so a tie with the current
            // worst never displaces it.
            if best.len() == k && x.total_cmp(&best[k - 1].0).is_le() {
                continue;
            }
            let pos = best.partition_point(|&(y, _)| y.total_cmp(&x).is_ge());
            best.insert(pos, (x, v));
            best.truncate(k);
        }
        let mut kept: Vec<usize> = best.iter().map(|&(_, v)| v).collect();
        kept.sort_unstable();
        weights.extend(kept.iter().map(|&v| row[v]));
        rows.push(kept);
    }
    LatentGraph::new(Arc::new(CsrPattern::from_rows(n, &rows)?), weights)
}

/// Keeps every ordered pair `u ≠ v` independently with probability
/// `(φ + 1) / 2`.
pub fn sample_bernoulli(phi: &Array2<f64>, rng: &mut Rng) -> Result<LatentGraph> {
    let n = phi.nrows();
    let mut rows = Vec::with_capacity(n);
    let mut weights = Vec::new();
    for u in 0..n {
        let mut kept = Vec::new();
        for v in (0..n).filter(|&v| v != u) {
            let p = ((phi[[u, v]] + 1.0) / 2.0).clamp(0.0, 1.0);
            if rng.gen::<f64>() < p {
                kept.push(v);
                weights.push(phi[[u, v]]);
            }
        }
        rows.push(kept);
    }
    LatentGraph::new(Arc::new(CsrPattern::from_rows(n, &rows)?), weights)
}

/// Builds the latent graph from structure-learner embeddings `z`.
/// `rng` is required in Bernoulli mode and ignored otherwise.
pub fn build_latent_graph(
    params: &ModelParams,
    z: &Array2<f64>,
    hp: &Hyperparams,
    rng: Option<&mut Rng>,
) -> Result<LatentGraph> {
    if matches!(hp.sparsifier, Sparsifier::TopK | Sparsifier::TopKBinary) && hp.k_neighbors >= z.nrows() {
        return Err(Error::input(format!(
            "k = {} must be smaller than the node count {}",
            hp.k_neighbors,
            z.nrows()
        )));
    }
    let phi = metric_matrix(params, hp, z)?;
    match hp.sparsifier {
        Sparsifier::TopK | Sparsifier::TopKBinary => select_top_k(&phi, hp.k_neighbors),
        Sparsifier::Bernoulli => {
            let rng = rng.ok_or_else(|| Error::Usage("Bernoulli latent graph needs a random stream".into()))?;
            sample_bernoulli(&phi, rng)
        }
    }
}

/// Where the latent graph of a recorded forward pass comes from.
pub enum LatentSource<'a> {
    /// Select a fresh pattern from the current embeddings.
    Build(Option<&'a mut Rng>),
    /// Keep this pattern; recompute its weights on the tape.
    FixedPattern(&'a LatentGraph),
    /// Use this graph's weights as constants.
    Constant(&'a LatentGraph),
}

/// Handles of one recorded forward pass.
pub struct Recorded {
    pub vars: BTreeMap<String, Var>,
    pub structure_embeddings: Option<Var>,
    pub z_out: Var,
    pub logits: Var,
    pub latent: Option<LatentGraph>,
    /// Per-entry latent weights as used by the smoothness terms.
    pub edge_weights: Option<Var>,
}

fn record_params(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Result<BTreeMap<String, Var>> {
    params
        .blocks
        .iter()
        .map(|(n, v)| {
            let var = if trainable {
                tape.param(v.clone())?
            } else {
                tape.constant(v.clone())?
            };
            Ok((n.clone(), var))
        })
        .collect()
}

fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Usage(format!("model has no `{name}` block")))
}

/// φ on the entries of `pattern`, recorded on the tape.
fn record_metric(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    z: Var,
    pattern: &CsrPattern,
    hp: &Hyperparams,
) -> Result<Var> {
    let src = Arc::new(pattern.entry_rows());
    let dst = Arc::new(pattern.col_indices().to_vec());
    match hp.metric {
        Metric::Cosine => {
            let zu = tape.gather_rows(z, src)?;
            let zv = tape.gather_rows(z, dst)?;
            tape.row_cosine(zu, zv)
        }
        Metric::MultiHead => tape.multi_head_cosine(z, var(vars, SL_HEADS)?, src, dst),
    }
}

/// Records the forward pass on `tape` using existing parameter handles.
pub fn record_forward_with(
    tape: &mut Tape,
    vars: BTreeMap<String, Var>,
    ctx: &GraphContext,
    hp: &Hyperparams,
    source: LatentSource<'_>,
) -> Result<Recorded> {
    let x = tape.constant(ctx.features.clone())?;
    let adj_vals = tape.constant(ctx.adjacency_values.clone())?;
    let adj = &ctx.adjacency;

    let mut structure_embeddings = None;
    let mut latent = None;
    let mut edge_weights = None;
    let mut latent_norm = None;
    if hp.is_dual() {
        let ax = tape.spmm(adj_vals, adj, x)?;
        let pre = tape.matmul(ax, var(&vars, SL_GNN)?)?;
        let z = tape.relu(pre)?;
        structure_embeddings = Some(z);

        let (lg, phi) = match source {
            LatentSource::Build(rng) => {
                let lg = {
                    let pseudo = ModelParams {
                        blocks: vars
                            .iter()
                            .filter(|(n, _)| n.as_str() == SL_HEADS)
                            .map(|(n, v)| (n.clone(), tape.value(*v).clone()))
                            .collect(),
                        channel_of: BTreeMap::new(),
                    };
                    build_latent_graph(&pseudo, tape.value(z), hp, rng)?
                };
                let phi = record_metric(tape, &vars, z, lg.pattern(), hp)?;
                (lg, phi)
            }
            LatentSource::FixedPattern(lg) => {
                if lg.num_nodes() != ctx.num_nodes() {
                    return Err(Error::shape("dual_channel_forward", "latent graph size differs from graph size"));
                }
                let phi = record_metric(tape, &vars, z, lg.pattern(), hp)?;
                (lg.clone(), phi)
            }
            LatentSource::Constant(lg) => {
                if lg.num_nodes() != ctx.num_nodes() {
                    return Err(Error::shape("dual_channel_forward", "latent graph size differs from graph size"));
                }
                let w = Array2::from_shape_vec((lg.num_entries(), 1), lg.weights().to_vec())
                    .expect("one weight per entry");
                let phi = tape.constant(w)?;
                (lg.clone(), phi)
            }
        };
        let weights = match hp.sparsifier {
            Sparsifier::TopKBinary => tape.straight_through_ones(phi)?,
            _ => phi,
        };
        latent_norm = Some(tape.row_normalize_abs(weights, lg.pattern())?);
        edge_weights = Some(weights);
        latent = Some(lg);
    }

    let pre0 = tape.matmul(x, var(&vars, F0)?)?;
    let z0 = tape.relu(pre0)?;
    let mut readout = vec![x, z0];
    let mut cur = z0;
    let alpha = if hp.is_dual() { hp.alpha } else { 1.0 };
    for l in 1..=hp.num_layers {
        let local = if alpha > 0.0 {
            let zw = tape.matmul(cur, var(&vars, &local_layer(l))?)?;
            Some(tape.spmm(adj_vals, adj, zw)?)
        } else {
            None
        };
        let global = match (&latent, latent_norm) {
            (Some(lg), Some(norm)) if alpha < 1.0 => {
                let zw = tape.matmul(cur, var(&vars, &global_layer(l))?)?;
                Some(tape.spmm(norm, lg.pattern(), zw)?)
            }
            _ => None,
        };
        let pre = match (local, global) {
            (Some(e), None) => e,
            (None, Some(h)) => h,
            (Some(e), Some(h)) => {
                let e = tape.scale(e, alpha)?;
                let h = tape.scale(h, 1.0 - alpha)?;
                tape.add(e, h)?
            }
            (None, None) => unreachable!("alpha = 0 always has a global channel"),
        };
        cur = tape.relu(pre)?;
        readout.push(cur);
    }
    let z_out = tape.concat_cols(&readout)?;
    let logits = tape.matmul(z_out, var(&vars, CLASSIFIER)?)?;
    Ok(Recorded {
        vars,
        structure_embeddings,
        z_out,
        logits,
        latent,
        edge_weights,
    })
}

pub fn record_forward(
    tape: &mut Tape,
    params: &ModelParams,
    ctx: &GraphContext,
    hp: &Hyperparams,
    trainable: bool,
    source: LatentSource<'_>,
) -> Result<Recorded> {
    let vars = record_params(tape, params, trainable)?;
    record_forward_with(tape, vars, ctx, hp, source)
}

/// Loss handles of a recorded pass.
pub struct RecordedLoss {
    pub total: Var,
    pub cross_entropy: Var,
    pub smooth: Option<Var>,
}

pub fn record_loss(
    tape: &mut Tape,
    rec: &Recorded,
    ctx: &GraphContext,
    mask: &Arc<Vec<bool>>,
    hp: &Hyperparams,
) -> Result<RecordedLoss> {
    let ce = tape.masked_cross_entropy(rec.logits, Arc::clone(&ctx.labels), Arc::clone(mask))?;
    let smooth = match (&rec.latent, rec.edge_weights) {
        (Some(lg), Some(w)) if hp.lambda_smooth != 0.0 || hp.mu_smooth != 0.0 => {
            let s = tape.weighted_feature_smoothness(w, lg.pattern(), &ctx.features)?;
            let s = tape.scale(s, hp.lambda_smooth)?;
            let f = tape.frobenius_sq(w)?;
            let f = tape.scale(f, hp.mu_smooth)?;
            Some(tape.add(s, f)?)
        }
        _ => None,
    };
    let total = match smooth {
        Some(s) => tape.add(ce, s)?,
        None => ce,
    };
    Ok(RecordedLoss {
        total,
        cross_entropy: ce,
        smooth,
    })
}

/// `relu(Â X W_sl)` for the given graph.
pub fn structure_learner_embed(params: &ModelParams, g: &Graph) -> Result<Array2<f64>> {
    let w = params.require(SL_GNN)?;
    if w.nrows() != g.feature_dim() {
        return Err(Error::shape(
            "structure_learner_embed",
            format!("{} feature columns, weights {:?}", g.feature_dim(), w.dim()),
        ));
    }
    let ctx = GraphContext::new(g);
    let mut tape = Tape::new();
    let x = tape.constant(ctx.features.clone())?;
    let a = tape.constant(ctx.adjacency_values.clone())?;
    let wv = tape.constant(w.clone())?;
    let ax = tape.spmm(a, &ctx.adjacency, x)?;
    let pre = tape.matmul(ax, wv)?;
    let z = tape.relu(pre)?;
    Ok(tape.value(z).clone())
}

/// `(Z_out, logits)` for a fixed latent graph.
pub fn dual_channel_forward(
    params: &ModelParams,
    g: &Graph,
    lg: &LatentGraph,
    hp: &Hyperparams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let ctx = GraphContext::new(g);
    let mut tape = Tape::new();
    let rec = record_forward(&mut tape, params, &ctx, hp, false, LatentSource::Constant(lg))?;
    Ok((tape.value(rec.z_out).clone(), tape.value(rec.logits).clone()))
}

/// `λ Σ w_uv ‖x_u − x_v‖² + μ Σ w_uv²` over the retained entries.
pub fn smooth_loss(lg: &LatentGraph, x: &Array2<f64>, lambda: f64, mu: f64) -> Result<f64> {
    if x.nrows() != lg.num_nodes() {
        return Err(Error::shape("smooth_loss", "feature rows differ from latent graph size"));
    }
    let mut dist = 0.0;
    let mut fro = 0.0;
    for u in 0..lg.num_nodes() {
        for (&v, &w) in lg.neighbors(u).iter().zip(lg.neighbor_weights(u)) {
            let d = &x.row(u) - &x.row(v);
            dist += w * d.dot(&d);
            fro += w * w;
        }
    }
    Ok(lambda * dist + mu * fro)
}

/// Masked mean cross-entropy of `logits` plus [`smooth_loss`].
pub fn total_loss(
    logits: &Array2<f64>,
    labels: &[usize],
    mask: &[bool],
    lg: &LatentGraph,
    x: &Array2<f64>,
    hp: &Hyperparams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone())?;
    let ce = tape.masked_cross_entropy(l, Arc::new(labels.to_vec()), Arc::new(mask.to_vec()))?;
    Ok(tape.scalar(ce) + smooth_loss(lg, x, hp.lambda_smooth, hp.mu_smooth)?)
}

/// Inference outputs for one graph.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub z_out: Array2<f64>,
    pub logits: Array2<f64>,
    pub latent: Option<LatentGraph>,
}

pub fn predict(params: &ModelParams, ctx: &GraphContext, hp: &Hyperparams, rng: Option<&mut Rng>) -> Result<Prediction> {
    let mut tape = Tape::new();
    let rec = record_forward(&mut tape, params, ctx, hp, false, LatentSource::Build(rng))?;
    Ok(Prediction {
        z_out: tape.value(rec.z_out).clone(),
        logits: tape.value(rec.logits).clone(),
        latent: rec.latent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub cross_entropy: f64,
    pub smooth: f64,
    pub train_accuracy: f64,
}

/// One full-batch step: embed, build the latent graph, forward, loss,
/// backward, Adam update of every block.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    ctx: &GraphContext,
    train_mask: &Arc<Vec<bool>>,
    hp: &Hyperparams,
    rng: &mut Rng,
) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    let rec = record_forward(&mut tape, params, ctx, hp, true, LatentSource::Build(Some(rng)))?;
    let loss = record_loss(&mut tape, &rec, ctx, train_mask, hp)?;
    let mut grads = tape.backward(loss.total)?;
    let metrics = StepMetrics {
        loss: tape.scalar(loss.total),
        cross_entropy: tape.scalar(loss.cross_entropy),
        smooth: loss.smooth.map_or(0.0, |s| tape.scalar(s)),
        train_accuracy: accuracy(tape.value(rec.logits), &ctx.labels, train_mask)?,
    };
    let grad_blocks: Vec<(String, Array2<f64>)> = rec
        .vars
        .iter()
        .map(|(n, &v)| (n.clone(), grads.take_or_zeros(v, tape.value(v).dim())))
        .collect();
    adam.step(
        params
            .blocks
            .iter_mut()
            .zip(&grad_blocks)
            .map(|((n, p), (_, g))| (n.as_str(), p, g)),
    )?;
    for (name, p) in &params.blocks {
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericFault {
                op: "adam_step".into(),
                detail: format!("block {name} became non-finite (loss {})", metrics.loss),
            });
        }
    }
    Ok(metrics)
}

/// Finite-difference check of every block's gradient with the latent
/// pattern held fixed at the one selected from the current parameters.
pub fn model_grad_check(
    params: &ModelParams,
    ctx: &GraphContext,
    hp: &Hyperparams,
    mask: &Arc<Vec<bool>>,
    fd_step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let fixed = if hp.is_dual() {
        let mut tape = Tape::new();
        let mut rng = seeded(0);
        let rec = record_forward(&mut tape, params, ctx, hp, false, LatentSource::Build(Some(&mut rng)))?;
        rec.latent
    } else {
        None
    };
    let names: Vec<String> = params.blocks.keys().cloned().collect();
    let blocks: Vec<(String, Array2<f64>)> =
        params.blocks.iter().map(|(n, v)| (n.clone(), v.clone())).collect();
    let build = |tape: &mut Tape, vs: &[Var]| -> Result<Var> {
        let vars = names.iter().cloned().zip(vs.iter().copied()).collect();
        let source = match &fixed {
            Some(lg) => LatentSource::FixedPattern(lg),
            None => LatentSource::Build(None),
        };
        let rec = record_forward_with(tape, vars, ctx, hp, source)?;
        Ok(record_loss(tape, &rec, ctx, mask, hp)?.total)
    };
    grad_check(build, &blocks, fd_step, tol)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FHBLOCK1";
pub const BLOCKS_FILE: &str = "blocks.bin";
pub const PARAMS_FILE: &str = "params.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamsMeta {
    hyperparams: Hyperparams,
    channel_of: BTreeMap<String, Channel>,
}

/// Writes `blocks.bin` (name, shape and row-major little-endian `f64`
/// values per block) and `params.json` into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ModelParams, hp: &Hyperparams) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(params.blocks.len() as u32).to_le_bytes());
    for (name, a) in &params.blocks {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
        for x in a.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let path = dir.join(BLOCKS_FILE);
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(&path, e))?;
    let meta = ParamsMeta {
        hyperparams: hp.clone(),
        channel_of: params.channel_of.clone(),
    };
    write_json(&dir.join(PARAMS_FILE), &meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, Hyperparams)> {
    let path = dir.join(BLOCKS_FILE);
    let mut buf = Vec::new();
    fs::File::open(&path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(&path, e))?;
    let corrupt = |what: &str| Error::Serde(format!("{}: {what}", path.display()));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = buf.get(pos..pos + n).ok_or_else(|| corrupt("truncated file"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(corrupt("not a block container"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut blocks = BTreeMap::new();
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| corrupt("block name is not UTF-8"))?;
        let rows = u64_at(take(8)?);
        let cols = u64_at(take(8)?);
        let bytes = take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| corrupt("bad shape"))?)?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let a = Array2::from_shape_vec((rows, cols), values).map_err(|_| corrupt("bad shape"))?;
        blocks.insert(name, a);
    }
    let meta: ParamsMeta = read_json(&dir.join(PARAMS_FILE))?;
    let params = ModelParams::from_blocks(blocks, meta.channel_of)?;
    Ok((params, meta.hyperparams))
}
