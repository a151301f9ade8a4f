//! In-process federated training: broadcast, local steps, weighted
//! averaging of the blocks selected by an [`AggregationScope`], and
//! per-round evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{accuracy, binary_auc};
use crate::graph::{Graph, NodeSplit};
use crate::model::{predict, train_step, Channel, GraphContext, Hyperparams, ModelParams, SL_GNN, SL_HEADS};
use crate::optim::AdamState;
use crate::partition::ClientData;
use crate::rng::{seeded, stream_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationScope {
    GlobalChannelOnly,
    All,
    TaskOnly,
    None,
}

impl AggregationScope {
    pub fn includes(self, params: &ModelParams, name: &str) -> bool {
        match self {
            Self::GlobalChannelOnly => params.channel(name) == Some(Channel::Global),
            Self::All => true,
            Self::TaskOnly => name != SL_GNN && name != SL_HEADS,
            Self::None => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GlobalChannelOnly => "global",
            Self::All => "all",
            Self::TaskOnly => "task",
            Self::None => "none",
        }
    }
}

impl std::str::FromStr for AggregationScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" | "global_channel_only" => Ok(Self::GlobalChannelOnly),
            "all" => Ok(Self::All),
            "task" | "task_only" => Ok(Self::TaskOnly),
            "none" => Ok(Self::None),
            _ => Err(Error::Usage(format!(
                "unknown scope `{s}` (expected global, all, task or none)"
            ))),
        }
    }
}

/// Training protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Dual-channel model with the configured aggregation scope.
    Fedhero,
    /// Plain GNN, every block averaged.
    Fedavg,
    /// Plain GNN, no aggregation.
    Local,
}

impl Method {
    pub fn hyperparams(self, hp: &Hyperparams) -> Hyperparams {
        match self {
            Self::Fedhero => hp.clone(),
            Self::Fedavg | Self::Local => hp.plain(),
        }
    }

    pub fn scope(self, requested: AggregationScope) -> AggregationScope {
        match self {
            Self::Fedhero => requested,
            Self::Fedavg => AggregationScope::All,
            Self::Local => AggregationScope::None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fedhero => "fedhero",
            Self::Fedavg => "fedavg",
            Self::Local => "local",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedhero" => Ok(Self::Fedhero),
            "fedavg" => Ok(Self::Fedavg),
            "local" => Ok(Self::Local),
            _ => Err(Error::Usage(format!(
                "unknown method `{s}` (expected fedhero, fedavg or local)"
            ))),
        }
    }
}

pub struct ClientState {
    pub client_id: usize,
    pub graph: Graph,
    pub split: NodeSplit,
    pub params: ModelParams,
    pub adam: AdamState,
    pub num_nodes: usize,
    ctx: GraphContext,
    train_mask: Arc<Vec<bool>>,
    rng: Rng,
}

impl ClientState {
    /// `init_seed` must be shared by all clients so shared blocks start equal;
    /// `stream_seed` drives client-private sampling.
    pub fn new(
        client_id: usize,
        graph: Graph,
        split: NodeSplit,
        hp: &Hyperparams,
        init_seed: u64,
        stream_seed: u64,
    ) -> Result<Self> {
        if split.len() != graph.num_nodes() {
            return Err(Error::input(format!(
                "client {client_id}: split covers {} nodes, graph has {}",
                split.len(),
                graph.num_nodes()
            )));
        }
        split.validate()?;
        if !split.train_mask.iter().any(|&m| m) {
            return Err(Error::input(format!("client {client_id} has no training nodes")));
        }
        let params = ModelParams::init(hp, graph.feature_dim(), graph.num_classes(), init_seed)?;
        let ctx = GraphContext::new(&graph);
        Ok(Self {
            client_id,
            num_nodes: graph.num_nodes(),
            train_mask: Arc::new(split.train_mask.clone()),
            graph,
            split,
            params,
            adam: AdamState::new(hp.learning_rate),
            ctx,
            rng: seeded(stream_seed),
        })
    }

    pub fn context(&self) -> &GraphContext {
        &self.ctx
    }

    fn step(&mut self, hp: &Hyperparams) -> Result<crate::model::StepMetrics> {
        train_step(
            &mut self.params,
            &mut self.adam,
            &self.ctx,
            &self.train_mask,
            hp,
            &mut self.rng,
        )
    }

    /// Accuracy (and AUC for two classes) on the three splits with the
    /// current parameters.
    pub fn evaluate(&mut self, hp: &Hyperparams) -> Result<SplitScores> {
        let pred = predict(&self.params, &self.ctx, hp, Some(&mut self.rng))?;
        let labels = self.graph.labels();
        let acc = |mask: &[bool]| -> Result<Option<f64>> {
            if mask.iter().any(|&m| m) {
                accuracy(&pred.logits, labels, mask).map(Some)
            } else {
                Ok(None)
            }
        };
        let test_auc = if self.graph.num_classes() == 2 {
            let scores: Vec<f64> = pred.logits.rows().into_iter().map(|r| r[1] - r[0]).collect();
            binary_auc(&scores, labels, &self.split.test_mask).ok()
        } else {
            None
        };
        Ok(SplitScores {
            train: acc(&self.split.train_mask)?.unwrap_or(f64::NAN),
            val: acc(&self.split.val_mask)?,
            test: acc(&self.split.test_mask)?,
            test_auc,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitScores {
    pub train: f64,
    pub val: Option<f64>,
    pub test: Option<f64>,
    pub test_auc: Option<f64>,
}

/// Builds one client per dataset entry. All clients share `init_seed`.
pub fn build_clients(data: &[ClientData], hp: &Hyperparams, seed: u64) -> Result<Vec<ClientState>> {
    let init_seed = stream_seed(seed, "init", 0);
    data.iter()
        .enumerate()
        .map(|(i, d)| {
            ClientState::new(
                i,
                d.graph.clone(),
                d.split.clone(),
                hp,
                init_seed,
                stream_seed(seed, "client", i as u64),
            )
        })
        .collect()
}

/// `Σ_i (N_i / N) w_i` for every block in scope, accumulated in client order.
pub fn aggregate_params(
    clients: &[(&ModelParams, usize)],
    scope: AggregationScope,
) -> Result<BTreeMap<String, Array2<f64>>> {
    let Some(&(first, _)) = clients.first() else {
        return Err(Error::Protocol("aggregation needs at least one client".into()));
    };
    if let Some((i, _)) = clients
        .iter()
        .enumerate()
        .find(|(_, (p, _))| !p.same_structure(first))
    {
        return Err(Error::Protocol(format!(
            "client {i} has different block names or shapes than client 0"
        )));
    }
    let total: usize = clients.iter().map(|c| c.1).sum();
    if total == 0 {
        return Err(Error::Protocol("aggregation weights sum to zero".into()));
    }
    let mut out = BTreeMap::new();
    for name in first.names().filter(|n| scope.includes(first, n)) {
        let mut acc = Array2::zeros(first.block(name).expect("listed block").dim());
        for (p, n_i) in clients {
            acc.scaled_add(*n_i as f64 / total as f64, p.block(name).expect("same structure"));
        }
        out.insert(name.to_string(), acc);
    }
    Ok(out)
}

pub fn aggregate(clients: &[ClientState], scope: AggregationScope) -> Result<BTreeMap<String, Array2<f64>>> {
    let views: Vec<_> = clients.iter().map(|c| (&c.params, c.num_nodes)).collect();
    aggregate_params(&views, scope)
}

/// Overwrites the named blocks on every client.
pub fn broadcast(clients: &mut [ClientState], shared: &BTreeMap<String, Array2<f64>>) -> Result<()> {
    for c in clients.iter_mut() {
        for (name, value) in shared {
            let slot = c
                .params
                .block_mut(name)
                .ok_or_else(|| Error::Protocol(format!("client {} lacks block `{name}`", c.client_id)))?;
            slot.assign(value);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundMetrics {
    pub client: usize,
    pub loss: f64,
    pub cross_entropy: f64,
    pub smooth: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub clients: Vec<ClientRoundMetrics>,
    pub mean_loss: f64,
    pub mean_train_accuracy: f64,
    pub mean_val_accuracy: Option<f64>,
    pub mean_test_accuracy: Option<f64>,
    pub mean_test_auc: Option<f64>,
    pub wall_time_secs: f64,
}

impl RoundMetrics {
    /// Equality of everything except timing.
    pub fn same_values(&self, other: &Self) -> bool {
        Self {
            wall_time_secs: 0.0,
            ..self.clone()
        } == Self {
            wall_time_secs: 0.0,
            ..other.clone()
        }
    }
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub rounds: usize,
    pub local_epochs: usize,
    /// Fraction of clients that train in a round; 1.0 means all.
    pub participation: f64,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            rounds: 200,
            local_epochs: 1,
            participation: 1.0,
            seed: 0,
        }
    }
}

fn client_fault(client: usize, round: usize, e: Error) -> Error {
    match e {
        Error::NumericFault { op, detail } => Error::NumericFault {
            op: format!("client {client}, round {round}: {op}"),
            detail,
        },
        other => other,
    }
}

/// Runs `opts.rounds` federated rounds and returns one metrics record per
/// round. Test metrics are taken after aggregation.
pub fn run_rounds(
    clients: &mut [ClientState],
    hp: &Hyperparams,
    scope: AggregationScope,
    opts: &RunOptions,
) -> Result<Vec<RoundMetrics>> {
    if clients.is_empty() {
        return Err(Error::input("no clients"));
    }
    if !(opts.participation > 0.0 && opts.participation <= 1.0) {
        return Err(Error::input("participation must lie in (0, 1]"));
    }
    if let Some(c) = clients.iter().find(|c| !c.params.same_structure(&clients[0].params)) {
        return Err(Error::Protocol(format!(
            "client {} has different block names or shapes than client 0",
            c.client_id
        )));
    }
    let mut picker = seeded(stream_seed(opts.seed, "participation", 0));
    let m = clients.len();
    let per_round = ((opts.participation * m as f64).ceil() as usize).clamp(1, m);
    let mut history = Vec::with_capacity(opts.rounds);
    for round in 0..opts.rounds {
        let start = Instant::now();
        let mut active: Vec<usize> = (0..m).collect();
        if per_round < m {
            active.shuffle(&mut picker);
            active.truncate(per_round);
            active.sort_unstable();
        }
        let mut step_metrics = vec![None; m];
        for &i in &active {
            let c = &mut clients[i];
            let mut last = None;
            for _ in 0..opts.local_epochs {
                last = Some(c.step(hp).map_err(|e| client_fault(c.client_id, round, e))?);
            }
            step_metrics[i] = last;
        }
        if scope != AggregationScope::None {
            let views: Vec<_> = active.iter().map(|&i| (&clients[i].params, clients[i].num_nodes)).collect();
            let shared = aggregate_params(&views, scope)?;
            broadcast(clients, &shared)?;
        }
        let mut per_client = Vec::with_capacity(m);
        for (i, c) in clients.iter_mut().enumerate() {
            let scores = c.evaluate(hp).map_err(|e| client_fault(c.client_id, round, e))?;
            let s = step_metrics[i];
            per_client.push(ClientRoundMetrics {
                client: c.client_id,
                loss: s.map_or(f64::NAN, |s| s.loss),
                cross_entropy: s.map_or(f64::NAN, |s| s.cross_entropy),
                smooth: s.map_or(f64::NAN, |s| s.smooth),
                train_accuracy: scores.train,
                val_accuracy: scores.val,
                test_accuracy: scores.test,
                test_auc: scores.test_auc,
            });
        }
        let trained: Vec<f64> = per_client.iter().map(|c| c.loss).filter(|l| !l.is_nan()).collect();
        history.push(RoundMetrics {
            round,
            mean_loss: trained.iter().sum::<f64>() / trained.len() as f64,
            mean_train_accuracy: per_client.iter().map(|c| c.train_accuracy).sum::<f64>() / m as f64,
            mean_val_accuracy: mean_opt(per_client.iter().map(|c| c.val_accuracy)),
            mean_test_accuracy: mean_opt(per_client.iter().map(|c| c.test_accuracy)),
            mean_test_auc: mean_opt(per_client.iter().map(|c| c.test_auc)),
            clients: per_client,
            wall_time_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

fn require_plain(clients: &[ClientState], hp: &Hyperparams, what: &str) -> Result<Hyperparams> {
    let plain = hp.plain();
    let d = clients.first().map(|c| c.graph.feature_dim()).unwrap_or(1);
    let c = clients.first().map(|c| c.graph.num_classes()).unwrap_or(1);
    let reference = ModelParams::init(&plain, d, c, 0)?;
    if clients.iter().any(|cl| !cl.params.same_structure(&reference)) {
        return Err(Error::Usage(format!(
            "{what} expects clients built with the plain architecture"
        )));
    }
    Ok(plain)
}

/// Isolated training of a plain GNN on every client.
pub fn baseline_local(clients: &mut [ClientState], hp: &Hyperparams, opts: &RunOptions) -> Result<Vec<RoundMetrics>> {
    let plain = require_plain(clients, hp, "baseline_local")?;
    run_rounds(clients, &plain, AggregationScope::None, opts)
}

/// Full-model weighted averaging of a plain GNN.
pub fn baseline_fedavg(clients: &mut [ClientState], hp: &Hyperparams, opts: &RunOptions) -> Result<Vec<RoundMetrics>> {
    let plain = require_plain(clients, hp, "baseline_fedavg")?;
    run_rounds(clients, &plain, AggregationScope::All, opts)
}

/// Builds clients for `method` and trains them.
pub fn run_method(
    data: &[ClientData],
    method: Method,
    hp: &Hyperparams,
    scope: AggregationScope,
    opts: &RunOptions,
) -> Result<(Vec<RoundMetrics>, Vec<ClientState>)> {
    let hp = method.hyperparams(hp);
    let mut clients = build_clients(data, &hp, opts.seed)?;
    let metrics = run_rounds(&mut clients, &hp, method.scope(scope), opts)?;
    Ok((metrics, clients))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// CSV with one row per client per round and a `mean` row per round.
/// Timing is left out so that identical runs produce identical files.
pub fn metrics_csv(history: &[RoundMetrics]) -> String {
    let mut out = String::from("round,client,loss,cross_entropy,smooth,train_acc,val_acc,test_acc,test_auc\n");
    for r in history {
        for c in &r.clients {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.round,
                c.client,
                c.loss,
                c.cross_entropy,
                c.smooth,
                c.train_accuracy,
                fmt_opt(c.val_accuracy),
                fmt_opt(c.test_accuracy),
                fmt_opt(c.test_auc)
            );
        }
        let _ = writeln!(
            out,
            "{},mean,{},,,{},{},{},{}",
            r.round,
            r.mean_loss,
            r.mean_train_accuracy,
            fmt_opt(r.mean_val_accuracy),
            fmt_opt(r.mean_test_accuracy),
            fmt_opt(r.mean_test_auc)
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, history: &[RoundMetrics]) -> Result<()> {
    std::fs::write(path, metrics_csv(history)).map_err(|e| Error::io(path, e))
}

/// Final-round and best-validation-round test metrics of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds: usize,
    pub final_test_accuracy: f64,
    pub best_val_round: usize,
    pub best_val_test_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_test_auc: Option<f64>,
}

impl RunSummary {
    pub fn from_history(history: &[RoundMetrics]) -> Result<Self> {
        let last = history
            .last()
            .ok_or_else(|| Error::Undefined("summary of a run with zero rounds".into()))?;
        let final_test_accuracy = last
            .mean_test_accuracy
            .ok_or_else(|| Error::Undefined("test accuracy: no client has test nodes".into()))?;
        let mut best = 0;
        for (i, r) in history.iter().enumerate() {
            if r.mean_val_accuracy.unwrap_or(f64::NEG_INFINITY)
                > history[best].mean_val_accuracy.unwrap_or(f64::NEG_INFINITY)
            {
                best = i;
            }
        }
        Ok(Self {
            rounds: history.len(),
            final_test_accuracy,
            best_val_round: history[best].round,
            best_val_test_accuracy: history[best].mean_test_accuracy.unwrap_or(f64::NAN),
            final_test_auc: last.mean_test_auc,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{balanced_partition, make_federated_dataset};
    use crate::synthgen::{generate_graph, GeneratorConfig};
    use ndarray::array;

    fn scalar_params(v: f64) -> ModelParams {
        let mut blocks = BTreeMap::new();
        let mut ch = BTreeMap::new();
        blocks.insert("g".to_string(), array![[v]]);
        ch.insert("g".to_string(), Channel::Global);
        blocks.insert("l".to_string(), array![[-v]]);
        ch.insert("l".to_string(), Channel::Local);
        ModelParams::from_blocks(blocks, ch).unwrap()
    }

    #[test]
    fn weighted_average_examples() {
        let ps: Vec<_> = [6.0, 3.0, 1.0].iter().map(|&v| scalar_params(v)).collect();
        let views: Vec<_> = ps.iter().zip([1, 2, 3]).collect();
        let agg = aggregate_params(&views, AggregationScope::GlobalChannelOnly).unwrap();
        assert!((agg["g"][[0, 0]] - 2.5).abs() < 1e-15);
        assert!(!agg.contains_key("l"));

        let single = aggregate_params(&views[..1], AggregationScope::All).unwrap();
        assert_eq!(single["g"], ps[0].block("g").unwrap());

        let (a, b) = (scalar_params(4.0), scalar_params(-4.0));
        let agg = aggregate_params(&[(&a, 5), (&b, 5)], AggregationScope::All).unwrap();
        assert_eq!(agg["g"][[0, 0]], 0.0);
        assert!(aggregate_params(&[], AggregationScope::All).is_err());
    }

    #[test]
    fn mismatched_clients_are_rejected() {
        let a = scalar_params(1.0);
        let mut blocks = a.blocks().clone();
        blocks.insert("g".into(), Array2::zeros((2, 1)));
        let b = ModelParams::from_blocks(blocks, a.channel_of().clone()).unwrap();
        assert!(matches!(
            aggregate_params(&[(&a, 1), (&b, 1)], AggregationScope::All),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn task_scope_skips_structure_learner() {
        let p = ModelParams::init(&Hyperparams::default(), 5, 2, 0).unwrap();
        let task: Vec<_> = p.names().filter(|n| AggregationScope::TaskOnly.includes(&p, n)).collect();
        assert_eq!(task, ["classifier", "f0", "global_1", "global_2", "local_1", "local_2"]);
        let global: Vec<_> = p
            .names()
            .filter(|n| AggregationScope::GlobalChannelOnly.includes(&p, n))
            .collect();
        assert_eq!(global, ["global_1", "global_2", "sl_gnn", "sl_heads"]);
    }

    pub(crate) fn tiny_dataset(seed: u64) -> Vec<ClientData> {
        let g = generate_graph(&GeneratorConfig {
            num_nodes: 60,
            num_classes: 3,
            target_homophily: 0.3,
            mean_degree: 4.0,
            feature_dim: 4,
            class_mixing: None,
            feature_separation: 1.5,
            seed,
        })
        .unwrap();
        let pa = balanced_partition(&g, 2, seed).unwrap();
        make_federated_dataset(&g, &pa, seed).unwrap()
    }

    fn tiny_hp() -> Hyperparams {
        Hyperparams {
            k_neighbors: 4,
            hidden_dim: 6,
            num_heads: 2,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn zero_rounds_keep_initial_params() {
        let data = tiny_dataset(1);
        let hp = tiny_hp();
        let mut clients = build_clients(&data, &hp, 3).unwrap();
        let before: Vec<_> = clients.iter().map(|c| c.params.clone()).collect();
        let opts = RunOptions {
            rounds: 0,
            seed: 3,
            ..RunOptions::default()
        };
        let h = run_rounds(&mut clients, &hp, AggregationScope::GlobalChannelOnly, &opts).unwrap();
        assert!(h.is_empty());
        assert!(clients.iter().zip(&before).all(|(c, b)| &c.params == b));
    }

    #[test]
    fn local_blocks_untouched_by_global_aggregation() {
        let data = tiny_dataset(2);
        let hp = tiny_hp();
        let mut clients = build_clients(&data, &hp, 4).unwrap();
        let opts = RunOptions {
            rounds: 3,
            seed: 4,
            ..RunOptions::default()
        };
        for _ in 0..3 {
            for c in clients.iter_mut() {
                c.step(&hp).unwrap();
            }
            let local_before: Vec<_> = clients
                .iter()
                .map(|c| {
                    c.params
                        .blocks()
                        .iter()
                        .filter(|(n, _)| c.params.channel(n) == Some(Channel::Local))
                        .map(|(n, v)| (n.clone(), v.clone()))
                        .collect::<Vec<_>>()
                })
                .collect();
            let shared = aggregate(&clients, AggregationScope::GlobalChannelOnly).unwrap();
            broadcast(&mut clients, &shared).unwrap();
            for (c, before) in clients.iter().zip(&local_before) {
                for (n, v) in before {
                    assert_eq!(c.params.block(n).unwrap(), v);
                }
            }
        }
        let h = run_rounds(&mut clients, &hp, AggregationScope::GlobalChannelOnly, &opts).unwrap();
        assert_eq!(h.len(), 3);
    }

    #[test]
    fn partial_participation_runs() {
        let data = tiny_dataset(5);
        let hp = tiny_hp();
        let mut clients = build_clients(&data, &hp, 1).unwrap();
        let opts = RunOptions {
            rounds: 2,
            participation: 0.5,
            seed: 1,
            ..RunOptions::default()
        };
        let h = run_rounds(&mut clients, &hp, AggregationScope::All, &opts).unwrap();
        assert_eq!(h[0].clients.iter().filter(|c| !c.loss.is_nan()).count(), 1);
    }
}
