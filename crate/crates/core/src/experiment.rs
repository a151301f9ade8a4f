//! Experiment configuration, repeated runs and one-parameter sweeps.
//!
//! A configuration is a TOML document with one table per concern:
//!
//! ```toml
//! [dataset]
//! source = "generated"
//! clients = 4
//! conflict_strength = 1.0
//! edge_noise = 0.0
//!
//! [generator]
//! num_nodes = 1000
//! # ...
//!
//! [partition]
//! method = "none"
//!
//! [model]
//! alpha = 0.2
//! # ...
//!
//! [federation]
//! method = "fedhero"
//! scope = "global_channel_only"
//! rounds = 200
//!
//! [experiment]
//! repeats = 5
//! seed = 0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federated::{
    run_method, write_metrics_csv, AggregationScope, ClientState, Method, RoundMetrics, RunOptions,
    RunSummary,
};
use crate::eval::{accuracy, binary_auc, client_divergence, link_inference_attack, ClientEval, EvalReport};
use crate::io::{client_dir_name, load_bundle, load_client_bundles, read_json, write_json, META_FILE};
use crate::model::{load_checkpoint, predict, save_checkpoint, GraphContext, Hyperparams, Sparsifier};
use crate::partition::{
    balanced_partition, client_data_from_graphs, louvain, make_federated_dataset,
    merge_small_communities, ClientData,
};
use crate::rng::{derive_seed, seeded, stream_seed};
use crate::synthgen::{generate_conflicting_clients, generate_graph, GeneratorConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const RUN_INFO_FILE: &str = "run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Generated,
    Files,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMethod {
    /// Data already comes as one graph per client.
    None,
    Louvain,
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    /// For `files`: a single graph bundle, or a directory of
    /// `client_0`, `client_1`, ... bundles.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Number of generated client graphs when no partition method is set.
    pub clients: usize,
    pub conflict_strength: f64,
    /// Edge-flip probability applied to every client graph after loading.
    pub edge_noise: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Generated,
            path: None,
            clients: 4,
            conflict_strength: 1.0,
            edge_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub method: PartitionMethod,
    /// Part count for `balanced`.
    pub clients: usize,
    /// Louvain communities smaller than this are merged into larger ones.
    pub min_size: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            method: PartitionMethod::None,
            clients: 4,
            min_size: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub method: Method,
    pub scope: AggregationScope,
    pub rounds: usize,
    pub local_epochs: usize,
    pub participation: f64,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            method: Method::Fedhero,
            scope: AggregationScope::GlobalChannelOnly,
            rounds: 200,
            local_epochs: 1,
            participation: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepeatSection {
    pub repeats: usize,
    /// Master seed; per-repeat seeds are derived from it unless `seeds` is set.
    pub seed: u64,
    pub seeds: Vec<u64>,
}

impl Default for RepeatSection {
    fn default() -> Self {
        Self {
            repeats: 5,
            seed: 0,
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    /// `seed` is replaced by each repeat's seed.
    pub generator: GeneratorConfig,
    pub partition: PartitionSection,
    pub model: Hyperparams,
    pub federation: FederationSection,
    pub experiment: RepeatSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Usage(msg) => Error::Usage(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()?).map_err(|e| Error::io(path, e))
    }

    /// Checks every section; violations are reported as usage errors.
    pub fn validate(&self) -> Result<()> {
        let usage = |msg: String| Err(Error::Usage(format!("config: {msg}")));
        let e = &self.experiment;
        if e.repeats == 0 {
            return usage("experiment.repeats must be at least 1".into());
        }
        if !e.seeds.is_empty() && e.seeds.len() != e.repeats {
            return usage(format!(
                "experiment.seeds lists {} seeds for {} repeats",
                e.seeds.len(),
                e.repeats
            ));
        }
        // TOML integers are signed.
        if e.seeds.iter().chain([&e.seed, &self.generator.seed]).any(|&s| s > i64::MAX as u64) {
            return usage("seeds must not exceed 2^63 - 1".into());
        }
        let f = &self.federation;
        if f.rounds == 0 || f.local_epochs == 0 {
            return usage("federation.rounds and federation.local_epochs must be positive".into());
        }
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return usage("federation.participation must lie in (0, 1]".into());
        }
        let d = &self.dataset;
        if !(0.0..=1.0).contains(&d.edge_noise) {
            return usage("dataset.edge_noise must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&d.conflict_strength) {
            return usage("dataset.conflict_strength must lie in [0, 1]".into());
        }
        match d.source {
            DataSource::Files if d.path.is_none() => {
                return usage("dataset.source = \"files\" needs dataset.path".into());
            }
            DataSource::Generated => {
                if let Err(err) = self.generator.validate() {
                    return usage(format!("generator: {err}"));
                }
                if self.partition.method == PartitionMethod::None && d.clients < 2 {
                    return usage("dataset.clients must be at least 2 for generated clients".into());
                }
            }
            DataSource::Files => {}
        }
        if self.partition.method == PartitionMethod::Balanced && self.partition.clients == 0 {
            return usage("partition.clients must be positive".into());
        }
        if let Err(err) = self.model.validate() {
            return usage(format!("model: {err}"));
        }
        Ok(())
    }

    /// Seed of every repeat, a pure function of the master seed and the
    /// repeat index unless listed explicitly.
    pub fn repeat_seeds(&self) -> Vec<u64> {
        if self.experiment.seeds.is_empty() {
            (0..self.experiment.repeats as u64)
                .map(|r| derive_seed(self.experiment.seed, r))
                .collect()
        } else {
            self.experiment.seeds.clone()
        }
    }

    pub fn run_options(&self, seed: u64) -> RunOptions {
        RunOptions {
            rounds: self.federation.rounds,
            local_epochs: self.federation.local_epochs,
            participation: self.federation.participation,
            seed,
        }
    }
}

fn in_stage<T>(stage: &str, repeat: usize, r: Result<T>) -> Result<T> {
    r.map_err(|source| Error::Stage {
        stage: stage.to_string(),
        repeat,
        source: Box::new(source),
    })
}

/// Builds the federated dataset of one repeat.
pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ClientData>> {
    enum Loaded {
        Whole(crate::Graph),
        Clients(Vec<crate::Graph>),
    }
    let gen = GeneratorConfig {
        seed,
        ..cfg.generator.clone()
    };
    let loaded = match cfg.dataset.source {
        DataSource::Generated => match cfg.partition.method {
            PartitionMethod::None => Loaded::Clients(
                generate_conflicting_clients(&gen, cfg.dataset.clients, cfg.dataset.conflict_strength)?
                    .graphs,
            ),
            _ => Loaded::Whole(generate_graph(&gen)?),
        },
        DataSource::Files => {
            let path = cfg
                .dataset
                .path
                .as_deref()
                .ok_or_else(|| Error::Usage("dataset.path is not set".into()))?;
            if path.join(META_FILE).exists() {
                Loaded::Whole(load_bundle(path)?)
            } else {
                Loaded::Clients(load_client_bundles(path)?)
            }
        }
    };
    let mut data = match loaded {
        Loaded::Clients(graphs) => client_data_from_graphs(graphs, seed)?,
        Loaded::Whole(g) => {
            let pa = match cfg.partition.method {
                PartitionMethod::None => crate::partition::PartitionAssignment::from_labels(&vec![0; g.num_nodes()]),
                PartitionMethod::Louvain => {
                    let pa = louvain(&g, seed)?;
                    merge_small_communities(&g, &pa, cfg.partition.min_size, seed)?
                }
                PartitionMethod::Balanced => balanced_partition(&g, cfg.partition.clients, seed)?,
            };
            make_federated_dataset(&g, &pa, seed)?
        }
    };
    if cfg.dataset.edge_noise > 0.0 {
        for (i, d) in data.iter_mut().enumerate() {
            d.graph = d
                .graph
                .flip_edge_noise(cfg.dataset.edge_noise, stream_seed(seed, "noise", i as u64))?;
        }
    }
    Ok(data)
}

/// What a checkpoint directory needs to be evaluated again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub method: Method,
    pub scope: AggregationScope,
    pub num_clients: usize,
}

pub struct RepeatOutcome {
    pub seed: u64,
    pub history: Vec<RoundMetrics>,
    pub clients: Vec<ClientState>,
    pub summary: RunSummary,
}

/// Runs one full pipeline: data, training, summary.
pub fn run_repeat(cfg: &ExperimentConfig, repeat: usize, seed: u64) -> Result<RepeatOutcome> {
    let data = in_stage("data", repeat, load_dataset(cfg, seed))?;
    let (history, clients) = in_stage(
        "train",
        repeat,
        run_method(
            &data,
            cfg.federation.method,
            &cfg.model,
            cfg.federation.scope,
            &cfg.run_options(seed),
        ),
    )?;
    let summary = in_stage("summary", repeat, RunSummary::from_history(&history))?;
    Ok(RepeatOutcome {
        seed,
        history,
        clients,
        summary,
    })
}

/// Writes `metrics.csv`, `summary.json` and `checkpoints/` into `dir`.
pub fn write_run_artifacts(dir: &Path, cfg: &ExperimentConfig, outcome: &RepeatOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics_csv(&dir.join(METRICS_FILE), &outcome.history)?;
    write_json(&dir.join(SUMMARY_FILE), &outcome.summary)?;
    let ckpt = dir.join(CHECKPOINT_DIR);
    let hp = cfg.federation.method.hyperparams(&cfg.model);
    for c in &outcome.clients {
        save_checkpoint(&ckpt.join(client_dir_name(c.client_id)), &c.params, &hp)?;
    }
    write_json(
        &ckpt.join(RUN_INFO_FILE),
        &RunInfo {
            seed: outcome.seed,
            method: cfg.federation.method,
            scope: cfg.federation.method.scope(cfg.federation.scope),
            num_clients: outcome.clients.len(),
        },
    )
}

/// Scores the client checkpoints in `checkpoints` on the client bundles in
/// `data_dir`, which must be the data the run was trained on: the test
/// split is redrawn from the run seed. `lia_pairs` enables the
/// link-inference attack with that many edges and as many non-edges.
pub fn evaluate_run(checkpoints: &Path, data_dir: &Path, lia_pairs: Option<usize>) -> Result<EvalReport> {
    let info: RunInfo = read_json(&checkpoints.join(RUN_INFO_FILE))?;
    let graphs = load_client_bundles(data_dir)?;
    if graphs.len() != info.num_clients {
        return Err(Error::Protocol(format!(
            "run has {} clients but {} holds {}",
            info.num_clients,
            data_dir.display(),
            graphs.len()
        )));
    }
    let data = client_data_from_graphs(graphs, info.seed)?;
    let mut evals = Vec::with_capacity(data.len());
    let mut distributions = Vec::with_capacity(data.len());
    for (i, d) in data.iter().enumerate() {
        let (params, hp) = load_checkpoint(&checkpoints.join(client_dir_name(i)))?;
        let mut rng = seeded(stream_seed(info.seed, "eval", i as u64));
        let pred = predict(&params, &GraphContext::new(&d.graph), &hp, Some(&mut rng))?;
        let labels = d.graph.labels();
        let auc = if d.graph.num_classes() == 2 {
            let scores: Vec<f64> = pred.logits.rows().into_iter().map(|r| r[1] - r[0]).collect();
            binary_auc(&scores, labels, &d.split.test_mask).ok()
        } else {
            None
        };
        let lia_accuracy = match lia_pairs {
            Some(n) if d.graph.num_edges() > 0 => Some(link_inference_attack(
                &pred.z_out,
                &d.graph,
                n.min(d.graph.num_edges()),
                stream_seed(info.seed, "lia", i as u64),
            )?),
            _ => None,
        };
        evals.push(ClientEval {
            client: i,
            accuracy: accuracy(&pred.logits, labels, &d.split.test_mask)?,
            auc,
            lia_accuracy,
            homophily: d.graph.edge_homophily().ok(),
        });
        distributions.push(d.graph.neighbor_label_distribution());
    }
    EvalReport::new(evals, &client_divergence(&distributions)?)
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub run_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub final_test_accuracy: Vec<f64>,
    pub mean_final_test_accuracy: f64,
    pub std_final_test_accuracy: f64,
    pub best_val_test_accuracy: Vec<f64>,
    pub mean_best_val_test_accuracy: f64,
    pub std_best_val_test_accuracy: f64,
}

/// Creates `root/run-<timestamp>`, adding a numeric suffix on collision.
pub fn create_run_dir(root: &Path, prefix: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    for n in 0.. {
        let name = if n == 0 {
            format!("{prefix}-{stamp}")
        } else {
            format!("{prefix}-{stamp}-{n}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

/// Runs every repeat under a fresh timestamped directory in `out_root`.
///
/// Layout: `config.toml`, `summary.json`, and `repeat_<r>/` holding that
/// repeat's metrics, summary and checkpoints.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let run_dir = create_run_dir(out_root, "run")?;
    cfg.save(&run_dir.join(CONFIG_FILE))?;
    let seeds = cfg.repeat_seeds();
    let mut finals = Vec::with_capacity(seeds.len());
    let mut best = Vec::with_capacity(seeds.len());
    for (r, &seed) in seeds.iter().enumerate() {
        log::info!("repeat {r} (seed {seed})");
        let outcome = run_repeat(cfg, r, seed)?;
        let dir = run_dir.join(format!("repeat_{r}"));
        in_stage("write", r, write_run_artifacts(&dir, cfg, &outcome))?;
        finals.push(outcome.summary.final_test_accuracy);
        best.push(outcome.summary.best_val_test_accuracy);
    }
    let (mf, sf) = mean_std(&finals);
    let (mb, sb) = mean_std(&best);
    let summary = ExperimentSummary {
        run_dir: run_dir.clone(),
        seeds,
        final_test_accuracy: finals,
        mean_final_test_accuracy: mf,
        std_final_test_accuracy: sf,
        best_val_test_accuracy: best,
        mean_best_val_test_accuracy: mb,
        std_best_val_test_accuracy: sb,
    };
    write_json(&run_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Lambda,
    Mu,
    K,
    Heads,
    Scope,
    Sparsifier,
}

pub const SWEEP_PARAMS: &str = "alpha, lambda, mu, k, heads, scope, sparsifier";

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha" => Self::Alpha,
            "lambda" => Self::Lambda,
            "mu" => Self::Mu,
            "k" => Self::K,
            "heads" => Self::Heads,
            "scope" => Self::Scope,
            "sparsifier" => Self::Sparsifier,
            _ => {
                return Err(Error::Usage(format!(
                    "unknown sweep parameter `{s}` (valid: {SWEEP_PARAMS})"
                )))
            }
        })
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Lambda => "lambda",
            Self::Mu => "mu",
            Self::K => "k",
            Self::Heads => "heads",
            Self::Scope => "scope",
            Self::Sparsifier => "sparsifier",
        }
    }

    /// `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let bad = |what: &str| Error::Usage(format!("{}: `{value}` is not {what}", self.name()));
        let real = || value.parse::<f64>().map_err(|_| bad("a number"));
        let count = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let mut out = cfg.clone();
        match self {
            Self::Alpha => out.model.alpha = real()?,
            Self::Lambda => out.model.lambda_smooth = real()?,
            Self::Mu => out.model.mu_smooth = real()?,
            Self::K => out.model.k_neighbors = count()?,
            Self::Heads => out.model.num_heads = count()?,
            Self::Scope => out.federation.scope = value.parse()?,
            Self::Sparsifier => out.model.sparsifier = value.parse::<Sparsifier>()?,
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub parameter: String,
    pub value: String,
    pub repeats: usize,
    pub mean_final_test_accuracy: f64,
    pub std_final_test_accuracy: f64,
    pub mean_best_val_test_accuracy: f64,
    pub run_dir: String,
}

/// One [`run_experiment`] per value; the table is also written to
/// `out_root/ablation_<param>.csv`.
pub fn ablate(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[String],
    out_root: &Path,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::Usage(format!("no values given for sweep over {}", param.name())));
    }
    let configs = values
        .iter()
        .map(|v| {
            let c = param.apply(cfg, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, c) in values.iter().zip(&configs) {
        log::info!("sweep {} = {value}", param.name());
        let s = run_experiment(c, out_root)?;
        rows.push(AblationRow {
            parameter: param.name().to_string(),
            value: value.clone(),
            repeats: s.seeds.len(),
            mean_final_test_accuracy: s.mean_final_test_accuracy,
            std_final_test_accuracy: s.std_final_test_accuracy,
            mean_best_val_test_accuracy: s.mean_best_val_test_accuracy,
            run_dir: s.run_dir.display().to_string(),
        });
    }
    let path = out_root.join(format!("ablation_{}.csv", param.name()));
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.generator.num_nodes = 40;
        cfg.generator.num_classes = 3;
        cfg.generator.mean_degree = 4.0;
        cfg.generator.feature_dim = 4;
        cfg.dataset.clients = 2;
        cfg.model.hidden_dim = 4;
        cfg.model.k_neighbors = 3;
        cfg.federation.rounds = 2;
        cfg.experiment.repeats = 1;
        cfg
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.render().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        assert!(text.contains("[federation]"));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::parse("[model]\nalpha = 0.4\n[experiment]\nrepeats = 2\n").unwrap();
        assert_eq!(cfg.model.alpha, 0.4);
        assert_eq!(cfg.model.k_neighbors, 20);
        assert_eq!(cfg.experiment.repeats, 2);
    }

    #[test]
    fn invalid_configs_are_usage_errors() {
        for text in [
            "[experiment]\nrepeats = 0\n",
            "[experiment]\nrepeats = 2\nseeds = [1]\n",
            "[model]\nalpha = 2.0\n",
            "[dataset]\nsource = \"files\"\n",
            "[model]\nbogus = 1\n",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Usage(_))), "{text}");
        }
    }

    #[test]
    fn repeat_seeds_are_derived_or_listed() {
        let mut cfg = ExperimentConfig::default();
        let a = cfg.repeat_seeds();
        assert_eq!(a, cfg.repeat_seeds());
        assert_eq!(a.len(), 5);
        cfg.experiment.seeds = vec![1, 2, 3, 4, 5];
        assert_eq!(cfg.repeat_seeds(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sweep_parameters() {
        assert!(matches!("gamma".parse::<SweepParam>(), Err(Error::Usage(m)) if m.contains("alpha")));
        let cfg = ExperimentConfig::default();
        let c = SweepParam::K.apply(&cfg, "5").unwrap();
        assert_eq!(c.model.k_neighbors, 5);
        let c = SweepParam::Scope.apply(&cfg, "task").unwrap();
        assert_eq!(c.federation.scope, AggregationScope::TaskOnly);
        assert!(SweepParam::Alpha.apply(&cfg, "x").is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ablate(&cfg, SweepParam::Alpha, &[], dir.path()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn experiment_writes_artifacts_and_evaluates() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let cfg = tiny();
        let graphs = generate_conflicting_clients(
            &GeneratorConfig { seed: 9, ..cfg.generator.clone() },
            2,
            1.0,
        )
        .unwrap()
        .graphs;
        crate::io::save_client_bundles(&data_dir, &graphs).unwrap();
        let mut cfg = cfg;
        cfg.dataset.source = DataSource::Files;
        cfg.dataset.path = Some(data_dir.clone());
        cfg.experiment.repeats = 2;
        let s = run_experiment(&cfg, &dir.path().join("runs")).unwrap();
        assert_eq!(s.final_test_accuracy.len(), 2);
        let again = ExperimentConfig::load(&s.run_dir.join(CONFIG_FILE)).unwrap();
        assert_eq!(again, cfg);
        let repeat = s.run_dir.join("repeat_1");
        let r: RunSummary = read_json(&repeat.join(SUMMARY_FILE)).unwrap();
        assert_eq!(r.final_test_accuracy, s.final_test_accuracy[1]);
        let report = evaluate_run(&repeat.join(CHECKPOINT_DIR), &data_dir, Some(10)).unwrap();
        assert_eq!(report.clients.len(), 2);
        assert!((report.mean_accuracy - r.final_test_accuracy).abs() < 1e-12);
        assert!(report.mean_lia_accuracy.is_some());
    }

    #[test]
    fn stage_errors_name_stage_and_repeat() {
        let mut cfg = tiny();
        cfg.dataset.source = DataSource::Files;
        cfg.dataset.path = Some(PathBuf::from("/nonexistent/fedhero-data"));
        match run_repeat(&cfg, 3, 0) {
            Err(Error::Stage { stage, repeat, .. }) => assert_eq!((stage.as_str(), repeat), ("data", 3)),
            other => panic!("{:?}", other.err()),
        }
    }
}
