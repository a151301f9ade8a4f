//! `fedhero` command-line driver.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.
//! Progress goes to stderr; results are written to files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use fedhero::eval::{curves_from_metrics_csv, write_curves};
use fedhero::experiment::{
    ablate, evaluate_run, run_experiment, DataSource, ExperimentConfig, SweepParam, METRICS_FILE,
};
use fedhero::federated::{AggregationScope, Method};
use fedhero::io::{load_bundle, save_bundle, save_client_bundles, write_json};
use fedhero::model::{model_grad_check, GraphContext, Hyperparams, ModelParams, Sparsifier};
use fedhero::partition::{balanced_partition, louvain, merge_small_communities};
use fedhero::synthgen::{generate_conflicting_clients, generate_graph, GeneratorConfig, MixingMatrix};
use fedhero::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fedhero", version, about = "Federated node classification on heterophilic graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic client graphs with conflicting neighbor distributions.
    GenData(GenDataArgs),
    /// Split one graph bundle into client bundles.
    Partition(PartitionArgs),
    /// Train with repeats and write metrics, summaries and checkpoints.
    Train(TrainArgs),
    /// Score saved checkpoints, optionally with the link-inference attack.
    Evaluate(EvaluateArgs),
    /// Sweep one hyperparameter and tabulate the results.
    Ablate(AblateArgs),
    /// Check analytic gradients of the model against finite differences.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 1000)]
    nodes: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 0.2)]
    homophily: f64,
    #[arg(long, default_value_t = 10.0)]
    degree: f64,
    /// With 1, a single bundle is written directly into --out.
    #[arg(long, default_value_t = 4)]
    clients: usize,
    #[arg(long, default_value_t = 1.0)]
    conflict: f64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PartitionKind {
    Louvain,
    Balanced,
}

#[derive(Args)]
struct PartitionArgs {
    /// Graph bundle directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    method: PartitionKind,
    /// Part count for the balanced method.
    #[arg(long, default_value_t = 4)]
    clients: usize,
    /// Louvain communities below this size are merged.
    #[arg(long, default_value_t = 50)]
    min_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Settings shared by `train` and `ablate`; each overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of client bundles; without it data is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    scope: Option<AggregationScope>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sparsifier: Option<Sparsifier>,
    #[arg(long)]
    edge_noise: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// `checkpoints` directory of one repeat.
    #[arg(long)]
    checkpoints: PathBuf,
    /// Client bundles the run was trained on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    lia: bool,
    /// Edge and non-edge pairs sampled per client by the attack.
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// One of alpha, lambda, mu, k, heads, scope, sparsifier.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<String>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value = "selftest.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn resolve_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let mut c = ExperimentConfig::default();
            c.experiment.repeats = 1;
            c
        }
    };
    if let Some(dir) = &a.data {
        cfg.dataset.source = DataSource::Files;
        cfg.dataset.path = Some(dir.clone());
    }
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value {
                $field = v;
            }
        };
    }
    set!(cfg.federation.method, a.method);
    set!(cfg.federation.scope, a.scope);
    set!(cfg.federation.rounds, a.rounds);
    set!(cfg.model.alpha, a.alpha);
    set!(cfg.model.k_neighbors, a.k);
    set!(cfg.model.num_heads, a.heads);
    set!(cfg.model.lambda_smooth, a.lambda);
    set!(cfg.model.mu_smooth, a.mu);
    set!(cfg.model.hidden_dim, a.hidden);
    set!(cfg.model.learning_rate, a.lr);
    set!(cfg.model.sparsifier, a.sparsifier);
    set!(cfg.dataset.edge_noise, a.edge_noise);
    set!(cfg.experiment.repeats, a.repeats);
    if let Some(s) = a.seed {
        cfg.experiment.seed = s;
        cfg.experiment.seeds.clear();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Manifest {
    generator: GeneratorConfig,
    conflict_strength: f64,
    mixings: Vec<MixingMatrix>,
    homophily: Vec<f64>,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = GeneratorConfig {
        num_nodes: a.nodes,
        num_classes: a.classes,
        target_homophily: a.homophily,
        mean_degree: a.degree,
        feature_dim: a.feature_dim,
        class_mixing: None,
        feature_separation: a.separation,
        seed: a.seed,
    };
    let (graphs, mixings) = if a.clients == 1 {
        let g = generate_graph(&cfg)?;
        save_bundle(&a.out, &g)?;
        (vec![g], vec![cfg.mixing()])
    } else {
        let cc = generate_conflicting_clients(&cfg, a.clients, a.conflict)?;
        save_client_bundles(&a.out, &cc.graphs)?;
        (cc.graphs, cc.mixings)
    };
    let homophily = graphs.iter().map(|g| g.edge_homophily()).collect::<Result<Vec<_>>>()?;
    for (i, h) in homophily.iter().enumerate() {
        log::info!("client {i}: {} nodes, {} edges, homophily {h:.3}", graphs[i].num_nodes(), graphs[i].num_edges());
    }
    write_json(
        &a.out.join("manifest.json"),
        &Manifest {
            generator: cfg,
            conflict_strength: a.conflict,
            mixings,
            homophily,
        },
    )
}

#[derive(Serialize)]
struct PartitionReport {
    method: &'static str,
    num_clients: usize,
    sizes: Vec<usize>,
    whole_homophily: Option<f64>,
    client_homophily: Vec<Option<f64>>,
}

fn partition(a: &PartitionArgs) -> Result<()> {
    let g = load_bundle(&a.data)?;
    let (method, pa) = match a.method {
        PartitionKind::Louvain => {
            let raw = louvain(&g, a.seed)?;
            ("louvain", merge_small_communities(&g, &raw, a.min_size, a.seed)?)
        }
        PartitionKind::Balanced => ("balanced", balanced_partition(&g, a.clients, a.seed)?),
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    pa.write_csv(&a.out.join("assignment.csv"))?;
    let graphs = pa
        .members()
        .iter()
        .map(|nodes| g.induced_subgraph(nodes).map(|(sub, _)| sub))
        .collect::<Result<Vec<_>>>()?;
    save_client_bundles(&a.out, &graphs)?;
    let report = PartitionReport {
        method,
        num_clients: graphs.len(),
        sizes: pa.sizes(),
        whole_homophily: g.edge_homophily().ok(),
        client_homophily: graphs.iter().map(|s| s.edge_homophily().ok()).collect(),
    };
    log::info!("{method}: {} clients, sizes {:?}", report.num_clients, report.sizes);
    write_json(&a.out.join("partition.json"), &report)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.run)?;
    let s = run_experiment(&cfg, &a.run.out)?;
    eprintln!(
        "final test accuracy {:.4} ± {:.4} over {} repeats ({})",
        s.mean_final_test_accuracy,
        s.std_final_test_accuracy,
        s.seeds.len(),
        s.run_dir.display()
    );
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let report = evaluate_run(&a.checkpoints, &a.data, a.lia.then_some(a.pairs))?;
    write_json(&a.out, &report)?;
    let metrics = a.checkpoints.parent().map(|p| p.join(METRICS_FILE));
    if let Some(metrics) = metrics.filter(|m| m.exists()) {
        let curves = a.out.parent().unwrap_or(Path::new(".")).join("curves.csv");
        write_curves(&curves, &curves_from_metrics_csv(&metrics)?)?;
    }
    eprintln!("mean test accuracy {:.4}", report.mean_accuracy);
    if let Some(lia) = report.mean_lia_accuracy {
        eprintln!("mean link-inference accuracy {lia:.4}");
    }
    Ok(())
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let param: SweepParam = a.param.parse()?;
    let cfg = resolve_config(&a.run)?;
    for row in ablate(&cfg, param, &a.values, &a.run.out)? {
        eprintln!(
            "{} = {}: {:.4} ± {:.4}",
            row.parameter, row.value, row.mean_final_test_accuracy, row.std_final_test_accuracy
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SelftestReport {
    passed: bool,
    checks: Vec<(String, fedhero::autodiff::GradCheckReport)>,
}

fn selftest(a: &SelftestArgs) -> Result<bool> {
    let g = generate_graph(&GeneratorConfig {
        num_nodes: 12,
        num_classes: 3,
        target_homophily: 0.3,
        mean_degree: 3.0,
        feature_dim: 4,
        class_mixing: None,
        feature_separation: 1.0,
        seed: 7,
    })?;
    let ctx = GraphContext::new(&g);
    let mask = Arc::new((0..12).map(|i| i % 3 != 0).collect::<Vec<_>>());
    let dual = Hyperparams {
        k_neighbors: 3,
        num_heads: 2,
        hidden_dim: 5,
        ..Hyperparams::default()
    };
    let mut checks = Vec::new();
    for (name, hp) in [("dual_channel", dual.clone()), ("plain", dual.plain())] {
        let params = ModelParams::init(&hp, 4, 3, 11)?;
        let r = model_grad_check(&params, &ctx, &hp, &mask, a.step, a.tol)?;
        eprintln!("{name}: {}", if r.passed { "ok" } else { "FAILED" });
        for b in r.failing() {
            eprintln!("  block {b} exceeds tolerance");
        }
        checks.push((name.to_string(), r));
    }
    let passed = checks.iter().all(|(_, r)| r.passed);
    write_json(&a.out, &SelftestReport { passed, checks })?;
    Ok(passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Partition(a) => partition(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Selftest(a) => selftest(a).and_then(|ok| {
            if ok {
                Ok(())
            } else {
                Err(Error::NumericFault {
                    op: "selftest".into(),
                    detail: "gradient check failed".into(),
                })
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
