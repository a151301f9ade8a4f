//! Classification metrics, the link-inference attack, neighbor-distribution
//! divergence and convergence-curve export.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::cosine;
use crate::error::{Error, Result};
use crate::graph::{Graph, NeighborLabelDistribution};
use crate::rng::seeded;

/// Index of the largest entry; the smallest index wins ties.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy(logits: &Array2<f64>, labels: &[usize], mask: &[bool]) -> Result<f64> {
    if labels.len() != logits.nrows() || mask.len() != logits.nrows() {
        return Err(Error::input(format!(
            "accuracy: {} rows, {} labels, {} mask entries",
            logits.nrows(),
            labels.len(),
            mask.len()
        )));
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for (i, row) in logits.rows().into_iter().enumerate() {
        if mask[i] {
            total += 1;
            correct += usize::from(argmax(row) == labels[i]);
        }
    }
    if total == 0 {
        return Err(Error::input("accuracy: mask selects no nodes"));
    }
    Ok(correct as f64 / total as f64)
}

/// Mann–Whitney AUC: probability that a random positive outscores a random
/// negative, ties counted as one half.
pub fn binary_auc(scores: &[f64], labels: &[usize], mask: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || mask.len() != labels.len() {
        return Err(Error::input("binary_auc: scores, labels and mask differ in length"));
    }
    let mut items: Vec<(f64, bool)> = (0..scores.len())
        .filter(|&i| mask[i])
        .map(|i| (scores[i], labels[i] == 1))
        .collect();
    let pos = items.iter().filter(|x| x.1).count();
    let neg = items.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC: masked nodes contain a single class".into()));
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Rank sum of positives with average ranks for tied groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j < items.len() && items[j].0 == items[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * items[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Threshold attack on embeddings: samples `num_pairs` edges and as many
/// non-edges, predicts "edge" when a pair's cosine similarity is strictly
/// above the median similarity of the sample, and returns balanced accuracy.
pub fn link_inference_attack(
    embeddings: &Array2<f64>,
    g: &Graph,
    num_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let n = g.num_nodes();
    if embeddings.nrows() != n {
        return Err(Error::input(format!(
            "{} embedding rows for {n} nodes",
            embeddings.nrows()
        )));
    }
    if num_pairs == 0 {
        return Err(Error::input("link_inference_attack: num_pairs must be positive"));
    }
    let edges = g.edges();
    if edges.len() < num_pairs {
        return Err(Error::input(format!(
            "link_inference_attack: graph has {} edges, {num_pairs} requested",
            edges.len()
        )));
    }
    let total_pairs = n * (n - 1) / 2;
    if total_pairs - edges.len() < num_pairs {
        return Err(Error::input("link_inference_attack: not enough non-edges"));
    }
    let mut rng = seeded(seed);
    let positives: Vec<(usize, usize)> = edges.choose_multiple(&mut rng, num_pairs).copied().collect();
    let mut negatives = Vec::with_capacity(num_pairs);
    let mut seen = std::collections::HashSet::new();
    while negatives.len() < num_pairs {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        let key = (u.min(v), u.max(v));
        if u != v && !g.has_edge(u, v) && seen.insert(key) {
            negatives.push(key);
        }
    }
    let sim = |(u, v): (usize, usize)| {
        let a = embeddings.row(u).to_vec();
        let b = embeddings.row(v).to_vec();
        cosine(&a, &b)
    };
    let pos_sim: Vec<f64> = positives.iter().map(|&p| sim(p)).collect();
    let neg_sim: Vec<f64> = negatives.iter().map(|&p| sim(p)).collect();
    let mut all: Vec<f64> = pos_sim.iter().chain(&neg_sim).copied().collect();
    all.sort_by(f64::total_cmp);
    let m = all.len();
    let median = if m % 2 == 0 {
        (all[m / 2 - 1] + all[m / 2]) / 2.0
    } else {
        all[m / 2]
    };
    let tpr = pos_sim.iter().filter(|&&s| s > median).count() as f64 / num_pairs as f64;
    let tnr = neg_sim.iter().filter(|&&s| s <= median).count() as f64 / num_pairs as f64;
    Ok((tpr + tnr) / 2.0)
}

/// Pairwise Frobenius distances between clients' neighbor-label
/// distributions.
pub fn client_divergence(reports: &[NeighborLabelDistribution]) -> Result<Array2<f64>> {
    let m = reports.len();
    let mut out = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..i {
            let d = reports[i].frobenius_distance(&reports[j])?;
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client: usize,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lia_accuracy: Option<f64>,
    pub homophily: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clients: Vec<ClientEval>,
    pub mean_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_lia_accuracy: Option<f64>,
    pub divergence: Vec<Vec<f64>>,
}

impl EvalReport {
    /// Assembles a report; means are unweighted over clients.
    pub fn new(clients: Vec<ClientEval>, divergence: &Array2<f64>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::input("an evaluation report needs at least one client"));
        }
        let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
        let mean_accuracy = mean(clients.iter().map(|c| c.accuracy).collect());
        let opt_mean = |xs: Vec<Option<f64>>| -> Option<f64> {
            xs.into_iter().collect::<Option<Vec<f64>>>().map(mean)
        };
        let mean_auc = opt_mean(clients.iter().map(|c| c.auc).collect());
        let mean_lia_accuracy = opt_mean(clients.iter().map(|c| c.lia_accuracy).collect());
        Ok(Self {
            clients,
            mean_accuracy,
            mean_auc,
            mean_lia_accuracy,
            divergence: divergence.rows().into_iter().map(|r| r.to_vec()).collect(),
        })
    }
}

/// One point of a convergence curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub client: String,
    pub split: String,
    pub metric: f64,
}

pub fn write_curves(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serde(format!("{other:?}")),
    })?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct MetricsRow {
    round: usize,
    client: String,
    train_acc: Option<f64>,
    val_acc: Option<f64>,
    test_acc: Option<f64>,
}

/// Accuracy curves per client and split, read back from a `metrics.csv`.
pub fn curves_from_metrics_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serde(format!("{other:?}")),
    })?;
    let mut points = Vec::new();
    for row in r.deserialize::<MetricsRow>() {
        let row = row?;
        for (split, metric) in [("train", row.train_acc), ("val", row.val_acc), ("test", row.test_acc)] {
            if let Some(metric) = metric {
                points.push(CurvePoint {
                    round: row.round,
                    client: row.client.clone(),
                    split: split.to_string(),
                    metric,
                });
            }
        }
    }
    Ok(points)
}
