//! Text formats for graphs.
//!
//! * edges: one `u<TAB>v` pair per line (any whitespace accepted), 0-based,
//!   `#` starts a comment
//! * features: CSV without header, row `i` holds node `i`
//! * labels: one integer class id per line
//!
//! A bundle directory holds `edges.tsv`, `features.csv`, `labels.csv` and
//! `meta.json`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{features_from_rows, Graph};

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub undirected: bool,
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut parts = body.split_whitespace();
        let mut next_id = || -> Result<usize> {
            let tok = parts
                .next()
                .ok_or_else(|| parse_err(path, i + 1, "expected two node ids"))?;
            tok.parse()
                .map_err(|_| parse_err(path, i + 1, format!("`{tok}` is not a node id")))
        };
        let u = next_id()?;
        let v = next_id()?;
        if parts.next().is_some() {
            return Err(parse_err(path, i + 1, "expected exactly two node ids"));
        }
        edges.push((u, v));
    }
    Ok(edges)
}

pub fn read_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(open(path)?);
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        let row = record
            .iter()
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, i + 1, format!("`{tok}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let tok = line.trim();
        if tok.is_empty() {
            continue;
        }
        labels.push(
            tok.parse()
                .map_err(|_| parse_err(path, i + 1, format!("`{tok}` is not a class id")))?,
        );
    }
    Ok(labels)
}

/// Loads an undirected graph from the three text files. The class count is
/// inferred as `max(label) + 1`.
pub fn load_graph_files(edge_path: &Path, feature_path: &Path, label_path: &Path) -> Result<Graph> {
    load_graph_files_with(edge_path, feature_path, label_path, true, None)
}

pub fn load_graph_files_with(
    edge_path: &Path,
    feature_path: &Path,
    label_path: &Path,
    undirected: bool,
    num_classes: Option<usize>,
) -> Result<Graph> {
    let edges = read_edges(edge_path)?;
    let rows = read_features(feature_path)?;
    let labels = read_labels(label_path)?;
    if rows.len() != labels.len() {
        return Err(Error::input(format!(
            "{} has {} rows but {} has {} labels",
            feature_path.display(),
            rows.len(),
            label_path.display(),
            labels.len()
        )));
    }
    let features = features_from_rows(&rows)?;
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Graph::from_edges(&edges, features, labels, c, undirected)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn save_bundle(dir: &Path, g: &Graph) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(EDGES_FILE);
    let mut w = create(&path)?;
    let werr = |p: &PathBuf| {
        let p = p.clone();
        move |e| Error::io(p, e)
    };
    for (u, v) in g.edges() {
        writeln!(w, "{u}\t{v}").map_err(werr(&path))?;
    }
    w.flush().map_err(werr(&path))?;

    let path = dir.join(FEATURES_FILE);
    let mut w = create(&path)?;
    for row in g.features().rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(werr(&path))?;
    }
    w.flush().map_err(werr(&path))?;

    let path = dir.join(LABELS_FILE);
    let mut w = create(&path)?;
    for y in g.labels() {
        writeln!(w, "{y}").map_err(werr(&path))?;
    }
    w.flush().map_err(werr(&path))?;

    let meta = BundleMeta {
        num_nodes: g.num_nodes(),
        num_classes: g.num_classes(),
        undirected: g.is_undirected(),
    };
    write_json(&dir.join(META_FILE), &meta)
}

pub fn load_bundle(dir: &Path) -> Result<Graph> {
    let meta: BundleMeta = read_json(&dir.join(META_FILE))?;
    let g = load_graph_files_with(
        &dir.join(EDGES_FILE),
        &dir.join(FEATURES_FILE),
        &dir.join(LABELS_FILE),
        meta.undirected,
        Some(meta.num_classes),
    )?;
    if g.num_nodes() != meta.num_nodes {
        return Err(Error::input(format!(
            "{} declares {} nodes but the files hold {}",
            dir.display(),
            meta.num_nodes,
            g.num_nodes()
        )));
    }
    Ok(g)
}

/// Subdirectory name of client `i` in a multi-client data directory.
pub fn client_dir_name(i: usize) -> String {
    format!("client_{i}")
}

pub fn save_client_bundles(dir: &Path, graphs: &[Graph]) -> Result<()> {
    for (i, g) in graphs.iter().enumerate() {
        save_bundle(&dir.join(client_dir_name(i)), g)?;
    }
    Ok(())
}

/// Loads `client_0`, `client_1`, ... until the first missing index.
pub fn load_client_bundles(dir: &Path) -> Result<Vec<Graph>> {
    let mut graphs = Vec::new();
    loop {
        let sub = dir.join(client_dir_name(graphs.len()));
        if !sub.join(META_FILE).exists() {
            break;
        }
        graphs.push(load_bundle(&sub)?);
    }
    if graphs.is_empty() {
        return Err(Error::input(format!(
            "{} holds no client bundles (expected {}/{META_FILE})",
            dir.display(),
            client_dir_name(0)
        )));
    }
    Ok(graphs)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_space_separated_path() {
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("e.tsv");
        let f = dir.path().join("f.csv");
        let l = dir.path().join("l.csv");
        fs::write(&e, "0 1\n1 2").unwrap();
        fs::write(&f, "0.5,1\n2,3\n4,5\n").unwrap();
        fs::write(&l, "0\n1\n0\n").unwrap();
        let g = load_graph_files(&e, &f, &l).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.edges(), vec![(0, 1), (1, 2)]);
        assert_eq!(g.num_classes(), 2);
    }

    #[test]
    fn comments_and_tabs() {
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("e.tsv");
        fs::write(&e, "# header\n0\t1 # trailing\n\n2\t0\n").unwrap();
        assert_eq!(read_edges(&e).unwrap(), vec![(0, 1), (2, 0)]);
    }

    #[test]
    fn malformed_line_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("e.tsv");
        fs::write(&e, "0\t1\n1\tx\n").unwrap();
        match read_edges(&e) {
            Err(Error::Parse { file, line, .. }) => {
                assert_eq!(file, e);
                assert_eq!(line, 2);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn row_label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("e.tsv");
        let f = dir.path().join("f.csv");
        let l = dir.path().join("l.csv");
        fs::write(&e, "0\t1\n").unwrap();
        fs::write(&f, "1\n2\n").unwrap();
        fs::write(&l, "0\n").unwrap();
        assert!(matches!(load_graph_files(&e, &f, &l), Err(Error::Input(_))));
    }
}
