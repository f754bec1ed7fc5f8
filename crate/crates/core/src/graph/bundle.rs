//! Directory bundle: `meta.json`, `edges.tsv`, `features.bin`, `labels.tsv`
//! and `masks.tsv`.
//!
//! * `edges.tsv`: `src<TAB>dst` per line, 0-indexed, each undirected edge once.
//! * `features.bin`: row-major little-endian `f32`, `num_nodes × feat_dim`.
//! * `labels.tsv`: `node<TAB>class`, or `node<TAB>c1,c2,...` in multi-label
//!   mode. Nodes without a line are unlabeled.
//! * `masks.tsv`: `node<TAB>train|val|test`.
//!
//! Blank lines and lines starting with `#` are ignored in the text files.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Graph, GraphError, Labels, Split};
use crate::autodiff::Tensor;

pub const BUNDLE_FILES: [&str; 5] = [
    "meta.json",
    "edges.tsv",
    "features.bin",
    "labels.tsv",
    "masks.tsv",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub num_nodes: usize,
    pub feat_dim: usize,
    pub num_classes: usize,
    pub multi_label: bool,
}

pub fn parse_meta(text: &str) -> Result<BundleMeta, GraphError> {
    serde_json::from_str(text).map_err(|e| GraphError::Parse {
        file: "meta.json",
        line: e.line(),
        message: e.to_string(),
    })
}

/// Non-blank, non-comment lines with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn two_fields<'a>(file: &'static str, line: usize, text: &'a str) -> Result<(&'a str, &'a str), GraphError> {
    let mut parts = text.split('\t');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), None) => Ok((a.trim(), b.trim())),
        _ => Err(GraphError::Parse {
            file,
            line,
            message: format!("expected two tab-separated fields, got {text:?}"),
        }),
    }
}

fn node_index(file: &'static str, line: usize, field: &str, num_nodes: usize) -> Result<usize, GraphError> {
    let index: usize = field.parse().map_err(|_| GraphError::Parse {
        file,
        line,
        message: format!("invalid node index {field:?}"),
    })?;
    if index >= num_nodes {
        return Err(GraphError::IndexOutOfRange {
            file,
            line,
            index,
            num_nodes,
        });
    }
    Ok(index)
}

pub fn parse_edges(text: &str, num_nodes: usize) -> Result<Vec<(usize, usize)>, GraphError> {
    const FILE: &str = "edges.tsv";
    content_lines(text)
        .map(|(line, l)| {
            let (a, b) = two_fields(FILE, line, l)?;
            Ok((
                node_index(FILE, line, a, num_nodes)?,
                node_index(FILE, line, b, num_nodes)?,
            ))
        })
        .collect()
}

pub fn decode_features(bytes: &[u8], num_nodes: usize, feat_dim: usize) -> Result<Tensor, GraphError> {
    let expected = num_nodes
        .checked_mul(feat_dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| GraphError::Invalid("feature matrix size overflows".into()))?;
    if bytes.len() != expected {
        return Err(GraphError::ByteLength {
            file: "features.bin",
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(vec![num_nodes, feat_dim], data).map_err(|e| GraphError::Invalid(e.to_string()))
}

/// Narrows features to `f32` little-endian bytes.
pub fn encode_features(features: &Tensor) -> Vec<u8> {
    features
        .data()
        .iter()
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect()
}

pub fn parse_labels(text: &str, meta: &BundleMeta) -> Result<(Labels, Vec<bool>), GraphError> {
    const FILE: &str = "labels.tsv";
    let n = meta.num_nodes;
    let mut labeled = vec![false; n];
    let mut single = vec![0usize; if meta.multi_label { 0 } else { n }];
    let mut multi = if meta.multi_label {
        n.checked_mul(meta.num_classes)
            .map(|len| vec![0.0; len])
            .ok_or_else(|| GraphError::Invalid("label matrix size overflows".into()))?
    } else {
        Vec::new()
    };
    let class = |line: usize, s: &str| -> Result<usize, GraphError> {
        let c: usize = s.trim().parse().map_err(|_| GraphError::Parse {
            file: FILE,
            line,
            message: format!("invalid class {s:?}"),
        })?;
        if c >= meta.num_classes {
            return Err(GraphError::Parse {
                file: FILE,
                line,
                message: format!("class {c} out of range for {} classes", meta.num_classes),
            });
        }
        Ok(c)
    };
    for (line, l) in content_lines(text) {
        let (node, value) = two_fields(FILE, line, l)?;
        let v = node_index(FILE, line, node, n)?;
        if labeled[v] {
            return Err(GraphError::Parse {
                file: FILE,
                line,
                message: format!("node {v} labeled twice"),
            });
        }
        labeled[v] = true;
        if meta.multi_label {
            for part in value.split(',').filter(|p| !p.trim().is_empty()) {
                let c = class(line, part)?;
                multi[v * meta.num_classes + c] = 1.0;
            }
        } else {
            single[v] = class(line, value)?;
        }
    }
    let labels = if meta.multi_label {
        Labels::Multi(Arc::new(
            Tensor::new(vec![n, meta.num_classes], multi).expect("label matrix"),
        ))
    } else {
        Labels::Single(Arc::new(single))
    };
    Ok((labels, labeled))
}

pub fn parse_masks(text: &str, num_nodes: usize) -> Result<[Vec<bool>; 3], GraphError> {
    const FILE: &str = "masks.tsv";
    let mut masks = [vec![false; num_nodes], vec![false; num_nodes], vec![false; num_nodes]];
    for (line, l) in content_lines(text) {
        let (node, split) = two_fields(FILE, line, l)?;
        let v = node_index(FILE, line, node, num_nodes)?;
        let idx = match split {
            "train" => 0,
            "val" => 1,
            "test" => 2,
            other => {
                return Err(GraphError::Parse {
                    file: FILE,
                    line,
                    message: format!("unknown split {other:?}"),
                })
            }
        };
        if masks.iter().any(|m| m[v]) {
            return Err(GraphError::Parse {
                file: FILE,
                line,
                message: format!("node {v} assigned to more than one split"),
            });
        }
        masks[idx][v] = true;
    }
    Ok(masks)
}

/// Assembles a graph from in-memory bundle contents.
pub fn parse_bundle(
    meta: &str,
    edges: &str,
    features: &[u8],
    labels: &str,
    masks: &str,
) -> Result<Graph, GraphError> {
    let meta = parse_meta(meta)?;
    let edges = parse_edges(edges, meta.num_nodes)?;
    let features = decode_features(features, meta.num_nodes, meta.feat_dim)?;
    let (labels, labeled) = parse_labels(labels, &meta)?;
    let masks = parse_masks(masks, meta.num_nodes)?;
    Graph::from_edges(
        meta.num_nodes,
        &edges,
        features,
        labels,
        labeled,
        meta.num_classes,
    )?
    .with_masks(masks)
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>, GraphError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(GraphError::MissingFile { path });
    }
    fs::read(&path).map_err(|source| GraphError::Io { path, source })
}

fn read_text(dir: &Path, name: &'static str) -> Result<String, GraphError> {
    String::from_utf8(read(dir, name)?).map_err(|_| GraphError::Parse {
        file: name,
        line: 0,
        message: "not valid UTF-8".into(),
    })
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Graph, GraphError> {
    let dir = dir.as_ref();
    for name in BUNDLE_FILES {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(GraphError::MissingFile { path });
        }
    }
    let graph = parse_bundle(
        &read_text(dir, "meta.json")?,
        &read_text(dir, "edges.tsv")?,
        &read(dir, "features.bin")?,
        &read_text(dir, "labels.tsv")?,
        &read_text(dir, "masks.tsv")?,
    )?;
    log::info!(
        "loaded {}: {} nodes, {} edge lines, {} distinct undirected edges",
        dir.display(),
        graph.num_nodes(),
        graph.raw_edge_count(),
        graph.edge_count()
    );
    Ok(graph)
}

pub fn save_bundle(graph: &Graph, dir: impl AsRef<Path>) -> Result<(), GraphError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| GraphError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let meta = BundleMeta {
        num_nodes: graph.num_nodes(),
        feat_dim: graph.feat_dim(),
        num_classes: graph.num_classes(),
        multi_label: graph.is_multi_label(),
    };
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io(&path))
    };
    write(
        "meta.json",
        serde_json::to_string_pretty(&meta)
            .expect("meta serializes")
            .as_bytes(),
    )?;

    let mut edges = String::new();
    for v in 0..graph.num_nodes() {
        for &u in graph.neighbors(v) {
            if v < u {
                edges.push_str(&format!("{v}\t{u}\n"));
            }
        }
    }
    write("edges.tsv", edges.as_bytes())?;
    write("features.bin", &encode_features(graph.features()))?;

    let mut labels = String::new();
    for v in (0..graph.num_nodes()).filter(|&v| graph.is_labeled(v)) {
        match graph.labels() {
            Labels::Single(l) => labels.push_str(&format!("{v}\t{}\n", l[v])),
            Labels::Multi(t) => {
                let classes: Vec<String> = (0..graph.num_classes())
                    .filter(|&c| t.get(v, c) != 0.0)
                    .map(|c| c.to_string())
                    .collect();
                labels.push_str(&format!("{v}\t{}\n", classes.join(",")));
            }
        }
    }
    write("labels.tsv", labels.as_bytes())?;

    let mut masks = String::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for (v, &m) in graph.masks[split.index()].iter().enumerate() {
            if m {
                masks.push_str(&format!("{v}\t{}\n", split.name()));
            }
        }
    }
    write("masks.tsv", masks.as_bytes())
}
