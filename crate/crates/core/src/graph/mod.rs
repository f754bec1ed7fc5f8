//! Immutable CSR graphs over the self-loop-augmented edge set, their on-disk
//! bundle format, deterministic splits and a planted-community generator.

mod bundle;
mod synth;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;

pub use bundle::{
    decode_features, encode_features, load_bundle, parse_bundle, parse_edges, parse_labels,
    parse_masks, parse_meta, save_bundle, BundleMeta, BUNDLE_FILES,
};
pub use synth::{synth_planted, PlantedConfig};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: file is missing")]
    MissingFile { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: &'static str,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: node index {index} is out of range for {num_nodes} nodes")]
    IndexOutOfRange {
        file: &'static str,
        line: usize,
        index: usize,
        num_nodes: usize,
    },
    #[error("{file}: expected {expected} bytes, found {actual}")]
    ByteLength {
        file: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("split fractions must be nonnegative and sum to 1, got {fractions:?}")]
    Fractions { fractions: [f64; 3] },
    #[error("planted generator needs 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")]
    Homophily { p_in: f64, p_out: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// Node targets: class indices, or a 0/1 matrix in multi-label mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Single(Arc<Vec<usize>>),
    Multi(Arc<Tensor>),
}

impl Labels {
    pub fn is_multi(&self) -> bool {
        matches!(self, Labels::Multi(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Graph over `Ñ(v)`: every node carries a self-loop and neighbor lists are
/// sorted and duplicate-free.
#[derive(Debug)]
pub struct Graph {
    num_nodes: usize,
    num_classes: usize,
    offsets: Vec<usize>,
    /// Neighbor `u` of each CSR edge.
    sources: Arc<Vec<usize>>,
    /// Owning row `v` of each CSR edge; sorted, usable as segment ids.
    targets: Arc<Vec<usize>>,
    features: Arc<Tensor>,
    labels: Labels,
    labeled: Vec<bool>,
    masks: [Vec<bool>; 3],
    raw_edge_count: usize,
    edge_count: usize,
    gcn_coefficients: OnceLock<Arc<Tensor>>,
    test_mask_reads: AtomicUsize,
}

impl Clone for Graph {
    fn clone(&self) -> Self {
        Self {
            num_nodes: self.num_nodes,
            num_classes: self.num_classes,
            offsets: self.offsets.clone(),
            sources: Arc::clone(&self.sources),
            targets: Arc::clone(&self.targets),
            features: Arc::clone(&self.features),
            labels: self.labels.clone(),
            labeled: self.labeled.clone(),
            masks: self.masks.clone(),
            raw_edge_count: self.raw_edge_count,
            edge_count: self.edge_count,
            gcn_coefficients: OnceLock::new(),
            test_mask_reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.num_nodes == other.num_nodes
            && self.num_classes == other.num_classes
            && self.offsets == other.offsets
            && self.sources == other.sources
            && self.features == other.features
            && self.labels == other.labels
            && self.labeled == other.labeled
            && self.masks == other.masks
            && self.edge_count == other.edge_count
    }
}

impl Graph {
    /// Builds the CSR form from undirected edges. Both directions are added,
    /// input self-loops and duplicates are dropped, and one self-loop per
    /// node is inserted. All nodes start unmasked.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Tensor,
        labels: Labels,
        labeled: Vec<bool>,
        num_classes: usize,
    ) -> Result<Self, GraphError> {
        if features.rank() != 2 || features.rows() != num_nodes {
            return Err(GraphError::Invalid(format!(
                "features of shape {:?} do not match {num_nodes} nodes",
                features.shape()
            )));
        }
        if labeled.len() != num_nodes {
            return Err(GraphError::Invalid("labeled flags do not match node count".into()));
        }
        match &labels {
            Labels::Single(l) => {
                if l.len() != num_nodes {
                    return Err(GraphError::Invalid("label count does not match node count".into()));
                }
                if let Some(bad) = l.iter().find(|&&c| c >= num_classes.max(1)) {
                    return Err(GraphError::Invalid(format!(
                        "label {bad} out of range for {num_classes} classes"
                    )));
                }
            }
            Labels::Multi(t) => {
                if t.shape() != [num_nodes, num_classes] {
                    return Err(GraphError::Invalid(format!(
                        "multi-label targets of shape {:?} do not match [{num_nodes}, {num_classes}]",
                        t.shape()
                    )));
                }
            }
        }
        let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_nodes];
        let mut undirected = BTreeSet::new();
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(GraphError::Invalid(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                continue;
            }
            undirected.insert((u.min(v), u.max(v)));
            adjacency[u].insert(v);
            adjacency[v].insert(u);
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut sources = Vec::new();
        let mut targets = Vec::new();
        offsets.push(0);
        for (v, neighbors) in adjacency.iter_mut().enumerate() {
            neighbors.insert(v);
            for &u in neighbors.iter() {
                sources.push(u);
                targets.push(v);
            }
            offsets.push(sources.len());
        }
        Ok(Self {
            num_nodes,
            num_classes,
            offsets,
            sources: Arc::new(sources),
            targets: Arc::new(targets),
            features: Arc::new(features),
            labels,
            labeled,
            masks: [vec![false; num_nodes], vec![false; num_nodes], vec![false; num_nodes]],
            raw_edge_count: edges.len(),
            edge_count: undirected.len(),
            gcn_coefficients: OnceLock::new(),
            test_mask_reads: AtomicUsize::new(0),
        })
    }

    /// Replaces the three split masks. They must be pairwise disjoint and
    /// only cover labeled nodes.
    pub fn with_masks(mut self, masks: [Vec<bool>; 3]) -> Result<Self, GraphError> {
        for m in &masks {
            if m.len() != self.num_nodes {
                return Err(GraphError::Invalid("mask length does not match node count".into()));
            }
        }
        for v in 0..self.num_nodes {
            let hits = masks.iter().filter(|m| m[v]).count();
            if hits > 1 {
                return Err(GraphError::Invalid(format!("node {v} appears in more than one split")));
            }
            if hits == 1 && !self.labeled[v] {
                return Err(GraphError::Invalid(format!("node {v} is in a split but has no label")));
            }
        }
        self.masks = masks;
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Arc<Tensor> {
        &self.features
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn is_multi_label(&self) -> bool {
        self.labels.is_multi()
    }

    pub fn is_labeled(&self, v: usize) -> bool {
        self.labeled[v]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Neighbor of each CSR edge (`u` in `Ñ(v)`).
    pub fn edge_sources(&self) -> &Arc<Vec<usize>> {
        &self.sources
    }

    /// Row of each CSR edge (`v`); sorted ascending.
    pub fn edge_targets(&self) -> &Arc<Vec<usize>> {
        &self.targets
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.sources[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes).map(|v| self.degree(v)).collect()
    }

    /// Number of CSR entries, self-loops included.
    pub fn num_csr_edges(&self) -> usize {
        self.sources.len()
    }

    /// Undirected edges as read, before deduplication.
    pub fn raw_edge_count(&self) -> usize {
        self.raw_edge_count
    }

    /// Distinct undirected non-self edges.
    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Split mask. Reads of the test mask are counted so that training code
    /// can be audited for test-set access.
    pub fn mask(&self, split: Split) -> &[bool] {
        if split == Split::Test {
            self.test_mask_reads.fetch_add(1, Ordering::Relaxed);
        }
        &self.masks[split.index()]
    }

    pub fn split_size(&self, split: Split) -> usize {
        self.masks[split.index()].iter().filter(|&&m| m).count()
    }

    pub fn test_mask_reads(&self) -> usize {
        self.test_mask_reads.load(Ordering::Relaxed)
    }

    /// `(deg(v)·deg(u))^{-1/2}` for every CSR edge, shaped `[E×1]`.
    pub fn degree_invsqrt_pairs(&self) -> Arc<Tensor> {
        Arc::clone(self.gcn_coefficients.get_or_init(|| {
            let deg: Vec<f64> = (0..self.num_nodes).map(|v| self.degree(v) as f64).collect();
            let data = self
                .sources
                .iter()
                .zip(self.targets.iter())
                .map(|(&u, &v)| 1.0 / (deg[u] * deg[v]).sqrt())
                .collect();
            Arc::new(Tensor::new(vec![self.sources.len(), 1], data).expect("edge count"))
        }))
    }

    /// Stable SHA-256 over structure, features, labels and masks.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_nodes as u64).to_le_bytes());
        h.update((self.num_classes as u64).to_le_bytes());
        for &o in &self.offsets {
            h.update((o as u64).to_le_bytes());
        }
        for &s in self.sources.iter() {
            h.update((s as u64).to_le_bytes());
        }
        for &x in self.features.data() {
            h.update(x.to_le_bytes());
        }
        match &self.labels {
            Labels::Single(l) => l.iter().for_each(|&c| h.update((c as u64).to_le_bytes())),
            Labels::Multi(t) => t.data().iter().for_each(|x| h.update(x.to_le_bytes())),
        }
        for m in &self.masks {
            h.update(m.iter().map(|&b| b as u8).collect::<Vec<_>>());
        }
        hex::encode(h.finalize())
    }
}

/// Seeded shuffle of the labeled nodes followed by contiguous assignment to
/// train, validation and test.
pub fn make_splits(graph: Graph, fractions: [f64; 3], seed: u64) -> Result<Graph, GraphError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(GraphError::Fractions { fractions });
    }
    let mut nodes: Vec<usize> = (0..graph.num_nodes).filter(|&v| graph.labeled[v]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nodes.shuffle(&mut rng);
    let n = nodes.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut masks = [
        vec![false; graph.num_nodes],
        vec![false; graph.num_nodes],
        vec![false; graph.num_nodes],
    ];
    for (i, &v) in nodes.iter().enumerate() {
        let split = if i < n_train {
            0
        } else if i < n_train + n_val {
            1
        } else {
            2
        };
        masks[split][v] = true;
    }
    graph.with_masks(masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph(n: usize) -> Graph {
        let edges: Vec<_> = (1..n).map(|v| (v - 1, v)).collect();
        Graph::from_edges(
            n,
            &edges,
            Tensor::zeros(&[n, 2]),
            Labels::Single(Arc::new(vec![0; n])),
            vec![true; n],
            2,
        )
        .unwrap()
    }

    #[test]
    fn two_node_edge_is_symmetrized_with_self_loops() {
        let g = path_graph(2);
        assert_eq!(g.neighbors(0), &[0, 1]);
        assert_eq!(g.neighbors(1), &[0, 1]);
        assert_eq!(g.degrees(), vec![2, 2]);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn duplicates_and_self_loops_in_input_are_dropped() {
        let g = Graph::from_edges(
            3,
            &[(0, 1), (1, 0), (0, 1), (2, 2)],
            Tensor::zeros(&[3, 1]),
            Labels::Single(Arc::new(vec![0; 3])),
            vec![true; 3],
            1,
        )
        .unwrap();
        assert_eq!(g.raw_edge_count(), 4);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.neighbors(2), &[2]);
    }

    #[test]
    fn splits_have_expected_counts_and_are_deterministic() {
        let g = make_splits(path_graph(10), [0.6, 0.2, 0.2], 0).unwrap();
        assert_eq!(g.split_size(Split::Train), 6);
        assert_eq!(g.split_size(Split::Val), 2);
        assert_eq!(g.split_size(Split::Test), 2);
        let again = make_splits(path_graph(10), [0.6, 0.2, 0.2], 0).unwrap();
        assert_eq!(g.masks, again.masks);
        let other = make_splits(path_graph(10), [0.6, 0.2, 0.2], 1).unwrap();
        assert_ne!(g.masks, other.masks);
    }

    #[test]
    fn split_fractions_must_sum_to_one() {
        assert!(matches!(
            make_splits(path_graph(10), [0.5, 0.5, 0.5], 0),
            Err(GraphError::Fractions { .. })
        ));
    }

    #[test]
    fn gcn_coefficients() {
        let lonely = Graph::from_edges(
            1,
            &[],
            Tensor::zeros(&[1, 1]),
            Labels::Single(Arc::new(vec![0])),
            vec![true],
            1,
        )
        .unwrap();
        assert_eq!(lonely.degree_invsqrt_pairs().data(), &[1.0]);
        // K4: degree 4 everywhere once self-loops are counted.
        let k4 = Graph::from_edges(
            4,
            &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
            Tensor::zeros(&[4, 1]),
            Labels::Single(Arc::new(vec![0; 4])),
            vec![true; 4],
            1,
        )
        .unwrap();
        assert!(k4
            .degree_invsqrt_pairs()
            .data()
            .iter()
            .all(|&c| (c - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gcn_coefficients_match_dense_normalized_adjacency() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20;
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random::<f64>() < 0.2 {
                    edges.push((u, v));
                }
            }
        }
        let g = Graph::from_edges(
            n,
            &edges,
            Tensor::zeros(&[n, 1]),
            Labels::Single(Arc::new(vec![0; n])),
            vec![true; n],
            1,
        )
        .unwrap();
        let mut a = vec![vec![0.0; n]; n];
        for &(u, v) in &edges {
            a[u][v] = 1.0;
            a[v][u] = 1.0;
        }
        for (v, row) in a.iter_mut().enumerate() {
            row[v] = 1.0;
        }
        let d: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let coef = g.degree_invsqrt_pairs();
        let mut e = 0;
        for v in 0..n {
            for u in 0..n {
                let dense = a[v][u] / (d[v] * d[u]).sqrt();
                if a[v][u] != 0.0 {
                    assert!((coef.data()[e] - dense).abs() < 1e-12);
                    e += 1;
                }
            }
        }
        assert_eq!(e, coef.numel());
    }

    #[test]
    fn test_mask_reads_are_audited() {
        let g = path_graph(3);
        let _ = g.mask(Split::Train);
        let _ = g.mask(Split::Val);
        assert_eq!(g.test_mask_reads(), 0);
        let _ = g.mask(Split::Test);
        assert_eq!(g.test_mask_reads(), 1);
    }

    #[test]
    fn overlapping_masks_are_rejected() {
        let mut m = [vec![false; 3], vec![false; 3], vec![false; 3]];
        m[0][1] = true;
        m[2][1] = true;
        assert!(path_graph(3).with_masks(m).is_err());
    }

    #[test]
    fn symmetric_and_degree_sum_invariants() {
        let g = synth_planted(&PlantedConfig::default()).unwrap();
        let total: usize = g.degrees().iter().sum();
        assert_eq!(total, g.num_csr_edges());
        for v in 0..g.num_nodes() {
            assert!(g.degree(v) >= 1);
            assert!(g.neighbors(v).contains(&v));
            assert!(g.neighbors(v).windows(2).all(|w| w[0] < w[1]));
            for &u in g.neighbors(v) {
                assert!(g.neighbors(u).contains(&v));
            }
        }
    }
}
