use serde::{Deserialize, Serialize};

use super::SearchError;
use crate::aggregators::{LayerAggKind, NodeAggKind, SkipKind};

/// A fully discrete architecture.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genotype {
    pub node_ops: Vec<NodeAggKind>,
    pub skip_ops: Vec<SkipKind>,
    pub layer_op: LayerAggKind,
}

/// Where a genotype came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub epochs: usize,
    pub dataset_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeFile {
    node_ops: Vec<NodeAggKind>,
    skip_ops: Vec<SkipKind>,
    layer_op: LayerAggKind,
    #[serde(rename = "K")]
    k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl Genotype {
    pub fn new(
        node_ops: Vec<NodeAggKind>,
        skip_ops: Vec<SkipKind>,
        layer_op: LayerAggKind,
    ) -> Result<Self, SearchError> {
        let g = Self {
            node_ops,
            skip_ops,
            layer_op,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn k(&self) -> usize {
        self.node_ops.len()
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.node_ops.is_empty() || self.node_ops.len() != self.skip_ops.len() {
            return Err(SearchError::Genotype(format!(
                "{} node operations and {} skip operations; both must equal K >= 1",
                self.node_ops.len(),
                self.skip_ops.len()
            )));
        }
        Ok(())
    }

    /// Number of layers whose output reaches the layer aggregator.
    pub fn connected_layers(&self) -> usize {
        self.skip_ops.iter().filter(|&&s| s == SkipKind::Identity).count()
    }

    /// Compact one-line form, e.g. `GCN/IDENTITY,GAT/ZERO|CONCAT`.
    pub fn short(&self) -> String {
        let layers: Vec<String> = self
            .node_ops
            .iter()
            .zip(&self.skip_ops)
            .map(|(n, s)| format!("{n}/{s}"))
            .collect();
        format!("{}|{}", layers.join(","), self.layer_op)
    }

    pub fn to_json(&self, provenance: Option<&Provenance>) -> String {
        let file = GenotypeFile {
            node_ops: self.node_ops.clone(),
            skip_ops: self.skip_ops.clone(),
            layer_op: self.layer_op,
            k: self.k(),
            provenance: provenance.cloned(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("genotype serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<(Self, Option<Provenance>), SearchError> {
        let file: GenotypeFile =
            serde_json::from_str(text).map_err(|e| SearchError::Genotype(e.to_string()))?;
        let g = Self::new(file.node_ops, file.skip_ops, file.layer_op)?;
        if file.k != g.k() {
            return Err(SearchError::Genotype(format!(
                "K = {} but {} layers are listed",
                file.k,
                g.k()
            )));
        }
        Ok((g, file.provenance))
    }
}
