use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Graph, GraphError, Labels};
use crate::autodiff::Tensor;

/// Planted-community generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedConfig {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feat_dim: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Standard deviation of the per-feature Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            num_nodes: 300,
            num_classes: 3,
            feat_dim: 16,
            p_in: 0.05,
            p_out: 0.005,
            noise: 0.5,
            seed: 0,
        }
    }
}

/// Round-robin class assignment, edges drawn independently with `p_in`
/// inside a class and `p_out` across classes, features equal to a random
/// unit class mean plus isotropic noise.
pub fn synth_planted(cfg: &PlantedConfig) -> Result<Graph, GraphError> {
    let valid_p = |p: f64| (0.0..=1.0).contains(&p);
    if !(valid_p(cfg.p_in) && valid_p(cfg.p_out) && cfg.p_in > cfg.p_out) {
        return Err(GraphError::Homophily {
            p_in: cfg.p_in,
            p_out: cfg.p_out,
        });
    }
    if cfg.num_nodes == 0 || cfg.num_classes == 0 || cfg.feat_dim == 0 {
        return Err(GraphError::Invalid(
            "planted graph needs at least one node, class and feature".into(),
        ));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(GraphError::Invalid(format!("invalid noise level {}", cfg.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.num_nodes;
    let labels: Vec<usize> = (0..n).map(|v| v % cfg.num_classes).collect();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { cfg.p_in } else { cfg.p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let means: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            let raw: Vec<f64> = (0..cfg.feat_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            raw.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise).expect("finite noise");
    let mut features = Vec::with_capacity(n * cfg.feat_dim);
    for &c in &labels {
        for &m in &means[c] {
            features.push(m + noise.sample(&mut rng));
        }
    }
    Graph::from_edges(
        n,
        &edges,
        Tensor::new(vec![n, cfg.feat_dim], features).expect("feature shape"),
        Labels::Single(Arc::new(labels)),
        vec![true; n],
        cfg.num_classes,
    )
}
