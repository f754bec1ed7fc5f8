use rand::Rng;

use super::{AggError, AggInput};
use crate::autodiff::{Bound, ParamId, ParamSet, SegmentKind, Var};
use crate::graph::Graph;

pub const MLP_WIDTHS: [usize; 4] = [8, 16, 32, 64];
pub const MLP_DEPTHS: [usize; 3] = [1, 2, 3];

/// Node aggregator that applies an MLP to the summed neighborhood. Hidden
/// layers have `width` units with relu in between; the last layer maps to
/// `out_dim` without activation.
#[derive(Debug, Clone)]
pub struct MlpAggregator {
    width: usize,
    depth: usize,
    layers: Vec<(ParamId, ParamId)>,
}

impl MlpAggregator {
    pub fn new(
        width: usize,
        depth: usize,
        in_dim: usize,
        out_dim: usize,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self, AggError> {
        if !MLP_WIDTHS.contains(&width) || !MLP_DEPTHS.contains(&depth) {
            return Err(AggError::OutOfGrid { width, depth });
        }
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat_n(width, depth - 1));
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    params.add_glorot(format!("{prefix}.mlp{i}.w"), w[0], w[1], rng),
                    params.add_zeros(format!("{prefix}.mlp{i}.b"), &[w[1]]),
                )
            })
            .collect();
        Ok(Self {
            width,
            depth,
            layers,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        input: &AggInput<'t>,
        graph: &Graph,
    ) -> Result<Var<'t>, AggError> {
        let mut x = input
            .h
            .gather_rows(graph.edge_sources())?
            .segment_reduce(SegmentKind::Sum, graph.edge_targets(), graph.num_nodes())?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                x = x.relu();
            }
            x = x.matmul(bound.get(w))?.add(bound.get(b))?;
        }
        Ok(x)
    }
}
