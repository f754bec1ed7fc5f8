use std::sync::Arc;

use rand::Rng;

use crate::aggregators::{AggInput, MlpAggregator};
use crate::autodiff::{Bound, ParamId, ParamSet, Var};
use crate::graph::Graph;
use crate::supernet::{Activation, Mode};
use crate::trainer::{GraphModel, HyperParams, TrainError};

/// K stacked MLP aggregators of one (width, depth) cell between an input
/// encoder and a linear classifier on the last layer's output.
#[derive(Debug, Clone)]
pub struct MlpModel {
    width: usize,
    depth: usize,
    activation: Activation,
    dropout: f64,
    in_dim: usize,
    params: ParamSet,
    enc: (ParamId, ParamId),
    layers: Vec<MlpAggregator>,
    cls: (ParamId, ParamId),
}

impl MlpModel {
    pub fn new(
        k: usize,
        width: usize,
        depth: usize,
        hp: &HyperParams,
        in_dim: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TrainError> {
        hp.validate()?;
        if k == 0 || in_dim == 0 || num_classes == 0 {
            return Err(TrainError::Config(format!(
                "layers {k}, input width {in_dim} and class count {num_classes} must be positive"
            )));
        }
        let h = hp.hidden;
        let mut params = ParamSet::new();
        let enc = (
            params.add_glorot("enc.w", in_dim, h, rng),
            params.add_zeros("enc.b", &[h]),
        );
        let layers = (0..k)
            .map(|l| MlpAggregator::new(width, depth, h, h, &mut params, &format!("layer{l}"), rng))
            .collect::<Result<_, _>>()?;
        let cls = (
            params.add_glorot("cls.w", h, num_classes, rng),
            params.add_zeros("cls.b", &[num_classes]),
        );
        Ok(Self {
            width,
            depth,
            activation: hp.activation,
            dropout: hp.dropout,
            in_dim,
            params,
            enc,
            layers,
            cls,
        })
    }

    pub fn cell(&self) -> (usize, usize) {
        (self.width, self.depth)
    }
}

impl GraphModel for MlpModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward<'t>(&self, w: &Bound<'t>, graph: &Graph, mode: Mode) -> Result<Var<'t>, TrainError> {
        if graph.feat_dim() != self.in_dim {
            return Err(TrainError::Config(format!(
                "graph features have width {}, model expects {}",
                graph.feat_dim(),
                self.in_dim
            )));
        }
        let tape = w.get(self.enc.0).tape();
        let x = tape.leaf_shared(Arc::clone(graph.features()), false);
        let x = mode.dropout(x, self.dropout, 0)?;
        let mut h = x.matmul(w.get(self.enc.0))?.add(w.get(self.enc.1))?;
        for (l, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(w, &AggInput::new(h), graph)?;
            h = mode.dropout(self.activation.apply(out), self.dropout, 1 + l as u64)?;
        }
        Ok(h.matmul(w.get(self.cls.0))?.add(w.get(self.cls.1))?)
    }
}
