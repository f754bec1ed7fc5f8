use std::sync::Arc;

use rand::{Rng, SeedableRng};

use super::{GraphModel, HyperParams, TrainError};
use crate::aggregators::{
    skip_apply, AggInput, AggOptions, LayerAggregator, NodeAggregator, SkipKind,
};
use crate::autodiff::{Bound, ParamId, ParamSet, Tape, Tensor, Var};
use crate::graph::Graph;
use crate::search::Genotype;
use crate::supernet::{Activation, Mode, SuperNet};

#[derive(Debug, Clone)]
struct Layer {
    agg: NodeAggregator,
    w: ParamId,
    b: ParamId,
}

/// A discrete GNN: one node aggregator per layer, fixed skips, one layer
/// aggregator and a linear classifier.
///
/// Layers with a ZERO skip are left out of the layer aggregator's input. If
/// every skip is ZERO, the last layer's output is used alone. Models taken
/// from a supernet instead feed literal zeros for ZERO skips, as the skip
/// operation does inside the mixture, so that their forward pass matches.
#[derive(Debug, Clone)]
pub struct Model {
    genotype: Genotype,
    hidden: usize,
    activation: Activation,
    dropout: f64,
    opts: AggOptions,
    in_dim: usize,
    num_classes: usize,
    params: ParamSet,
    enc_w: ParamId,
    enc_b: ParamId,
    layers: Vec<Layer>,
    layer_agg: LayerAggregator,
    /// Layers feeding the layer aggregator.
    active: Vec<bool>,
    zero_fill: bool,
    cls_w: ParamId,
    cls_b: ParamId,
}

impl Model {
    pub fn new(
        genotype: &Genotype,
        hp: &HyperParams,
        in_dim: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TrainError> {
        Self::build(genotype, hp, in_dim, num_classes, false, rng)
    }

    fn build(
        genotype: &Genotype,
        hp: &HyperParams,
        in_dim: usize,
        num_classes: usize,
        zero_fill: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, TrainError> {
        genotype.validate()?;
        hp.validate()?;
        if in_dim == 0 || num_classes == 0 {
            return Err(TrainError::Config(format!(
                "input width {in_dim} and class count {num_classes} must be positive"
            )));
        }
        let k = genotype.k();
        let active: Vec<bool> = if zero_fill {
            vec![true; k]
        } else if genotype.connected_layers() == 0 {
            log::warn!(
                "genotype {} disconnects every layer; using the last layer's output alone",
                genotype.short()
            );
            (0..k).map(|l| l + 1 == k).collect()
        } else {
            genotype.skip_ops.iter().map(|&s| s == SkipKind::Identity).collect()
        };
        let h = hp.hidden;
        let mut params = ParamSet::new();
        let enc_w = params.add_glorot("enc.w", in_dim, h, rng);
        let enc_b = params.add_zeros("enc.b", &[h]);
        let mut layers = Vec::with_capacity(genotype.k());
        for (l, &kind) in genotype.node_ops.iter().enumerate() {
            let agg = NodeAggregator::new(kind, h, hp.heads, &mut params, &format!("layer{l}.{kind}"), rng)?;
            let w = params.add_glorot(format!("layer{l}.w"), h, h, rng);
            let b = params.add_zeros(format!("layer{l}.b"), &[h]);
            layers.push(Layer { agg, w, b });
        }
        let kind = genotype.layer_op;
        let layer_agg = LayerAggregator::new(kind, h, &mut params, &format!("jk.{kind}"), rng);
        let width = layer_agg.out_dim(active.iter().filter(|&&a| a).count());
        let cls_w = params.add_glorot("cls.w", width, num_classes, rng);
        let cls_b = params.add_zeros("cls.b", &[num_classes]);
        Ok(Self {
            genotype: genotype.clone(),
            hidden: h,
            activation: hp.activation,
            dropout: hp.dropout,
            opts: AggOptions {
                leaky_on_cos_linear: hp.leaky_on_cos_linear,
                ..AggOptions::default()
            },
            in_dim,
            num_classes,
            params,
            enc_w,
            enc_b,
            layers,
            layer_agg,
            active,
            zero_fill,
            cls_w,
            cls_b,
        })
    }

    /// The discrete model of `genotype` carrying the supernet's weights for
    /// the chosen operations. The supernet's layer-aggregator projection is
    /// folded into the classifier. Forward passes agree with the supernet
    /// under saturated architecture vectors.
    pub fn from_supernet(supernet: &SuperNet, genotype: &Genotype) -> Result<Self, TrainError> {
        let cfg = supernet.config();
        if genotype.k() != cfg.k {
            return Err(TrainError::Config(format!(
                "genotype has {} layers, supernet has {}",
                genotype.k(),
                cfg.k
            )));
        }
        let hp = HyperParams {
            hidden: cfg.hidden,
            heads: cfg.heads,
            dropout: cfg.dropout,
            activation: crate::supernet::SUPERNET_ACTIVATION,
            leaky_on_cos_linear: cfg.leaky_on_cos_linear,
            ..HyperParams::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
        let mut model = Self::build(genotype, &hp, supernet.in_dim(), supernet.num_classes(), true, &mut rng)?;
        let src = supernet.params();
        let fetch = |name: &str| -> Result<&Tensor, TrainError> {
            src.find(name)
                .map(|id| src.get(id))
                .ok_or_else(|| TrainError::Config(format!("supernet has no parameter {name}")))
        };
        let ids: Vec<(ParamId, String)> = model
            .params
            .iter()
            .map(|(id, name, _)| (id, name.to_string()))
            .collect();
        for (id, name) in ids {
            if name == "cls.w" || name == "cls.b" {
                continue;
            }
            *model.params.get_mut(id) = fetch(&name)?.clone();
        }
        let kind = genotype.layer_op;
        let proj_w = fetch(&format!("jk.{kind}.proj.w"))?;
        let proj_b = fetch(&format!("jk.{kind}.proj.b"))?;
        let cls_w = fetch("cls.w")?;
        let cls_b = fetch("cls.b")?;
        let tape = Tape::new();
        let pw = tape.constant(proj_w.clone());
        let cw = tape.constant(cls_w.clone());
        let folded_w = pw.matmul(cw)?.value();
        let pb = tape.constant(proj_b.clone().reshape(vec![1, cfg.hidden])?);
        let folded_b = pb.matmul(cw)?.add(tape.constant(cls_b.clone()))?.value();
        *model.params.get_mut(model.cls_w) = (*folded_w).clone();
        *model.params.get_mut(model.cls_b) = (*folded_b).clone().reshape(vec![supernet.num_classes()])?;
        Ok(model)
    }

    pub fn genotype(&self) -> &Genotype {
        &self.genotype
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Width of the layer aggregator's output, i.e. the classifier input.
    pub fn readout_width(&self) -> usize {
        self.layer_agg.out_dim(self.active.iter().filter(|&&a| a).count())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Whether layer `l` feeds the layer aggregator.
    pub fn is_connected(&self, l: usize) -> bool {
        self.active[l]
    }
}

impl GraphModel for Model {
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
        let tape = w.get(self.enc_w).tape();
        let x = tape.leaf_shared(Arc::clone(graph.features()), false);
        let x = mode.dropout(x, self.dropout, 0)?;
        let mut h = x.matmul(w.get(self.enc_w))?.add(w.get(self.enc_b))?;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (l, (layer, &skip)) in self.layers.iter().zip(&self.genotype.skip_ops).enumerate() {
            let agg = layer.agg.forward(w, &AggInput::new(h), graph, &self.opts)?;
            let out = agg.matmul(w.get(layer.w))?.add(w.get(layer.b))?;
            h = mode.dropout(self.activation.apply(out), self.dropout, 1 + l as u64)?;
            outputs.push(if self.zero_fill { skip_apply(skip, h) } else { h });
        }
        let z = self.layer_agg.forward(w, &outputs, &self.active)?;
        Ok(z.matmul(w.get(self.cls_w))?.add(w.get(self.cls_b))?)
    }
}
