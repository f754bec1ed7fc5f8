//! The relaxed search space. Every edge of the layer DAG carries all
//! candidate operations mixed by the softmax of its architecture vector.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregators::{
    skip_apply, AggError, AggInput, AggOptions, LayerAggKind, LayerAggregator, NodeAggKind,
    NodeAggregator, SkipKind,
};
use crate::autodiff::{Bound, Gradients, ParamId, ParamSet, Tape, Tensor, TensorError, Var};
use crate::checkpoint::Checkpoint;
use crate::graph::Graph;

#[derive(Debug, Error)]
pub enum SuperNetError {
    #[error(transparent)]
    Agg(#[from] AggError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Dimension(String),
}

impl From<SuperNetError> for TensorError {
    fn from(e: SuperNetError) -> Self {
        match e {
            SuperNetError::Tensor(t) | SuperNetError::Agg(AggError::Tensor(t)) => t,
            other => TensorError::Invalid(other.to_string()),
        }
    }
}

/// Numerically stable softmax of a plain vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Architecture vectors: one node-aggregator and one skip vector per
/// layer, one layer-aggregator vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    params: ParamSet,
    node: Vec<ParamId>,
    skip: Vec<ParamId>,
    layer: ParamId,
}

/// Softmax views of every architecture vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MixWeights {
    pub node: Vec<Vec<f64>>,
    pub skip: Vec<Vec<f64>>,
    pub layer: Vec<f64>,
}

/// Handles for architecture vectors recorded on a tape.
pub struct ArchVars<'t> {
    pub node: Vec<Var<'t>>,
    pub skip: Vec<Var<'t>>,
    pub layer: Var<'t>,
}

impl ArchParams {
    pub const INIT_STD: f64 = 1e-3;

    /// Gaussian initialization with standard deviation [`Self::INIT_STD`].
    pub fn new(k: usize, rng: &mut impl Rng) -> Self {
        Self::build(k, |params, name, len| {
            params.add_normal(name, &[len], Self::INIT_STD, rng)
        })
    }

    pub fn zeros(k: usize) -> Self {
        Self::build(k, |params, name, len| params.add_zeros(name, &[len]))
    }

    fn build(k: usize, mut add: impl FnMut(&mut ParamSet, String, usize) -> ParamId) -> Self {
        let mut params = ParamSet::new();
        let node = (0..k)
            .map(|l| add(&mut params, format!("node{l}"), NodeAggKind::ALL.len()))
            .collect();
        let skip = (0..k)
            .map(|l| add(&mut params, format!("skip{l}"), SkipKind::ALL.len()))
            .collect();
        let layer = add(&mut params, "layer".into(), LayerAggKind::ALL.len());
        Self {
            params,
            node,
            skip,
            layer,
        }
    }

    /// Vectors with `magnitude` on the chosen coordinates and 0 elsewhere.
    pub fn one_hot(
        node: &[NodeAggKind],
        skip: &[SkipKind],
        layer: LayerAggKind,
        magnitude: f64,
    ) -> Result<Self, SuperNetError> {
        if node.len() != skip.len() || node.is_empty() {
            return Err(SuperNetError::Dimension(format!(
                "{} node choices and {} skip choices",
                node.len(),
                skip.len()
            )));
        }
        let mut arch = Self::zeros(node.len());
        for l in 0..node.len() {
            arch.node_mut(l).data_mut()[node[l].index()] = magnitude;
            arch.skip_mut(l).data_mut()[skip[l].index()] = magnitude;
        }
        arch.layer_mut().data_mut()[layer.index()] = magnitude;
        Ok(arch)
    }

    pub fn k(&self) -> usize {
        self.node.len()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn node(&self, l: usize) -> &Tensor {
        self.params.get(self.node[l])
    }

    pub fn skip(&self, l: usize) -> &Tensor {
        self.params.get(self.skip[l])
    }

    pub fn layer(&self) -> &Tensor {
        self.params.get(self.layer)
    }

    pub fn node_mut(&mut self, l: usize) -> &mut Tensor {
        self.params.get_mut(self.node[l])
    }

    pub fn skip_mut(&mut self, l: usize) -> &mut Tensor {
        self.params.get_mut(self.skip[l])
    }

    pub fn layer_mut(&mut self) -> &mut Tensor {
        self.params.get_mut(self.layer)
    }

    pub fn all_finite(&self) -> bool {
        self.params.all_finite()
    }

    pub fn softmax_weights(&self) -> MixWeights {
        MixWeights {
            node: (0..self.k()).map(|l| softmax(self.node(l).data())).collect(),
            skip: (0..self.k()).map(|l| softmax(self.skip(l).data())).collect(),
            layer: softmax(self.layer().data()),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> ArchVars<'t> {
        let b = self.params.bind(tape, requires_grad);
        ArchVars {
            node: self.node.iter().map(|&id| b.get(id)).collect(),
            skip: self.skip.iter().map(|&id| b.get(id)).collect(),
            layer: b.get(self.layer),
        }
    }
}

impl ArchVars<'_> {
    /// Gradients in [`ArchParams`] parameter order.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.node
            .iter()
            .chain(&self.skip)
            .chain(std::iter::once(&self.layer))
            .map(|v| grads.get(*v).cloned())
            .collect()
    }
}

/// Per-edge override of the mixture: `Some(i)` runs only operation `i` with
/// weight 1, `None` keeps the full softmax mixture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMasks {
    pub node: Vec<Option<usize>>,
    pub skip: Vec<Option<usize>>,
    pub layer: Option<usize>,
}

impl EdgeMasks {
    pub fn full(k: usize) -> Self {
        Self {
            node: vec![None; k],
            skip: vec![None; k],
            layer: None,
        }
    }

    pub fn is_full(&self) -> bool {
        self.node.iter().chain(&self.skip).all(Option::is_none) && self.layer.is_none()
    }
}

/// `Σ_o softmax(alpha)_o · output_o`.
pub fn mixed_op<'t>(alpha: Var<'t>, outputs: &[Var<'t>]) -> Result<Var<'t>, SuperNetError> {
    if alpha.value().numel() != outputs.len() || outputs.is_empty() {
        return Err(SuperNetError::Dimension(format!(
            "mixture over {} outputs with {} weights",
            outputs.len(),
            alpha.value().numel()
        )));
    }
    let shape = outputs[0].shape();
    if let Some(bad) = outputs.iter().find(|o| o.shape() != shape) {
        return Err(SuperNetError::Dimension(format!(
            "mixture outputs disagree in shape: {shape:?} vs {:?}",
            bad.shape()
        )));
    }
    let weights = alpha.reshape(&[outputs.len()])?.softmax(0)?;
    let mut acc: Option<Var<'t>> = None;
    for (i, &out) in outputs.iter().enumerate() {
        let term = out.mul(weights.select(i)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    Ok(acc.expect("non-empty mixture"))
}

/// Activation applied after each layer's shared transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Relu, Activation::Elu, Activation::Tanh];

    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Elu => x.elu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Forward-pass mode. Dropout only applies when `training` is set; its
/// masks are derived from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub training: bool,
    pub seed: u64,
}

impl Mode {
    pub const EVAL: Mode = Mode {
        training: false,
        seed: 0,
    };

    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            seed,
        }
    }

    /// Seed for the dropout site `site`, decorrelated from neighbouring sites.
    pub fn site_seed(self, site: u64) -> u64 {
        let mut z = self.seed ^ site.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z ^ (z >> 31)
    }

    pub fn dropout<'t>(self, x: Var<'t>, p: f64, site: u64) -> Result<Var<'t>, TensorError> {
        if self.training && p > 0.0 {
            x.dropout(p, self.site_seed(site))
        } else {
            Ok(x)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperNetConfig {
    pub k: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub leaky_on_cos_linear: bool,
}

impl Default for SuperNetConfig {
    fn default() -> Self {
        Self {
            k: 3,
            hidden: 32,
            heads: 2,
            dropout: 0.6,
            leaky_on_cos_linear: true,
        }
    }
}

impl SuperNetConfig {
    pub fn validate(&self) -> Result<(), SuperNetError> {
        if self.k == 0 {
            return Err(SuperNetError::Dimension("K must be at least 1".into()));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(SuperNetError::Dimension(format!(
                "hidden width {} must be a positive multiple of the head count {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SuperNetError::Dimension(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn agg_options(&self) -> AggOptions {
        AggOptions {
            leaky_on_cos_linear: self.leaky_on_cos_linear,
            ..AggOptions::default()
        }
    }
}

#[derive(Debug, Clone)]
struct MixedLayer {
    aggs: Vec<NodeAggregator>,
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct LayerBranch {
    agg: LayerAggregator,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// Network weights of the relaxed search space.
#[derive(Debug, Clone)]
pub struct SuperNet {
    cfg: SuperNetConfig,
    in_dim: usize,
    num_classes: usize,
    params: ParamSet,
    enc_w: ParamId,
    enc_b: ParamId,
    layers: Vec<MixedLayer>,
    branches: Vec<LayerBranch>,
    cls_w: ParamId,
    cls_b: ParamId,
}

/// Activation used inside the supernet.
pub const SUPERNET_ACTIVATION: Activation = Activation::Elu;

impl SuperNet {
    pub fn new(
        cfg: &SuperNetConfig,
        in_dim: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, SuperNetError> {
        cfg.validate()?;
        if in_dim == 0 || num_classes == 0 {
            return Err(SuperNetError::Dimension(format!(
                "input width {in_dim} and class count {num_classes} must be positive"
            )));
        }
        let h = cfg.hidden;
        let mut params = ParamSet::new();
        let enc_w = params.add_glorot("enc.w", in_dim, h, rng);
        let enc_b = params.add_zeros("enc.b", &[h]);
        let mut layers = Vec::with_capacity(cfg.k);
        for l in 0..cfg.k {
            let aggs = NodeAggKind::ALL
                .iter()
                .map(|&kind| {
                    NodeAggregator::new(kind, h, cfg.heads, &mut params, &format!("layer{l}.{kind}"), rng)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let w = params.add_glorot(format!("layer{l}.w"), h, h, rng);
            let b = params.add_zeros(format!("layer{l}.b"), &[h]);
            layers.push(MixedLayer { aggs, w, b });
        }
        let branches = LayerAggKind::ALL
            .iter()
            .map(|&kind| {
                let agg = LayerAggregator::new(kind, h, &mut params, &format!("jk.{kind}"), rng);
                let width = agg.out_dim(cfg.k);
                LayerBranch {
                    agg,
                    proj_w: params.add_glorot(format!("jk.{kind}.proj.w"), width, h, rng),
                    proj_b: params.add_zeros(format!("jk.{kind}.proj.b"), &[h]),
                }
            })
            .collect();
        let cls_w = params.add_glorot("cls.w", h, num_classes, rng);
        let cls_b = params.add_zeros("cls.b", &[num_classes]);
        Ok(Self {
            cfg: cfg.clone(),
            in_dim,
            num_classes,
            params,
            enc_w,
            enc_b,
            layers,
            branches,
            cls_w,
            cls_b,
        })
    }

    pub fn config(&self) -> &SuperNetConfig {
        &self.cfg
    }

    pub fn k(&self) -> usize {
        self.cfg.k
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Logits `[N×C]`. `masks` replaces chosen mixtures by single operations.
    pub fn forward<'t>(
        &self,
        w: &Bound<'t>,
        arch: &ArchVars<'t>,
        graph: &Graph,
        mode: Mode,
        masks: Option<&EdgeMasks>,
    ) -> Result<Var<'t>, SuperNetError> {
        let k = self.cfg.k;
        if arch.node.len() != k || arch.skip.len() != k {
            return Err(SuperNetError::Dimension(format!(
                "architecture has {} layers, supernet has {k}",
                arch.node.len()
            )));
        }
        if graph.feat_dim() != self.in_dim {
            return Err(SuperNetError::Dimension(format!(
                "graph features have width {}, supernet expects {}",
                graph.feat_dim(),
                self.in_dim
            )));
        }
        let full = EdgeMasks::full(k);
        let masks = masks.unwrap_or(&full);
        let tape = arch.layer.tape();
        let opts = self.cfg.agg_options();
        let p = self.cfg.dropout;

        let x = tape.leaf_shared(std::sync::Arc::clone(graph.features()), false);
        let x = mode.dropout(x, p, 0)?;
        let mut h = x.matmul(w.get(self.enc_w))?.add(w.get(self.enc_b))?;
        let mut skipped = Vec::with_capacity(k);
        for (l, layer) in self.layers.iter().enumerate() {
            let input = AggInput::new(h);
            let mixed = match masks.node[l] {
                Some(i) => layer.aggs[i].forward(w, &input, graph, &opts)?,
                None => {
                    let outs = layer
                        .aggs
                        .iter()
                        .map(|a| a.forward(w, &input, graph, &opts))
                        .collect::<Result<Vec<_>, _>>()?;
                    mixed_op(arch.node[l], &outs)?
                }
            };
            let out = mixed.matmul(w.get(layer.w))?.add(w.get(layer.b))?;
            h = mode.dropout(SUPERNET_ACTIVATION.apply(out), p, 1 + l as u64)?;
            skipped.push(match masks.skip[l] {
                Some(i) => skip_apply(SkipKind::ALL[i], h),
                None => {
                    let outs: Vec<_> = SkipKind::ALL.iter().map(|&s| skip_apply(s, h)).collect();
                    mixed_op(arch.skip[l], &outs)?
                }
            });
        }
        let active = vec![true; k];
        let branch = |b: &LayerBranch| -> Result<Var<'t>, SuperNetError> {
            let z = b.agg.forward(w, &skipped, &active)?;
            Ok(z.matmul(w.get(b.proj_w))?.add(w.get(b.proj_b))?)
        };
        let z = match masks.layer {
            Some(i) => branch(&self.branches[i])?,
            None => {
                let outs = self.branches.iter().map(branch).collect::<Result<Vec<_>, _>>()?;
                mixed_op(arch.layer, &outs)?
            }
        };
        Ok(z.matmul(w.get(self.cls_w))?.add(w.get(self.cls_b))?)
    }

    /// Evaluation-mode logits as a plain tensor.
    pub fn predict(&self, arch: &ArchParams, graph: &Graph) -> Result<Tensor, SuperNetError> {
        let tape = Tape::new();
        let w = self.params.bind(&tape, false);
        let a = arch.bind(&tape, false);
        let logits = self.forward(&w, &a, graph, Mode::EVAL, None)?;
        Ok((*logits.value()).clone())
    }

    /// Weights under `w/`, architecture vectors under `alpha/`.
    pub fn checkpoint(&self, arch: &ArchParams) -> Checkpoint {
        Checkpoint::new()
            .with_params("w", &self.params)
            .with_params("alpha", arch.params())
    }
}

#[cfg(test)]
mod tests;
