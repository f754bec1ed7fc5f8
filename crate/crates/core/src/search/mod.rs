//! Alternating first-order optimization of architecture vectors and
//! supernet weights, random exploration, and discretization.

mod genotype;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregators::{LayerAggKind, NodeAggKind, SkipKind};
use crate::autodiff::{Optimizer, OptimizerKind, Tape, TensorError};
use crate::graph::{Graph, Split};
use crate::metrics;
use crate::supernet::{ArchParams, EdgeMasks, Mode, SuperNet, SuperNetConfig, SuperNetError};

pub use genotype::{Genotype, Provenance};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    SuperNet(#[from] SuperNetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error("the graph has no {0} nodes")]
    MissingMask(&'static str),
    #[error("non-finite {what} at epoch {epoch}")]
    Diverged { what: &'static str, epoch: usize },
    #[error("genotype: {0}")]
    Genotype(String),
    #[error("only top-1 derivation is supported, got k = {0}")]
    TopK(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub lr_w: f64,
    pub weight_decay_w: f64,
    pub lr_alpha: f64,
    pub weight_decay_alpha: f64,
    pub epsilon: f64,
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub leaky_on_cos_linear: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let net = SuperNetConfig::default();
        Self {
            epochs: 200,
            lr_w: 0.005,
            weight_decay_w: 2e-4,
            lr_alpha: 3e-4,
            weight_decay_alpha: 1e-3,
            epsilon: 0.0,
            seed: 0,
            k: net.k,
            hidden_dim: net.hidden,
            heads: net.heads,
            dropout: net.dropout,
            leaky_on_cos_linear: net.leaky_on_cos_linear,
        }
    }
}

impl SearchConfig {
    pub fn supernet(&self) -> SuperNetConfig {
        SuperNetConfig {
            k: self.k,
            hidden: self.hidden_dim,
            heads: self.heads,
            dropout: self.dropout,
            leaky_on_cos_linear: self.leaky_on_cos_linear,
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.epochs == 0 {
            return Err(SearchError::Config("epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(SearchError::Config(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        for (name, v) in [
            ("lr_w", self.lr_w),
            ("lr_alpha", self.lr_alpha),
            ("weight_decay_w", self.weight_decay_w),
            ("weight_decay_alpha", self.weight_decay_alpha),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SearchError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        self.supernet().validate()?;
        Ok(())
    }
}

/// One row of the search history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_acc\n");
    for r in history {
        writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_acc).expect("string write");
    }
    s
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub supernet: SuperNet,
    pub arch: ArchParams,
    pub history: Vec<EpochRecord>,
    pub genotype: Genotype,
    /// Evaluation-mode validation metric of the final supernet.
    pub final_val_metric: f64,
    pub alpha_steps: usize,
    pub weight_steps: usize,
}

/// Draws per-edge masks: each edge independently, with probability
/// `epsilon`, runs one uniformly chosen operation instead of the mixture.
pub fn epsilon_explore_step(k: usize, epsilon: f64, rng: &mut impl Rng) -> EdgeMasks {
    let mut pick = |n: usize| {
        // ε = 0 must not consume randomness so that it reduces to plain search
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            Some(rng.random_range(0..n))
        } else {
            None
        }
    };
    EdgeMasks {
        node: (0..k).map(|_| pick(NodeAggKind::ALL.len())).collect(),
        skip: (0..k).map(|_| pick(SkipKind::ALL.len())).collect(),
        layer: pick(LayerAggKind::ALL.len()),
    }
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-edge argmax over the architecture vectors, ties to the lowest index.
pub fn derive(arch: &ArchParams, k: usize) -> Result<Genotype, SearchError> {
    if k != 1 {
        return Err(SearchError::TopK(k));
    }
    let layers = arch.k();
    Genotype::new(
        (0..layers)
            .map(|l| NodeAggKind::ALL[argmax_first(arch.node(l).data())])
            .collect(),
        (0..layers)
            .map(|l| SkipKind::ALL[argmax_first(arch.skip(l).data())])
            .collect(),
        LayerAggKind::ALL[argmax_first(arch.layer().data())],
    )
}

/// `11^K · 2^K · 3`; errors for K = 0 or when the count overflows.
pub fn enumerate_space_size(k: usize) -> Result<u128, SearchError> {
    if k == 0 {
        return Err(SearchError::Config("K must be at least 1".into()));
    }
    let per_layer = (NodeAggKind::ALL.len() * SkipKind::ALL.len()) as u128;
    let exp = u32::try_from(k).map_err(|_| SearchError::Config(format!("K = {k} is too large")))?;
    per_layer
        .checked_pow(exp)
        .and_then(|x| x.checked_mul(LayerAggKind::ALL.len() as u128))
        .ok_or_else(|| SearchError::Config(format!("space size for K = {k} overflows")))
}

fn optimizer(lr: f64, wd: f64) -> Result<Option<Optimizer>, SearchError> {
    // a zero learning rate freezes the parameters
    if lr == 0.0 {
        Ok(None)
    } else {
        Ok(Some(Optimizer::new(OptimizerKind::Adam, lr, wd)?))
    }
}

/// Mutable state of one search run, advanced one step at a time.
pub struct SearchState<'g> {
    graph: &'g Graph,
    cfg: SearchConfig,
    supernet: SuperNet,
    arch: ArchParams,
    opt_w: Option<Optimizer>,
    opt_a: Option<Optimizer>,
    rng: ChaCha8Rng,
    train_mask: Vec<bool>,
    val_mask: Vec<bool>,
    alpha_steps: usize,
    weight_steps: usize,
}

impl<'g> SearchState<'g> {
    pub fn new(graph: &'g Graph, cfg: &SearchConfig) -> Result<Self, SearchError> {
        cfg.validate()?;
        let train_mask = graph.mask(Split::Train).to_vec();
        let val_mask = graph.mask(Split::Val).to_vec();
        if !train_mask.iter().any(|&m| m) {
            return Err(SearchError::MissingMask("training"));
        }
        if !val_mask.iter().any(|&m| m) {
            return Err(SearchError::MissingMask("validation"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let supernet = SuperNet::new(&cfg.supernet(), graph.feat_dim(), graph.num_classes(), &mut rng)?;
        let arch = ArchParams::new(cfg.k, &mut rng);
        Ok(Self {
            graph,
            cfg: cfg.clone(),
            supernet,
            arch,
            opt_w: optimizer(cfg.lr_w, cfg.weight_decay_w)?,
            opt_a: optimizer(cfg.lr_alpha, cfg.weight_decay_alpha)?,
            rng,
            train_mask,
            val_mask,
            alpha_steps: 0,
            weight_steps: 0,
        })
    }

    pub fn supernet(&self) -> &SuperNet {
        &self.supernet
    }

    pub fn arch(&self) -> &ArchParams {
        &self.arch
    }

    pub fn steps(&self) -> (usize, usize) {
        (self.alpha_steps, self.weight_steps)
    }

    /// Edge masks for the next epoch, `None` when every edge is mixed.
    pub fn draw_masks(&mut self) -> Option<EdgeMasks> {
        let masks = epsilon_explore_step(self.cfg.k, self.cfg.epsilon, &mut self.rng);
        (!masks.is_full()).then_some(masks)
    }

    /// Validation loss with the weights held fixed; updates the architecture
    /// vectors unless their learning rate is zero. Returns the loss and the
    /// validation metric of the same forward pass.
    pub fn alpha_step(&mut self, masks: Option<&EdgeMasks>) -> Result<(f64, f64), SearchError> {
        let tape = Tape::new();
        let w = self.supernet.params().bind(&tape, false);
        let a = self.arch.bind(&tape, self.opt_a.is_some());
        let mode = Mode::train(self.rng.random());
        let logits = self.supernet.forward(&w, &a, self.graph, mode, masks)?;
        let loss = metrics::loss(logits, self.graph, &self.val_mask)?;
        let acc = metrics::metric(&logits.value(), self.graph.labels(), &self.val_mask)?;
        if let Some(opt) = self.opt_a.as_mut() {
            let grads = tape.backward(loss)?;
            opt.step(self.arch.params_mut().values_mut(), &a.collect_grads(&grads))?;
            self.alpha_steps += 1;
        }
        Ok((loss.value().data()[0], acc))
    }

    /// Training loss with the architecture held fixed; updates the weights
    /// unless their learning rate is zero.
    pub fn weight_step(&mut self, masks: Option<&EdgeMasks>) -> Result<f64, SearchError> {
        let tape = Tape::new();
        let w = self.supernet.params().bind(&tape, self.opt_w.is_some());
        let a = self.arch.bind(&tape, false);
        let mode = Mode::train(self.rng.random());
        let logits = self.supernet.forward(&w, &a, self.graph, mode, masks)?;
        let loss = metrics::loss(logits, self.graph, &self.train_mask)?;
        if let Some(opt) = self.opt_w.as_mut() {
            let grads = tape.backward(loss)?;
            opt.step(self.supernet.params_mut().values_mut(), &w.collect_grads(&grads))?;
            self.weight_steps += 1;
        }
        Ok(loss.value().data()[0])
    }

    /// One epoch: architecture step, then weight step, on shared masks.
    pub fn epoch(&mut self, epoch: usize) -> Result<EpochRecord, SearchError> {
        let masks = self.draw_masks();
        let (val_loss, val_acc) = self.alpha_step(masks.as_ref())?;
        if !val_loss.is_finite() {
            return Err(SearchError::Diverged { what: "validation loss", epoch });
        }
        if !self.arch.all_finite() {
            return Err(SearchError::Diverged { what: "architecture parameters", epoch });
        }
        let train_loss = self.weight_step(masks.as_ref())?;
        if !train_loss.is_finite() || !self.supernet.params().all_finite() {
            return Err(SearchError::Diverged { what: "training loss", epoch });
        }
        log::debug!("search epoch {epoch}: train {train_loss:.4} val {val_loss:.4} acc {val_acc:.4}");
        Ok(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
        })
    }

    pub fn finish(self, history: Vec<EpochRecord>) -> Result<SearchOutcome, SearchError> {
        let logits = self.supernet.predict(&self.arch, self.graph)?;
        let final_val_metric = metrics::metric(&logits, self.graph.labels(), &self.val_mask)?;
        let genotype = derive(&self.arch, 1)?;
        Ok(SearchOutcome {
            supernet: self.supernet,
            arch: self.arch,
            history,
            genotype,
            final_val_metric,
            alpha_steps: self.alpha_steps,
            weight_steps: self.weight_steps,
        })
    }
}

/// Runs the bi-level search. Each epoch first updates the architecture
/// vectors on the validation loss with the weights held fixed, then the
/// weights on the training loss with the architecture held fixed. Both
/// steps use training-mode forwards; the recorded validation accuracy
/// comes from the architecture step.
pub fn search(graph: &Graph, cfg: &SearchConfig) -> Result<SearchOutcome, SearchError> {
    let mut state = SearchState::new(graph, cfg)?;
    let history = (0..cfg.epochs)
        .map(|e| state.epoch(e))
        .collect::<Result<Vec<_>, _>>()?;
    state.finish(history)
}
