//! Training a discrete architecture from scratch, hyperparameter tuning on
//! the validation split, and final test reporting.

mod model;
mod tune;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregators::AggError;
use crate::autodiff::{Bound, Optimizer, OptimizerKind, ParamSet, Tape, Tensor, TensorError, Var};
use crate::graph::{Graph, Split};
use crate::metrics::{self, MetricKind};
use crate::search::{Genotype, SearchError};
use crate::supernet::{Activation, Mode};

pub use model::Model;
pub use tune::{tune, TuneOutcome, TuneSpace, TuneTrial};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Agg(#[from] AggError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },
    #[error("the graph has no {0} nodes")]
    EmptySplit(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub heads: usize,
    pub hidden: usize,
    pub lr: f64,
    pub l2: f64,
    pub activation: Activation,
    pub dropout: f64,
    /// Upper bound on training epochs.
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub leaky_on_cos_linear: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            heads: 2,
            hidden: 32,
            lr: 0.005,
            l2: 2e-4,
            activation: Activation::Elu,
            dropout: 0.6,
            epochs: 600,
            patience: 30,
            leaky_on_cos_linear: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(TrainError::Config(format!(
                "hidden width {} must be a positive multiple of the head count {}",
                self.hidden, self.heads
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} and L2 {} must be finite and >= 0",
                self.lr, self.l2
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// A trainable node classifier: a parameter set and a forward pass producing
/// one row of logits per node.
pub trait GraphModel: Clone {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn forward<'t>(&self, w: &Bound<'t>, graph: &Graph, mode: Mode) -> Result<Var<'t>, TrainError>;

    /// Evaluation-mode logits.
    fn predict(&self, graph: &Graph) -> Result<Tensor, TrainError> {
        let tape = Tape::new();
        let w = self.params().bind(&tape, false);
        let logits = self.forward(&w, graph, Mode::EVAL)?;
        Ok((*logits.value()).clone())
    }
}

/// Result of one training run; the model holds the best-validation weights.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M = Model> {
    pub model: M,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub steps: usize,
}

fn split_mask(graph: &Graph, split: Split) -> Result<Vec<bool>, TrainError> {
    let mask = graph.mask(split).to_vec();
    if !mask.iter().any(|&m| m) {
        return Err(TrainError::EmptySplit(split.name()));
    }
    Ok(mask)
}

/// Full-batch Adam on the training split with early stopping on the
/// validation metric (ties broken by lower validation loss). Returns the
/// weights of the best validation epoch. A zero learning rate leaves the
/// weights untouched.
pub fn train<M: GraphModel>(
    mut model: M,
    graph: &Graph,
    hp: &HyperParams,
    seed: u64,
) -> Result<TrainOutcome<M>, TrainError> {
    hp.validate()?;
    let train_mask = split_mask(graph, Split::Train)?;
    let val_mask = split_mask(graph, Split::Val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = if hp.lr > 0.0 {
        Some(Optimizer::new(OptimizerKind::Adam, hp.lr, hp.l2)?)
    } else {
        None
    };
    let evaluate_val = |params: &ParamSet, model: &M| -> Result<(f64, f64), TrainError> {
        let tape = Tape::new();
        let w = params.bind(&tape, false);
        let logits = model.forward(&w, graph, Mode::EVAL)?;
        let loss = metrics::loss(logits, graph, &val_mask)?.value().data()[0];
        let metric = metrics::metric(&logits.value(), graph.labels(), &val_mask)?;
        Ok((metric, loss))
    };

    let (mut best_val_metric, mut best_val_loss) = evaluate_val(model.params(), &model)?;
    let mut best_params = model.params().clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut steps = 0;
    for epoch in 1..=hp.epochs {
        let Some(opt) = opt.as_mut() else { break };
        epochs_run = epoch;
        let tape = Tape::new();
        let w = model.params().bind(&tape, true);
        let logits = model.forward(&w, graph, Mode::train(rng.random()))?;
        let loss = metrics::loss(logits, graph, &train_mask)?;
        if !loss.value().data()[0].is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        let grads = tape.backward(loss)?;
        let g = w.collect_grads(&grads);
        drop(tape);
        opt.step(model.params_mut().values_mut(), &g)?;
        steps += 1;
        if !model.params().all_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        let (metric, val_loss) = evaluate_val(model.params(), &model)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        if metric > best_val_metric || (metric == best_val_metric && val_loss < best_val_loss) {
            best_val_metric = metric;
            best_val_loss = val_loss;
            best_params = model.params().clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hp.patience {
                break;
            }
        }
    }
    *model.params_mut() = best_params;
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_metric,
        best_val_loss,
        epochs_run,
        steps,
    })
}

/// Accuracy (single-label) or micro-F1 (multi-label) on `split`.
pub fn evaluate(model: &impl GraphModel, graph: &Graph, split: Split) -> Result<f64, TrainError> {
    let mask = split_mask(graph, split)?;
    let logits = model.predict(graph)?;
    Ok(metrics::metric(&logits, graph.labels(), &mask)?)
}

/// Mean and population standard deviation of repeated test measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: MetricKind,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Set when only one repeat was run, so `std` carries no information.
    pub single_repeat: bool,
}

impl EvalReport {
    pub fn new(metric: MetricKind, values: Vec<f64>, seeds: Vec<u64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() >= 2 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        } else {
            0.0
        };
        Self {
            metric,
            mean,
            std,
            single_repeat: values.len() < 2,
            values,
            seeds,
        }
    }
}

/// Trains `genotype` once per seed and evaluates each best-validation model
/// on the test split.
pub fn retrain_report(
    genotype: &Genotype,
    graph: &Graph,
    hp: &HyperParams,
    seeds: &[u64],
) -> Result<EvalReport, TrainError> {
    let mut values = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(genotype, hp, graph.feat_dim(), graph.num_classes(), &mut rng)?;
        let out = train(model, graph, hp, seed)?;
        values.push(evaluate(&out.model, graph, Split::Test)?);
    }
    Ok(EvalReport::new(
        MetricKind::for_labels(graph.labels()),
        values,
        seeds.to_vec(),
    ))
}
