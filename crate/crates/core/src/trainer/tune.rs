use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{retrain_report, train, EvalReport, HyperParams, Model, TrainError};
use crate::graph::Graph;
use crate::search::Genotype;
use crate::supernet::Activation;

/// Sampling domains for hyperparameter tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneSpace {
    pub heads: Vec<usize>,
    pub hidden: Vec<usize>,
    /// Log-uniform range.
    pub lr: [f64; 2],
    /// Log-uniform range, with an additional point mass at 0.
    pub l2: [f64; 2],
    pub l2_zero_prob: f64,
    pub activations: Vec<Activation>,
    /// Uniform range.
    pub dropout: [f64; 2],
    pub epochs: usize,
    pub patience: usize,
}

impl Default for TuneSpace {
    fn default() -> Self {
        Self {
            heads: vec![1, 2, 4, 8],
            hidden: vec![16, 32, 64, 128, 256, 512],
            lr: [1e-4, 1e-2],
            l2: [1e-5, 1e-3],
            l2_zero_prob: 0.2,
            activations: Activation::ALL.to_vec(),
            dropout: [0.0, 0.8],
            epochs: 600,
            patience: 30,
        }
    }
}

fn log_uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        return lo;
    }
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

impl TuneSpace {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.heads.is_empty() || self.hidden.is_empty() || self.activations.is_empty() {
            return bad("tuning domains must be non-empty".into());
        }
        if !self.hidden.iter().all(|&h| self.heads.iter().all(|&k| k > 0 && h % k == 0)) {
            return bad(format!(
                "every hidden width in {:?} must be divisible by every head count in {:?}",
                self.hidden, self.heads
            ));
        }
        if !(self.lr[0] > 0.0 && self.lr[0] <= self.lr[1] && self.lr[1].is_finite()) {
            return bad(format!("learning-rate range {:?} must be positive and ordered", self.lr));
        }
        if !(self.l2[0] > 0.0 && self.l2[0] <= self.l2[1] && self.l2[1].is_finite()) {
            return bad(format!("L2 range {:?} must be positive and ordered", self.l2));
        }
        if !(0.0..=1.0).contains(&self.l2_zero_prob) {
            return bad(format!("l2_zero_prob {} outside [0, 1]", self.l2_zero_prob));
        }
        if !(0.0 <= self.dropout[0] && self.dropout[0] <= self.dropout[1] && self.dropout[1] < 1.0) {
            return bad(format!("dropout range {:?} must lie in [0, 1)", self.dropout));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> HyperParams {
        let heads = self.heads[rng.random_range(0..self.heads.len())];
        let hidden = self.hidden[rng.random_range(0..self.hidden.len())];
        let lr = log_uniform(rng, self.lr);
        let l2 = if rng.random::<f64>() < self.l2_zero_prob {
            0.0
        } else {
            log_uniform(rng, self.l2)
        };
        let activation = self.activations[rng.random_range(0..self.activations.len())];
        let dropout = if self.dropout[0] == self.dropout[1] {
            self.dropout[0]
        } else {
            rng.random_range(self.dropout[0]..self.dropout[1])
        };
        HyperParams {
            heads,
            hidden,
            lr,
            l2,
            activation,
            dropout,
            epochs: self.epochs,
            patience: self.patience,
            ..HyperParams::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneTrial {
    pub hyperparams: HyperParams,
    pub seed: u64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: HyperParams,
    pub trials: Vec<TuneTrial>,
    pub report: EvalReport,
}

/// Random-search tuning on the validation split, then `repeats` retrains of
/// the winner reported on the test split. Trials run on the current rayon
/// pool; results are merged in trial order so the outcome does not depend
/// on the pool size.
pub fn tune(
    genotype: &Genotype,
    graph: &Graph,
    space: &TuneSpace,
    trials: usize,
    repeats: usize,
    seed: u64,
) -> Result<TuneOutcome, TrainError> {
    if trials == 0 || repeats == 0 {
        return Err(TrainError::Config("trials and repeats must be at least 1".into()));
    }
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans: Vec<(HyperParams, u64)> = (0..trials).map(|_| (space.sample(&mut rng), rng.random())).collect();
    let results: Vec<TuneTrial> = plans
        .into_par_iter()
        .map(|(hp, trial_seed)| {
            let mut init = ChaCha8Rng::seed_from_u64(trial_seed);
            let model = Model::new(genotype, &hp, graph.feat_dim(), graph.num_classes(), &mut init)?;
            let out = train(model, graph, &hp, trial_seed)?;
            log::debug!("tune trial: {hp:?} -> val {:.4}", out.best_val_metric);
            Ok(TuneTrial {
                hyperparams: hp,
                seed: trial_seed,
                val_metric: out.best_val_metric,
            })
        })
        .collect::<Result<_, TrainError>>()?;
    let best_index = (0..results.len())
        .fold(0, |best, i| if results[i].val_metric > results[best].val_metric { i } else { best });
    let best = results[best_index].hyperparams.clone();
    let seeds: Vec<u64> = (0..repeats as u64).map(|r| seed.wrapping_add(1_000_003 * (r + 1))).collect();
    let report = retrain_report(genotype, graph, &best, &seeds)?;
    Ok(TuneOutcome {
        best,
        trials: results,
        report,
    })
}
