//! Discrete-space baselines: random search with full candidate training and
//! random search over MLP node aggregators.

mod mlp_model;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregators::{LayerAggKind, NodeAggKind, SkipKind, MLP_DEPTHS, MLP_WIDTHS};
use crate::graph::{Graph, Split};
use crate::search::Genotype;
use crate::trainer::{evaluate, train, GraphModel, HyperParams, Model, TrainError};

pub use mlp_model::MlpModel;

/// Per-trial training used by the baselines: the search-time hyperparameters
/// with a 200-epoch cap and early stopping after 30 stale epochs.
pub fn trial_hyperparams() -> HyperParams {
    HyperParams {
        epochs: 200,
        patience: 30,
        ..HyperParams::default()
    }
}

/// What a trial trained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidate {
    Genotype(Genotype),
    Mlp { width: usize, depth: usize },
}

impl Candidate {
    /// Single-line JSON: the genotype file layout, or `{"width", "depth"}`.
    pub fn to_json(&self) -> String {
        match self {
            Candidate::Genotype(g) => serde_json::json!({
                "node_ops": g.node_ops,
                "skip_ops": g.skip_ops,
                "layer_op": g.layer_op,
                "K": g.k(),
            })
            .to_string(),
            Candidate::Mlp { width, depth } => serde_json::json!({ "width": width, "depth": depth }).to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub candidate: Candidate,
    pub seed: u64,
    pub val_metric: f64,
    pub test_metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutcome {
    pub records: Vec<TrialRecord>,
    /// Index into `records` of the best validation trial (first on ties).
    pub best: usize,
}

impl BaselineOutcome {
    pub fn best(&self) -> &TrialRecord {
        &self.records[self.best]
    }
}

/// Uniform draw from the K-layer search space.
pub fn sample_genotype(k: usize, rng: &mut impl Rng) -> Genotype {
    let node_ops = (0..k)
        .map(|_| NodeAggKind::ALL[rng.random_range(0..NodeAggKind::ALL.len())])
        .collect();
    let skip_ops = (0..k)
        .map(|_| SkipKind::ALL[rng.random_range(0..SkipKind::ALL.len())])
        .collect();
    let layer_op = LayerAggKind::ALL[rng.random_range(0..LayerAggKind::ALL.len())];
    Genotype::new(node_ops, skip_ops, layer_op).expect("sampled genotype is valid")
}

/// All (width, depth) cells of the MLP grid.
pub fn mlp_grid() -> Vec<(usize, usize)> {
    MLP_WIDTHS
        .iter()
        .flat_map(|&w| MLP_DEPTHS.iter().map(move |&d| (w, d)))
        .collect()
}

fn run_trials<M: GraphModel + Send>(
    graph: &Graph,
    hp: &HyperParams,
    plans: Vec<(Candidate, u64)>,
    build: impl Fn(&Candidate, &mut ChaCha8Rng) -> Result<M, TrainError> + Sync,
) -> Result<BaselineOutcome, TrainError> {
    hp.validate()?;
    let records: Vec<TrialRecord> = plans
        .into_par_iter()
        .enumerate()
        .map(|(index, (candidate, seed))| {
            let start = Instant::now();
            let mut init = ChaCha8Rng::seed_from_u64(seed);
            let model = build(&candidate, &mut init)?;
            let out = train(model, graph, hp, seed)?;
            let test_metric = evaluate(&out.model, graph, Split::Test)?;
            log::debug!("trial {index}: {} val {:.4}", candidate.to_json(), out.best_val_metric);
            Ok(TrialRecord {
                index,
                candidate,
                seed,
                val_metric: out.best_val_metric,
                test_metric,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<_, TrainError>>()?;
    let best = (0..records.len()).fold(0, |b, i| {
        if records[i].val_metric > records[b].val_metric {
            i
        } else {
            b
        }
    });
    Ok(BaselineOutcome { records, best })
}

fn check_budget(budget: usize) -> Result<(), TrainError> {
    if budget == 0 {
        return Err(TrainError::Config("budget must be at least 1".into()));
    }
    Ok(())
}

/// Samples `budget` genotypes uniformly and trains each from scratch. Trials
/// run on the current rayon pool; records come back in trial order.
pub fn random_search(
    graph: &Graph,
    k: usize,
    budget: usize,
    hp: &HyperParams,
    seed: u64,
) -> Result<BaselineOutcome, TrainError> {
    check_budget(budget)?;
    if k == 0 {
        return Err(TrainError::Config("K must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans = (0..budget)
        .map(|_| (Candidate::Genotype(sample_genotype(k, &mut rng)), rng.random()))
        .collect();
    run_trials(graph, hp, plans, |c, rng| match c {
        Candidate::Genotype(g) => Model::new(g, hp, graph.feat_dim(), graph.num_classes(), rng),
        Candidate::Mlp { .. } => unreachable!("random search only plans genotypes"),
    })
}

/// Samples (width, depth) cells without replacement, starting a fresh pass
/// over the grid once every cell has been tried, and trains a K-layer network
/// of MLP aggregators for each.
pub fn mlp_search(
    graph: &Graph,
    k: usize,
    budget: usize,
    hp: &HyperParams,
    seed: u64,
) -> Result<BaselineOutcome, TrainError> {
    check_budget(budget)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans = Vec::with_capacity(budget);
    while plans.len() < budget {
        let mut cells = mlp_grid();
        cells.shuffle(&mut rng);
        for (width, depth) in cells.into_iter().take(budget - plans.len()) {
            plans.push((Candidate::Mlp { width, depth }, rng.random()));
        }
    }
    run_trials(graph, hp, plans, |c, rng| match *c {
        Candidate::Mlp { width, depth } => MlpModel::new(k, width, depth, hp, graph.feat_dim(), graph.num_classes(), rng),
        Candidate::Genotype(_) => unreachable!("MLP search only plans grid cells"),
    })
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// CSV with columns trial_index, genotype_json, val_metric, test_metric, seconds.
pub fn results_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from("trial_index,genotype_json,val_metric,test_metric,seconds\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            r.index,
            csv_quote(&r.candidate.to_json()),
            r.val_metric,
            r.test_metric,
            r.seconds
        ));
    }
    out
}
