use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use sane_core::baselines::{mlp_search, random_search, results_csv, BaselineOutcome};
use sane_core::checkpoint::CheckpointError;
use sane_core::graph::{load_bundle, make_splits, synth_planted, Graph, GraphError};
use sane_core::metrics::MetricKind;
use sane_core::search::{self, enumerate_space_size, Genotype, Provenance, SearchConfig, SearchError, SearchOutcome};
use sane_core::trainer::{retrain_report, tune, EvalReport, HyperParams, TrainError, TuneOutcome};

use crate::config::{ConfigError, DataConfig, RunConfig};

pub const VERSION: &str = concat!("sane ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error at {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 2 for configuration and input errors, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

/// Writes the resolved configuration and the tool version into the output
/// directory.
pub fn prepare_output(cfg: &RunConfig) -> Result<()> {
    write(&cfg.output_dir.join("config.json"), cfg.resolved_json())?;
    write(&cfg.output_dir.join("VERSION"), format!("{VERSION}\n"))
}

fn write_timing(cfg: &RunConfig, command: &str, seconds: f64, extra: serde_json::Value) -> Result<()> {
    let doc = serde_json::json!({ "command": command, "seconds": seconds, "detail": extra });
    write(&cfg.output_dir.join("timing.json"), to_json(&doc))
}

pub fn load_graph(data: &DataConfig) -> Result<Graph> {
    let graph = match (&data.bundle_path, &data.synth) {
        (Some(path), None) => load_bundle(path)?,
        (None, Some(synth)) => synth_planted(synth)?,
        _ => return Err(ConfigError::new("/data", "needs exactly one of `bundle_path` and `synth`").into()),
    };
    let split = data.split.or(data.synth.as_ref().map(|_| [0.6, 0.2, 0.2]));
    Ok(match split {
        Some(fractions) => make_splits(graph, fractions, data.split_seed)?,
        None => graph,
    })
}

/// Runs `f` on a pool of `workers` threads (all cores when unset).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Input(format!("cannot start {threads} workers: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug)]
pub struct SearchRun {
    pub seed: u64,
    pub outcome: SearchOutcome,
    pub seconds: f64,
}

/// Independent searches, one per seed, run concurrently. Results keep the
/// order of `seeds`.
pub fn seeded_searches(graph: &Graph, base: &SearchConfig, seeds: &[u64]) -> Result<Vec<SearchRun>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let start = Instant::now();
            let outcome = search::search(graph, &SearchConfig { seed, ..base.clone() })?;
            log::info!(
                "search seed {seed}: {} (val {:.4})",
                outcome.genotype.short(),
                outcome.final_val_metric
            );
            Ok(SearchRun {
                seed,
                outcome,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// Index of the run with the best final validation metric; the first wins ties.
pub fn winner(runs: &[SearchRun]) -> usize {
    (0..runs.len()).fold(0, |best, i| {
        if runs[i].outcome.final_val_metric > runs[best].outcome.final_val_metric {
            i
        } else {
            best
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub genotype: Genotype,
    pub final_val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchSummary {
    pub runs: Vec<RunSummary>,
    pub winner: usize,
}

/// Seeded searches; writes each run's genotype, history and supernet
/// checkpoint under `run{i}/` and the winner's genotype at the top level.
pub fn cmd_search(cfg: &RunConfig) -> Result<SearchSummary> {
    let start = Instant::now();
    let graph = load_graph(cfg.data()?)?;
    prepare_output(cfg)?;
    let seeds: Vec<u64> = (0..cfg.search_runs).map(|i| cfg.search_seed(i)).collect();
    let runs = with_workers(cfg.workers, || seeded_searches(&graph, &cfg.search, &seeds))??;
    let hash = graph.content_hash();
    let provenance = |seed| Provenance {
        seed,
        epochs: cfg.search.epochs,
        dataset_hash: hash.clone(),
    };
    for (i, run) in runs.iter().enumerate() {
        let dir = cfg.output_dir.join(format!("run{i}"));
        write(&dir.join("genotype.json"), run.outcome.genotype.to_json(Some(&provenance(run.seed))))?;
        write(&dir.join("history.csv"), search::history_csv(&run.outcome.history))?;
        run.outcome.supernet.checkpoint(&run.outcome.arch).save(&dir, "supernet")?;
    }
    let best = winner(&runs);
    let best_run = &runs[best];
    write(
        &cfg.output_dir.join("genotype.json"),
        best_run.outcome.genotype.to_json(Some(&provenance(best_run.seed))),
    )?;
    let summary = SearchSummary {
        runs: runs
            .iter()
            .map(|r| RunSummary {
                seed: r.seed,
                genotype: r.outcome.genotype.clone(),
                final_val_metric: r.outcome.final_val_metric,
            })
            .collect(),
        winner: best,
    };
    write(&cfg.output_dir.join("search_summary.json"), to_json(&summary))?;
    let per_run: Vec<f64> = runs.iter().map(|r| r.seconds).collect();
    write_timing(cfg, "search", start.elapsed().as_secs_f64(), serde_json::json!({ "per_run_seconds": per_run }))?;
    Ok(summary)
}

pub fn read_genotype(path: &Path) -> Result<Genotype> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Genotype::from_json(&text)
        .map(|(g, _)| g)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Tunes the genotype on validation, retrains the winner `repeats` times
/// and writes `report.json`.
pub fn cmd_retrain(cfg: &RunConfig, genotype_path: &Path) -> Result<TuneOutcome> {
    let start = Instant::now();
    let genotype = read_genotype(genotype_path)?;
    let graph = load_graph(cfg.data()?)?;
    prepare_output(cfg)?;
    let t = &cfg.trainer;
    let out = with_workers(cfg.workers, || tune(&genotype, &graph, &t.space, t.trials, t.repeats, cfg.seed))??;
    write(&cfg.output_dir.join("report.json"), to_json(&out))?;
    write_timing(cfg, "retrain", start.elapsed().as_secs_f64(), serde_json::Value::Null)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineKind {
    Random,
    Mlp,
    Epsilon,
}

/// One row of an ε or K sweep: searches at every seed, each derived
/// genotype retrained once and measured on the test split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub genotypes: Vec<Genotype>,
    pub report: EvalReport,
    pub seconds: f64,
}

pub fn search_and_retrain(
    graph: &Graph,
    base: &SearchConfig,
    seeds: &[u64],
    hp: &HyperParams,
) -> Result<(Vec<SearchRun>, EvalReport)> {
    let runs = seeded_searches(graph, base, seeds)?;
    let values = runs
        .par_iter()
        .map(|run| Ok(retrain_report(&run.outcome.genotype, graph, hp, &[run.seed])?.values[0]))
        .collect::<Result<Vec<f64>>>()?;
    let report = EvalReport::new(MetricKind::for_labels(graph.labels()), values, seeds.to_vec());
    Ok((runs, report))
}

fn sweep(
    graph: &Graph,
    cfg: &RunConfig,
    values: &[f64],
    configure: impl Fn(f64) -> SearchConfig,
) -> Result<Vec<SweepRow>> {
    let seeds: Vec<u64> = (0..cfg.search_runs).map(|i| cfg.search_seed(i)).collect();
    values
        .iter()
        .map(|&value| {
            let start = Instant::now();
            let (runs, report) = search_and_retrain(graph, &configure(value), &seeds, &cfg.trainer.hyperparams)?;
            log::info!("sweep value {value}: mean {:.4} ± {:.4}", report.mean, report.std);
            Ok(SweepRow {
                value,
                genotypes: runs.into_iter().map(|r| r.outcome.genotype).collect(),
                report,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

pub fn sweep_csv(column: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{column},mean_test_metric,std_test_metric,test_metrics,seconds\n");
    for r in rows {
        let values: Vec<String> = r.report.values.iter().map(f64::to_string).collect();
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            r.value,
            r.report.mean,
            r.report.std,
            values.join(" "),
            r.seconds
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineResult {
    Trials(BaselineOutcome),
    Sweep(Vec<SweepRow>),
}

fn write_trials(cfg: &RunConfig, out: &BaselineOutcome, trial: &HyperParams) -> Result<()> {
    write(&cfg.output_dir.join("results.csv"), results_csv(&out.records))?;
    let best = serde_json::json!({
        "best": out.best(),
        "trial_hyperparams": trial,
        "note": "each trial trains with the fixed hyperparameters above; no per-trial tuning",
    });
    write(&cfg.output_dir.join("best.json"), to_json(&best))
}

pub fn cmd_baseline(cfg: &RunConfig, kind: BaselineKind, k_sweep: bool) -> Result<BaselineResult> {
    if k_sweep && kind != BaselineKind::Epsilon {
        return Err(CliError::Input("--k-sweep applies to the epsilon baseline only".into()));
    }
    let start = Instant::now();
    let graph = load_graph(cfg.data()?)?;
    prepare_output(cfg)?;
    let b = &cfg.baseline;
    let k = cfg.search.k;
    let result = with_workers(cfg.workers, || -> Result<BaselineResult> {
        Ok(match kind {
            BaselineKind::Random => {
                let out = random_search(&graph, k, b.budget, &b.trial, cfg.seed)?;
                write_trials(cfg, &out, &b.trial)?;
                BaselineResult::Trials(out)
            }
            BaselineKind::Mlp => {
                let out = mlp_search(&graph, k, b.mlp_budget, &b.trial, cfg.seed)?;
                write_trials(cfg, &out, &b.trial)?;
                BaselineResult::Trials(out)
            }
            BaselineKind::Epsilon if k_sweep => {
                let ks: Vec<f64> = b.k_values.iter().map(|&k| k as f64).collect();
                let rows = sweep(&graph, cfg, &ks, |k| SearchConfig {
                    k: k as usize,
                    ..cfg.search.clone()
                })?;
                write(&cfg.output_dir.join("k_sweep.csv"), sweep_csv("K", &rows))?;
                write(&cfg.output_dir.join("k_sweep.json"), to_json(&rows))?;
                BaselineResult::Sweep(rows)
            }
            BaselineKind::Epsilon => {
                let rows = sweep(&graph, cfg, &b.epsilons, |epsilon| SearchConfig {
                    epsilon,
                    ..cfg.search.clone()
                })?;
                write(&cfg.output_dir.join("epsilon.csv"), sweep_csv("epsilon", &rows))?;
                write(&cfg.output_dir.join("epsilon.json"), to_json(&rows))?;
                BaselineResult::Sweep(rows)
            }
        })
    })??;
    write_timing(
        cfg,
        &format!("baseline {kind:?}").to_lowercase(),
        start.elapsed().as_secs_f64(),
        serde_json::Value::Null,
    )?;
    Ok(result)
}

pub fn cmd_enumerate(k: usize) -> Result<u128> {
    enumerate_space_size(k).map_err(|e| CliError::Input(e.to_string()))
}
