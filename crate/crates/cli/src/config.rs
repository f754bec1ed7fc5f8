use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use sane_core::baselines::trial_hyperparams;
use sane_core::graph::PlantedConfig;
use sane_core::search::SearchConfig;
use sane_core::trainer::{HyperParams, TuneSpace};

/// A configuration problem located by a JSON pointer into the document.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{pointer}: {message}")]
pub struct ConfigError {
    pub pointer: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

/// Where the graph comes from. Exactly one of `bundle_path` and `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<PlantedConfig>,
    /// Train/validation/test fractions. Required for synthetic graphs
    /// (defaulted to 60/20/20); for bundles, replaces the shipped masks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<[f64; 3]>,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Fixed hyperparameters for retraining inside sweeps.
    pub hyperparams: HyperParams,
    /// Tuning domains for `retrain`.
    pub space: TuneSpace,
    pub trials: usize,
    pub repeats: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            hyperparams: HyperParams::default(),
            space: TuneSpace::default(),
            trials: 50,
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Random-search trials.
    pub budget: usize,
    /// MLP-search trials.
    pub mlp_budget: usize,
    /// Per-trial training for both discrete baselines.
    pub trial: HyperParams,
    pub epsilons: Vec<f64>,
    pub k_values: Vec<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            budget: 200,
            mlp_budget: 12,
            trial: trial_hyperparams(),
            epsilons: vec![0.0, 0.2, 0.5, 0.9, 1.0],
            k_values: (1..=6).collect(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_search_runs() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: Option<DataConfig>,
    /// Search settings. The seed comes from the top-level `seed`.
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Independent seeded searches per `search` invocation.
    #[serde(default = "default_search_runs")]
    pub search_runs: usize,
    /// Worker threads for parallel trials; defaults to the available cores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

/// Sets `key.path=value` inside `doc`, creating objects along the way. The
/// value is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::new("", format!("override `{assignment}` is not of the form key.path=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(ConfigError::new("", format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let mut pointer = String::new();
    for key in path.split('.') {
        pointer.push('/');
        pointer.push_str(key);
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        cur = match cur {
            Value::Object(map) => map.entry(key.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let i: usize = key
                    .parse()
                    .map_err(|_| ConfigError::new(pointer.clone(), "expected an array index"))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| ConfigError::new(pointer.clone(), format!("index out of range (length {len})")))?
            }
            _ => return Err(ConfigError::new(pointer, "cannot descend into a scalar")),
        };
    }
    *cur = value;
    Ok(())
}

impl RunConfig {
    /// Parses a JSON document, applies `--set` overrides and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| ConfigError::new("", format!("invalid JSON: {e}")))?;
        if !doc.is_object() {
            return Err(ConfigError::new("", "the configuration must be a JSON object"));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_value(doc)
    }

    pub fn from_value(doc: Value) -> Result<Self, ConfigError> {
        if doc.pointer("/search/seed").is_some() {
            return Err(ConfigError::new(
                "/search/seed",
                "search seeds are derived from the top-level `seed`",
            ));
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let pointer = pointer_of(e.path());
            ConfigError::new(pointer, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let data = self.data()?;
        match (&data.bundle_path, &data.synth) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::new("/data", "give either `bundle_path` or `synth`, not both"))
            }
            (None, None) => return Err(ConfigError::new("/data", "needs `bundle_path` or `synth`")),
            _ => {}
        }
        if let Some(split) = data.split {
            let sum: f64 = split.iter().sum();
            if split.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(ConfigError::new("/data/split", format!("fractions {split:?} must be >= 0 and sum to 1")));
            }
        }
        self.search_config(0)
            .validate()
            .map_err(|e| ConfigError::new("/search", e.to_string()))?;
        self.trainer
            .hyperparams
            .validate()
            .map_err(|e| ConfigError::new("/trainer/hyperparams", e.to_string()))?;
        self.trainer
            .space
            .validate()
            .map_err(|e| ConfigError::new("/trainer/space", e.to_string()))?;
        if self.trainer.trials == 0 {
            return Err(ConfigError::new("/trainer/trials", "must be at least 1"));
        }
        if self.trainer.repeats == 0 {
            return Err(ConfigError::new("/trainer/repeats", "must be at least 1"));
        }
        self.baseline
            .trial
            .validate()
            .map_err(|e| ConfigError::new("/baseline/trial", e.to_string()))?;
        if self.baseline.budget == 0 {
            return Err(ConfigError::new("/baseline/budget", "must be at least 1"));
        }
        if self.baseline.mlp_budget == 0 {
            return Err(ConfigError::new("/baseline/mlp_budget", "must be at least 1"));
        }
        if let Some(i) = self.baseline.epsilons.iter().position(|e| !(0.0..=1.0).contains(e)) {
            return Err(ConfigError::new(format!("/baseline/epsilons/{i}"), "must lie in [0, 1]"));
        }
        if let Some(i) = self.baseline.k_values.iter().position(|&k| k == 0) {
            return Err(ConfigError::new(format!("/baseline/k_values/{i}"), "must be at least 1"));
        }
        if self.search_runs == 0 {
            return Err(ConfigError::new("/search_runs", "must be at least 1"));
        }
        if self.workers == Some(0) {
            return Err(ConfigError::new("/workers", "must be at least 1"));
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&DataConfig, ConfigError> {
        self.data
            .as_ref()
            .ok_or_else(|| ConfigError::new("/data", "missing data section"))
    }

    /// Seed of the `run`-th independent search.
    pub fn search_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }

    pub fn search_config(&self, run: usize) -> SearchConfig {
        SearchConfig {
            seed: self.search_seed(run),
            ..self.search.clone()
        }
    }

    /// The configuration with every default written out, in a form that
    /// parses back to the same value.
    pub fn resolved_json(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        if let Some(search) = doc.get_mut("search").and_then(Value::as_object_mut) {
            search.remove("seed");
        }
        let mut s = serde_json::to_string_pretty(&doc).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = r#"{"data": {"synth": {"num_nodes": 60}}}"#;

    #[test]
    fn missing_data_names_pointer() {
        let err = RunConfig::parse("{}", &[]).unwrap_err();
        assert_eq!(err.pointer, "/data");
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = RunConfig::parse(r#"{"data": {"synth": {"bogus": 1}}}"#, &[]).unwrap_err();
        assert_eq!(err.pointer, "/data/synth/bogus");
        let err = RunConfig::parse(r#"{"data": {"synth": {}}, "serach": {}}"#, &[]).unwrap_err();
        assert_eq!(err.pointer, "/serach");
        let err = RunConfig::parse(r#"{"data": {"synth": {}}, "search": {"epochs": "many"}}"#, &[]).unwrap_err();
        assert_eq!(err.pointer, "/search/epochs");
    }

    #[test]
    fn search_seed_comes_from_top_level() {
        let err = RunConfig::parse(r#"{"data": {"synth": {}}, "search": {"seed": 3}}"#, &[]).unwrap_err();
        assert_eq!(err.pointer, "/search/seed");
        let cfg = RunConfig::parse(SYNTH, &["seed=10".into()]).unwrap();
        assert_eq!(cfg.search_config(2).seed, 12);
    }

    #[test]
    fn overrides_parse_json_values() {
        let cfg = RunConfig::parse(
            SYNTH,
            &[
                "search.epochs=7".into(),
                "search.K=2".into(),
                "output_dir=out/x".into(),
                "baseline.epsilons=[0.0,1.0]".into(),
                "baseline.epsilons.1=0.5".into(),
                "trainer.hyperparams.activation=tanh".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.search.epochs, 7);
        assert_eq!(cfg.search.k, 2);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert_eq!(cfg.baseline.epsilons, vec![0.0, 0.5]);
        assert!(RunConfig::parse(SYNTH, &["search.epochs".into()]).is_err());
        assert!(RunConfig::parse(SYNTH, &["search..epochs=1".into()]).is_err());
        assert!(RunConfig::parse(SYNTH, &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn data_source_must_be_unique() {
        let both = r#"{"data": {"synth": {}, "bundle_path": "x"}}"#;
        assert_eq!(RunConfig::parse(both, &[]).unwrap_err().pointer, "/data");
        assert_eq!(RunConfig::parse(r#"{"data": {}}"#, &[]).unwrap_err().pointer, "/data");
    }

    #[test]
    fn semantic_validation_points_at_section() {
        let err = RunConfig::parse(SYNTH, &["search.epsilon=2".into()]).unwrap_err();
        assert_eq!(err.pointer, "/search");
        let err = RunConfig::parse(SYNTH, &["baseline.epsilons=[0, 1.5]".into()]).unwrap_err();
        assert_eq!(err.pointer, "/baseline/epsilons/1");
        let err = RunConfig::parse(SYNTH, &["data.split=[0.5,0.5,0.5]".into()]).unwrap_err();
        assert_eq!(err.pointer, "/data/split");
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::parse(SYNTH, &[]).unwrap();
        assert_eq!(RunConfig::parse(&cfg.resolved_json(), &[]).unwrap(), cfg);
        assert!(cfg.resolved_json().contains("\"epochs\": 200"));
    }
}
