//! Run configuration. On disk it is a flat JSON object with dotted keys
//! (`cluster.k`, `taskmodel.pretrain.epochs`, ...); any key may be omitted
//! and takes its default.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cluster::KMeansParams;
use crate::error::{Error, Result};
use crate::forest::ForestParams;
use crate::reduce::DEFAULT_COMPONENTS;
use crate::synthsite::CohortConfig;
use crate::taskmodel::TrainConfig;

/// Optimizer schedule of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Schedule {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

impl From<TrainConfig> for Schedule {
    fn from(c: TrainConfig) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskModelConfig {
    pub pretrain: Schedule,
    pub finetune: Schedule,
    pub min_finetune_samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleConfig {
    /// Directory of a saved style model; `None` uses the seeded default.
    pub weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReduceConfig {
    pub components: usize,
}

/// Feature extractor of the single-model comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// The pooled pre-trained network as is.
    #[default]
    Pretrained,
    /// The pre-trained network fine-tuned once more on all labelled images.
    PooledFinetune,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub baseline: Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub cohort: CohortConfig,
    pub style: StyleConfig,
    pub cluster: KMeansParams,
    pub taskmodel: TaskModelConfig,
    pub reduce: ReduceConfig,
    pub forest: ForestParams,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cohort: CohortConfig::default(),
            style: StyleConfig::default(),
            cluster: KMeansParams::default(),
            taskmodel: TaskModelConfig {
                pretrain: TrainConfig::pretrain_default(0).into(),
                finetune: TrainConfig::finetune_default(0).into(),
                min_finetune_samples: 4,
            },
            reduce: ReduceConfig {
                components: DEFAULT_COMPONENTS,
            },
            forest: ForestParams::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                flatten_into(&format!("{prefix}{k}."), v, out);
            }
        }
        leaf => {
            out.insert(prefix.trim_end_matches('.').to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("keys come from a flattened struct");
            }
        }
    }
    Value::Object(root)
}

fn config_error(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Every key with its value.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("config serializes")
    }

    /// Parses a flat dotted-key JSON object over the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Map<String, Value> =
            serde_json::from_str(text).map_err(|e| config_error("<document>", e.to_string()))?;
        let mut flat = Self::default().to_flat();
        for (key, value) in user {
            match flat.get_mut(&key) {
                Some(slot) => *slot = value,
                None => return Err(config_error(key, "unknown key")),
            }
        }
        let nested = unflatten(&flat);
        let config: RunConfig = serde_path_to_error::deserialize(nested)
            .map_err(|e| config_error(e.path().to_string(), e.into_inner().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort
            .validate()
            .map_err(|e| config_error("cohort", e.to_string()))?;
        if self.cluster.k == 0 {
            return Err(config_error("cluster.k", "must be at least 1"));
        }
        if self.cluster.restarts == 0 {
            return Err(config_error("cluster.restarts", "must be at least 1"));
        }
        if self.cluster.max_iter == 0 {
            return Err(config_error("cluster.max_iter", "must be at least 1"));
        }
        for (name, s) in [
            ("pretrain", &self.taskmodel.pretrain),
            ("finetune", &self.taskmodel.finetune),
        ] {
            s.with_seed(0)
                .validate()
                .map_err(|e| config_error(format!("taskmodel.{name}"), e.to_string()))?;
        }
        if self.reduce.components == 0 {
            return Err(config_error("reduce.components", "must be at least 1"));
        }
        if self.forest.n_trees == 0 {
            return Err(config_error("forest.n_trees", "must be at least 1"));
        }
        if self.forest.min_samples_leaf == 0 {
            return Err(config_error("forest.min_samples_leaf", "must be at least 1"));
        }
        if self.forest.max_features == Some(0) {
            return Err(config_error("forest.max_features", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
        let flat = c.to_flat();
        assert_eq!(flat["cluster.k"], 5);
        assert_eq!(flat["taskmodel.pretrain.epochs"], 60);
        assert_eq!(flat["taskmodel.finetune.learning_rate"], 0.0002);
        assert_eq!(flat["reduce.components"], 32);
        assert_eq!(flat["pipeline.baseline"], "pretrained");
        assert!(flat["style.weights"].is_null());
    }

    #[test]
    fn overrides() {
        let c = RunConfig::from_json(
            r#"{"cluster.k": 3, "forest.max_features": 4, "pipeline.baseline": "pooled-finetune"}"#,
        )
        .unwrap();
        assert_eq!(c.cluster.k, 3);
        assert_eq!(c.forest.max_features, Some(4));
        assert_eq!(c.pipeline.baseline, Baseline::PooledFinetune);
    }

    #[test]
    fn errors_name_the_key() {
        let key = |text: &str| match RunConfig::from_json(text).unwrap_err() {
            Error::Config { key, .. } => key,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(key(r#"{"cluster.kk": 3}"#), "cluster.kk");
        assert_eq!(key(r#"{"cluster": {"k": 3}}"#), "cluster");
        assert_eq!(key(r#"{"cluster.k": "five"}"#), "cluster.k");
        assert_eq!(key(r#"{"cluster.k": 0}"#), "cluster.k");
        assert_eq!(
            key(r#"{"taskmodel.pretrain.learning_rate": -1.0}"#),
            "taskmodel.pretrain"
        );
        assert_eq!(key(r#"{"pipeline.baseline": "other"}"#), "pipeline.baseline");
        assert!(RunConfig::from_json("[1]").unwrap_err().is_validation());
    }
}
