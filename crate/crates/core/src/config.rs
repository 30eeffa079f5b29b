//! Run configuration: a single JSON document that names the data source, the
//! frozen backend, the network, and the list of scenarios to execute.
//!
//! Unknown fields are rejected, and every parse or validation failure names
//! the offending path (for example `scenarios[1].k`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::NetworkSpec;
use crate::fm::{Demonstration, SimBackendConfig};
use crate::icl::{ContextTemplate, DemoPolicy};
use crate::fl::FlConfig;
use crate::partition::{PartitionSpec, SynthClassSpec, SynthNextWordSpec};
use crate::{Error, Result};

// --------------------------------------------------------------------------
// Data sources
// --------------------------------------------------------------------------

/// Task identity and phrasing; the label space comes from the data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDef {
    pub id: String,
    #[serde(default)]
    pub description: String,
    /// Class names for file-backed classification data. Synthetic sources
    /// name their own classes and reject this field being set.
    #[serde(default)]
    pub classes: Vec<String>,
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated topic-classification corpus split across clients by the
    /// partitioner; the backend fits on the corpus's public pool.
    SyntheticClassification {
        spec: SynthClassSpec,
        partition: PartitionSpec,
        task: TaskDef,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        /// Keep at most this many training examples per client.
        #[serde(default)]
        train_cap: Option<usize>,
    },
    /// Generated per-user sentence streams; the backend's language model
    /// fits on the public sentences.
    SyntheticNextWord {
        spec: SynthNextWordSpec,
        task: TaskDef,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
    /// Records from a JSON-lines file that already carries client ids and
    /// splits. Classification only; `task.classes` must list the label space.
    Jsonl {
        path: String,
        task: TaskDef,
        #[serde(default)]
        train_cap: Option<usize>,
    },
}

impl DataConfig {
    pub fn task(&self) -> &TaskDef {
        match self {
            DataConfig::SyntheticClassification { task, .. } => task,
            DataConfig::SyntheticNextWord { task, .. } => task,
            DataConfig::Jsonl { task, .. } => task,
        }
    }
}

// --------------------------------------------------------------------------
// Scenarios
// --------------------------------------------------------------------------

fn default_policy() -> DemoPolicy {
    DemoPolicy::UserPrivacy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    /// Federated averaging across the silos.
    Fl { fl: FlConfig },
    /// Each client trains the same architecture alone.
    LocalOnly { fl: FlConfig },
    /// Prompt with the task description only.
    IclZeroShot,
    /// Prompt with k demonstrations chosen under a policy.
    IclKshot {
        policy: DemoPolicy,
        k: usize,
        #[serde(default)]
        resample_per_example: bool,
    },
    /// Two-stage classification over seeded label groups.
    IclDecomposed {
        group_size: usize,
        #[serde(default = "default_policy")]
        policy: DemoPolicy,
        #[serde(default)]
        k: usize,
    },
    /// Content-free calibrated scores.
    IclCalibrated {
        #[serde(default)]
        cf_inputs: Vec<String>,
        #[serde(default = "default_policy")]
        policy: DemoPolicy,
        #[serde(default)]
        k: usize,
    },
    /// Decomposition with per-group calibration.
    IclDecomposedCalibrated {
        group_size: usize,
        #[serde(default)]
        cf_inputs: Vec<String>,
        #[serde(default = "default_policy")]
        policy: DemoPolicy,
        #[serde(default)]
        k: usize,
    },
    /// Paired grid over demonstration policies and k values.
    PolicySweep { policies: Vec<DemoPolicy>, ks: Vec<usize> },
}

impl Method {
    pub fn policy_with_k(&self) -> Option<(DemoPolicy, usize)> {
        match self {
            Method::IclKshot { policy, k, .. }
            | Method::IclDecomposed { policy, k, .. }
            | Method::IclCalibrated { policy, k, .. }
            | Method::IclDecomposedCalibrated { policy, k, .. } => Some((*policy, *k)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Directory-safe name; per-scenario outputs land under it.
    pub name: String,
    #[serde(flatten)]
    pub method: Method,
}

// --------------------------------------------------------------------------
// Top level
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Every scenario runs once per seed; comparisons pair by seed.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    #[serde(default)]
    pub backend: SimBackendConfig,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub template: ContextTemplate,
    /// Shared demonstration list for the public policy.
    #[serde(default)]
    pub public_demos: Vec<Demonstration>,
    pub scenarios: Vec<Scenario>,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.to_string(), message: message.into() }
}

fn dir_safe(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !dir_safe(&self.name) {
            return Err(config_err("name", "must be non-empty and use [A-Za-z0-9_-]"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if self.scenarios.is_empty() {
            return Err(config_err("scenarios", "at least one scenario is required"));
        }
        for (i, s) in self.scenarios.iter().enumerate() {
            let at = format!("scenarios[{i}]");
            if !dir_safe(&s.name) {
                return Err(config_err(
                    &format!("{at}.name"),
                    "must be non-empty and use [A-Za-z0-9_-]",
                ));
            }
            if self.scenarios.iter().filter(|o| o.name == s.name).count() > 1 {
                return Err(config_err(&format!("{at}.name"), "duplicate scenario name"));
            }
            let needs_public = match &s.method {
                Method::PolicySweep { policies, ks } => {
                    if policies.is_empty() {
                        return Err(config_err(&format!("{at}.policies"), "empty sweep"));
                    }
                    if ks.is_empty() {
                        return Err(config_err(&format!("{at}.ks"), "empty sweep"));
                    }
                    policies.contains(&DemoPolicy::Public) && ks.iter().any(|&k| k > 0)
                }
                m => matches!(m.policy_with_k(), Some((DemoPolicy::Public, k)) if k > 0),
            };
            if needs_public && self.public_demos.is_empty() {
                return Err(config_err(
                    &format!("{at}.policy"),
                    "public policy with k > 0 needs public_demos",
                ));
            }
            if let Method::Fl { fl } | Method::LocalOnly { fl } = &s.method {
                fl.validate().map_err(|e| match e {
                    Error::Config { path, message } => Error::Config {
                        path: format!("{at}.fl.{path}"),
                        message,
                    },
                    other => other,
                })?;
            }
            if let Method::IclDecomposed { group_size, .. }
            | Method::IclDecomposedCalibrated { group_size, .. } = &s.method
            {
                if *group_size < 2 {
                    return Err(config_err(&format!("{at}.group_size"), "must be at least 2"));
                }
            }
        }
        match &self.data {
            DataConfig::SyntheticClassification { spec, task, train_fraction, .. } => {
                spec.validate().map_err(|e| config_err("data.spec", e.to_string()))?;
                if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                    return Err(config_err("data.train_fraction", "must lie in (0, 1)"));
                }
                if !task.classes.is_empty() {
                    return Err(config_err(
                        "data.task.classes",
                        "synthetic sources name their own classes",
                    ));
                }
            }
            DataConfig::SyntheticNextWord { spec, task, train_fraction } => {
                spec.validate().map_err(|e| config_err("data.spec", e.to_string()))?;
                if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                    return Err(config_err("data.train_fraction", "must lie in (0, 1)"));
                }
                if !task.classes.is_empty() {
                    return Err(config_err(
                        "data.task.classes",
                        "synthetic sources name their own classes",
                    ));
                }
                if self.scenarios.iter().any(|s| {
                    !matches!(
                        s.method,
                        Method::IclZeroShot
                            | Method::IclKshot { .. }
                            | Method::PolicySweep { .. }
                    )
                }) {
                    return Err(config_err(
                        "scenarios",
                        "next-word data supports zero-shot, k-shot, and sweep scenarios",
                    ));
                }
            }
            DataConfig::Jsonl { path, task, .. } => {
                if path.is_empty() {
                    return Err(config_err("data.path", "empty path"));
                }
                if task.classes.len() < 2 {
                    return Err(config_err(
                        "data.task.classes",
                        "file-backed data needs at least two classes",
                    ));
                }
            }
        }
        if self.data.task().id.is_empty() {
            return Err(config_err("data.task.id", "empty task id"));
        }
        Ok(())
    }
}

/// Parse and validate a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> serde_json::Value {
        serde_json::json!({
            "name": "demo",
            "seeds": [1, 2],
            "data": {
                "source": "synthetic_classification",
                "spec": {
                    "num_classes": 3,
                    "vocab_per_class": 4,
                    "shared_vocab": 10,
                    "docs_per_class": 12,
                    "doc_len": 6,
                    "class_purity": 0.9
                },
                "partition": { "num_clients": 4, "mode": "iid", "seed": 7 },
                "task": { "id": "topic", "description": "pick the topic" }
            },
            "scenarios": [
                { "name": "zero", "method": "icl_zero_shot" },
                { "name": "kshot", "method": "icl_kshot", "policy": "user_privacy", "k": 3 }
            ]
        })
    }

    #[test]
    fn minimal_config_parses_and_validates() {
        let cfg = parse_config(&minimal().to_string()).unwrap();
        assert_eq!(cfg.name, "demo");
        assert_eq!(cfg.scenarios.len(), 2);
        assert_eq!(cfg.backend.lambda, 0.5);
    }

    #[test]
    fn unknown_field_errors_name_the_path() {
        let mut v = minimal();
        v["scenarios"][1]["kk"] = serde_json::json!(3);
        let err = parse_config(&v.to_string()).unwrap_err();
        match err {
            Error::Config { path, .. } => assert!(path.starts_with("scenarios"), "{path}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_type_errors_name_the_exact_field() {
        let mut v = minimal();
        v["seeds"] = serde_json::json!([1, "two"]);
        let err = parse_config(&v.to_string()).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "seeds[1]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_keys_inside_the_data_block_are_named() {
        let mut v = minimal();
        v["data"]["spec"].as_object_mut().unwrap().remove("doc_len");
        let err = parse_config(&v.to_string()).unwrap_err();
        match err {
            Error::Config { path, message } => {
                assert!(path.starts_with("data"), "{path}");
                assert!(message.contains("doc_len"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_seeds_are_rejected() {
        let mut v = minimal();
        v["seeds"] = serde_json::json!([]);
        let err = parse_config(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Config { path, .. } if path == "seeds"));
    }

    #[test]
    fn duplicate_scenario_names_are_rejected() {
        let mut v = minimal();
        v["scenarios"][1]["name"] = serde_json::json!("zero");
        assert!(parse_config(&v.to_string()).is_err());
    }

    #[test]
    fn public_policy_with_positive_k_needs_demos() {
        let mut v = minimal();
        v["scenarios"][1]["policy"] = serde_json::json!("public");
        let err = parse_config(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        v["public_demos"] = serde_json::json!([{ "input": "sw0", "label": "c0" }]);
        parse_config(&v.to_string()).unwrap();
    }

    #[test]
    fn round_trips_through_serde() {
        let cfg = parse_config(&minimal().to_string()).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
