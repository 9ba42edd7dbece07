//! Experiment configuration files.
//!
//! A config is a JSON object with a `dataset` block, an optional
//! `partition` block, the `training` run configuration and the strategy and
//! seed grids. Unknown keys are reported as warnings, not errors.
//!
//! ```json
//! {
//!   "dataset": { "type": "sbm", "params": { "num_nodes": 200 } },
//!   "partition": { "scheme": "dirichlet", "alpha": 0.5 },
//!   "training": { "num_clients": 5, "clients_per_round": 5, "rounds": 50 },
//!   "strategies": ["fedais", "fedall"],
//!   "seeds": [0, 1, 2]
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::graph::{
    downsample_edges, generate_sbm, load_graph, partition_dirichlet, partition_iid, Graph,
    Partition, SbmParams,
};
use crate::orchestrator::{RunConfig, Strategy};
use crate::rng::{derive_seed, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DatasetSpec {
    /// Synthetic graph. Each run seed generates its own graph unless
    /// `graph_seed` pins one.
    Sbm {
        #[serde(default)]
        params: SbmParams,
        #[serde(default)]
        graph_seed: Option<u64>,
    },
    /// Graph JSON file; relative paths resolve against the config file.
    File { path: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Sbm {
            params: SbmParams::default(),
            graph_seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionScheme {
    Iid,
    #[default]
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    /// Dirichlet concentration.
    pub alpha: f64,
    /// Probability of keeping a within-client edge.
    pub edge_keep_ratio: f64,
    /// Also thin cross-client edges.
    pub downsample_cross: bool,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            scheme: PartitionScheme::Dirichlet,
            alpha: 0.5,
            edge_keep_ratio: 1.0,
            downsample_cross: false,
        }
    }
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionSpec,
    pub training: RunConfig,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::param("strategies must list at least one strategy"));
        }
        if self.seeds.is_empty() {
            return Err(Error::param("seeds must list at least one seed"));
        }
        let p = &self.partition;
        if !(p.alpha > 0.0 && p.alpha.is_finite()) {
            return Err(Error::param(format!("partition.alpha must be positive, got {}", p.alpha)));
        }
        if !(p.edge_keep_ratio > 0.0 && p.edge_keep_ratio <= 1.0) {
            return Err(Error::param(format!(
                "partition.edge_keep_ratio must lie in (0, 1], got {}",
                p.edge_keep_ratio
            )));
        }
        self.training.validate()
    }

    /// Resolves a relative dataset path against `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        if let DatasetSpec::File { path } = &mut self.dataset {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
    }

    /// Graph and partition for one run seed.
    pub fn build(&self, seed: u64) -> Result<(Graph, Partition)> {
        let g = match &self.dataset {
            DatasetSpec::Sbm { params, graph_seed } => generate_sbm(params, graph_seed.unwrap_or(seed))?,
            DatasetSpec::File { path } => load_graph(path)?,
        };
        let k = self.training.num_clients;
        let p = match self.partition.scheme {
            PartitionScheme::Iid => partition_iid(&g, k, seed)?,
            PartitionScheme::Dirichlet => partition_dirichlet(&g, k, self.partition.alpha, seed)?,
        };
        if self.partition.edge_keep_ratio < 1.0 {
            let thinned = downsample_edges(
                &g,
                &p,
                self.partition.edge_keep_ratio,
                self.partition.downsample_cross,
                derive_seed(seed, &[tag::DOWNSAMPLE]),
            )?;
            let p = Partition::from_assignment(&thinned, p.assignment().to_vec(), k)?;
            return Ok((thinned, p));
        }
        Ok((g, p))
    }

    /// Training configuration of one `(strategy, seed)` run.
    pub fn run_config(&self, strategy: Strategy, seed: u64) -> RunConfig {
        RunConfig {
            strategy,
            seed,
            ..self.training.clone()
        }
    }
}

/// Dotted paths of keys present in `input` but not in `typed`.
fn unknown_keys(input: &Value, typed: &Value, prefix: &str, out: &mut Vec<String>) {
    match (input, typed) {
        (Value::Object(a), Value::Object(b)) => {
            for (key, value) in a {
                let path = if prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{prefix}.{key}")
                };
                match b.get(key) {
                    Some(t) => unknown_keys(value, t, &path, out),
                    None => out.push(path),
                }
            }
        }
        (Value::Array(a), Value::Array(b)) => {
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                unknown_keys(x, y, &format!("{prefix}[{i}]"), out);
            }
        }
        _ => {}
    }
}

/// Parses and validates a config. Returns the config and one warning per
/// unrecognized key. Syntax and schema errors carry the line and column.
pub fn parse_config(bytes: &[u8]) -> Result<(ExperimentConfig, Vec<String>)> {
    let raw: Value = serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("config: {e}")))?;
    let cfg: ExperimentConfig =
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("config: {e}")))?;
    cfg.validate()?;
    let typed = serde_json::to_value(&cfg)?;
    let mut unknown = Vec::new();
    unknown_keys(&raw, &typed, "", &mut unknown);
    let warnings = unknown.into_iter().map(|k| format!("unknown config key `{k}` ignored")).collect();
    Ok((cfg, warnings))
}

/// Reads, parses and validates a config file, resolving relative dataset
/// paths against its directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<(ExperimentConfig, Vec<String>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut cfg, warnings) = parse_config(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Param(m) => Error::Param(format!("{}: {m}", path.display())),
        other => other,
    })?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok((cfg, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"training": {"num_clients": 3, "clients_per_round": 2, "rounds": 4}}"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let (cfg, warnings) = parse_config(MINIMAL.as_bytes()).unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
        assert_eq!(cfg.strategies, Strategy::ALL.to_vec());
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.partition, PartitionSpec::default());
        assert_eq!(cfg.dataset, DatasetSpec::default());
        assert_eq!(cfg.training.local_epochs, 10);
    }

    #[test]
    fn missing_field_is_named() {
        let err = parse_config(br#"{"training": {"num_clients": 3, "clients_per_round": 2}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rounds") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn unknown_keys_warn_with_paths() {
        let text = r#"{
            "training": {"num_clients": 3, "clients_per_round": 2, "rounds": 4, "adam": {"lr": 0.01, "momentum": 1}},
            "dataset": {"type": "sbm", "params": {"num_nodes": 50, "colour": "red"}},
            "notes": "x"
        }"#;
        let (cfg, warnings) = parse_config(text.as_bytes()).unwrap();
        assert_eq!(cfg.training.adam.lr, 0.01);
        let mut keys: Vec<&str> = warnings.iter().map(|w| w.split('`').nth(1).unwrap()).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["dataset.params.colour", "notes", "training.adam.momentum"]);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            r#"{"training": {"num_clients": 3, "clients_per_round": 4, "rounds": 4}}"#,
            r#"{"training": {"num_clients": 3, "clients_per_round": 2, "rounds": 4}, "seeds": []}"#,
            r#"{"training": {"num_clients": 3, "clients_per_round": 2, "rounds": 4}, "strategies": ["fedsgd"]}"#,
            r#"{"training": {"num_clients": 3, "clients_per_round": 2, "rounds": 4}, "partition": {"alpha": 0}}"#,
            r#"[1, 2]"#,
            r#"{"training": "#,
        ] {
            assert!(parse_config(text.as_bytes()).is_err(), "{text}");
        }
    }

    #[test]
    fn build_is_deterministic_and_downsamples() {
        let text = r#"{
            "dataset": {"type": "sbm", "params": {"num_nodes": 60, "num_classes": 3, "p_in": 0.3, "p_out": 0.05}},
            "partition": {"scheme": "iid", "edge_keep_ratio": 0.5},
            "training": {"num_clients": 3, "clients_per_round": 2, "rounds": 4}
        }"#;
        let (cfg, _) = parse_config(text.as_bytes()).unwrap();
        let (g1, p1) = cfg.build(7).unwrap();
        let (g2, p2) = cfg.build(7).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(p1, p2);
        let full = generate_sbm(
            &SbmParams::new(60, 3, 0.3, 0.05, SbmParams::default().feature_dim),
            7,
        )
        .unwrap();
        assert!(g1.num_edges() < full.num_edges());
    }
}
