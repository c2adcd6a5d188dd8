//! Run configuration: one JSON file with per-module blocks. All randomness
//! flows from the seeds written here; nothing reads the clock or OS entropy.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusterConfig;
use crate::pipeline::EcoValConfig;
use crate::shapley::TmcConfig;
use crate::utility::{ModelKind, UtilitySpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("referenced path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub embeddings: PathBuf,
    pub meta: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitBlock {
    /// Fractions for train / test / distribution_pool / oos.
    pub fractions: [f64; 4],
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitBlock {
    fn default() -> Self {
        Self {
            fractions: [0.5, 0.2, 0.2, 0.1],
            seed: 0,
        }
    }
}

/// Utility block; `empty_set_utility` defaults to 1/K once the dataset's
/// class count is known.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityBlock {
    #[serde(flatten)]
    pub model: ModelKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub empty_set_utility: Option<f64>,
}

impl Default for UtilityBlock {
    fn default() -> Self {
        Self {
            model: ModelKind::Knn { k: 1 },
            seed: 0,
            empty_set_utility: None,
        }
    }
}

impl UtilityBlock {
    pub fn resolve(&self, n_classes: usize) -> UtilitySpec {
        UtilitySpec {
            model: self.model,
            seed: self.seed,
            empty_set_utility: self
                .empty_set_utility
                .unwrap_or(1.0 / n_classes as f64),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetPaths,
    #[serde(default)]
    pub splits: SplitBlock,
    #[serde(default)]
    pub utility: UtilityBlock,
    #[serde(default)]
    pub clustering: ClusterConfig,
    /// Monte Carlo settings for the standalone `tmc` baseline.
    #[serde(default)]
    pub tmc: TmcConfig,
    #[serde(default)]
    pub ecoval: EcoValConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Parse a config file and check every referenced input path exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_reader(BufReader::new(File::open(path.as_ref())?))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for p in [&self.dataset.embeddings, &self.dataset.meta] {
            if !p.exists() {
                return Err(ConfigError::MissingPath(p.clone()));
            }
        }
        if self.ecoval.per_cluster_sample == 0 {
            return Err(ConfigError::Invalid(
                "ecoval.per_cluster_sample must be >= 1".into(),
            ));
        }
        if self.ecoval.regressor_k == 0 {
            return Err(ConfigError::Invalid("ecoval.regressor_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, write_dataset};
    use crate::pipeline::Variant;

    fn write_blobs(dir: &Path) -> DatasetPaths {
        let ds = synth_blobs(12, 0.0, 1);
        let paths = DatasetPaths {
            embeddings: dir.join("emb.f32"),
            meta: dir.join("meta.json"),
        };
        write_dataset(&ds, &paths.embeddings, &paths.meta).unwrap();
        paths
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_blobs(dir.path());
        let text = format!(
            r#"{{"dataset": {{"embeddings": {:?}, "meta": {:?}}}}}"#,
            paths.embeddings, paths.meta
        );
        let cfg_path = dir.path().join("run.json");
        std::fs::write(&cfg_path, text).unwrap();
        let cfg = RunConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.splits.fractions, [0.5, 0.2, 0.2, 0.1]);
        assert_eq!(cfg.ecoval.variant, Variant::Full);
        assert_eq!(cfg.ecoval.regressor_k, 5);
        assert_eq!(cfg.tmc.convergence_window, 100);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        let spec = cfg.utility.resolve(2);
        assert_eq!(spec.empty_set_utility, 0.5);
        assert!(matches!(spec.model, ModelKind::Knn { k: 1 }));
    }

    #[test]
    fn missing_dataset_path_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"dataset": {"embeddings": "/nonexistent.f32", "meta": "/nonexistent.json"}}"#;
        let cfg_path = dir.path().join("run.json");
        std::fs::write(&cfg_path, text).unwrap();
        assert!(matches!(
            RunConfig::load(&cfg_path),
            Err(ConfigError::MissingPath(_))
        ));
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.json");
        std::fs::write(&cfg_path, "{not json").unwrap();
        assert!(matches!(
            RunConfig::load(&cfg_path),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn blocks_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_blobs(dir.path());
        let text = format!(
            r#"{{
                "dataset": {{"embeddings": {:?}, "meta": {:?}}},
                "splits": {{"fractions": [0.6, 0.4, 0.0, 0.0], "seed": 3}},
                "utility": {{"model": "logistic", "learning_rate": 0.1, "epochs": 50, "l2": 0.01}},
                "clustering": {{"n_components": 4}},
                "ecoval": {{"variant": "no_beta", "per_cluster_sample": 2, "tmc": {{"max_permutations": 9, "convergence_window": 100, "convergence_tol": 0.001, "truncation_tol": 0.01, "seed": 0}}, "regressor_k": 2, "seed": 8}},
                "output_dir": "results"
            }}"#,
            paths.embeddings, paths.meta
        );
        let cfg_path = dir.path().join("run.json");
        std::fs::write(&cfg_path, text).unwrap();
        let cfg = RunConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.splits.seed, 3);
        assert_eq!(cfg.clustering.n_components, 4);
        assert_eq!(cfg.ecoval.variant, Variant::NoBeta);
        assert_eq!(cfg.ecoval.tmc.max_permutations, 9);
        assert!(matches!(
            cfg.utility.model,
            ModelKind::Logistic { epochs: 50, .. }
        ));
        assert_eq!(cfg.output_dir, PathBuf::from("results"));
    }

    #[test]
    fn bad_ecoval_values_are_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_blobs(dir.path());
        let text = format!(
            r#"{{"dataset": {{"embeddings": {:?}, "meta": {:?}}},
               "ecoval": {{"variant": "full", "per_cluster_sample": 0, "tmc": {{"max_permutations": 0, "convergence_window": 100, "convergence_tol": 0.001, "truncation_tol": 0.01, "seed": 0}}, "regressor_k": 5, "seed": 0}}}}"#,
            paths.embeddings, paths.meta
        );
        let cfg_path = dir.path().join("run.json");
        std::fs::write(&cfg_path, text).unwrap();
        assert!(matches!(
            RunConfig::load(&cfg_path),
            Err(ConfigError::Invalid(_))
        ));
    }
}
