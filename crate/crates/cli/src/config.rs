//! Run configuration: one file describing a whole run — data, model,
//! training, evaluation, and audit settings — in TOML or JSON.
//!
//! Unknown keys are rejected everywhere in the tree, so a typo like
//! `learning_rate` (for `lr`) fails loudly instead of silently training
//! with defaults. After command-line overrides are applied, the resolved
//! configuration is written next to the run's outputs, making every
//! artifact reproducible from the files it sits beside.

use std::path::{Path, PathBuf};

use marconflow::audit::AuditConfig;
use marconflow::model::ModelConfig;
use marconflow::train::TrainConfig;
use marconflow::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where the instances come from and how they are normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Label used in reports; defaults to the training file's stem.
    pub name: Option<String>,
    /// Training instances (JSONL).
    pub train: Option<PathBuf>,
    /// Validation instances (JSONL).
    pub validation: Option<PathBuf>,
    /// Held-out instances (JSONL) for `eval`, `sample`, and `audit`.
    pub test: Option<PathBuf>,
    /// Z-standardize values per channel using training-set statistics.
    /// The statistics travel in the checkpoint so downstream commands
    /// apply the same transform.
    pub standardize: bool,
    /// Min-max normalize times into [0, 1] using training-set bounds.
    pub normalize_time: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: None,
            train: None,
            validation: None,
            test: None,
            standardize: true,
            normalize_time: false,
        }
    }
}

/// Evaluation settings for the `eval` verb.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Metrics to compute: njnll, mnll, crps, energy_score, mi.
    pub metrics: Vec<String>,
    /// Monte-Carlo samples per instance for the sampling-based metrics.
    pub n_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { metrics: vec!["njnll".into()], n_samples: 1000 }
    }
}

/// Everything one run needs. Every section has defaults, so a minimal
/// config may set nothing but the dataset paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for model initialization, shuffling, and Monte-Carlo draws.
    pub seed: u64,
    /// Output directory; created if missing.
    pub out: PathBuf,
    /// Worker threads for per-instance fan-out; 0 means all cores.
    pub threads: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub audit: AuditConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            threads: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            audit: AuditConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML (default) or JSON (by extension) config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: RunConfig = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.audit.validate()?;
        Ok(cfg)
    }

    /// The dataset label for reports.
    pub fn dataset_name(&self, data_path: Option<&Path>) -> String {
        if let Some(name) = &self.dataset.name {
            return name.clone();
        }
        let source = data_path.or(self.dataset.train.as_deref());
        source
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    }

    /// The model label for reports.
    pub fn model_name(&self) -> String {
        model_label(&self.model)
    }

    /// Writes the post-override configuration into the output directory.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join("resolved_config.toml");
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("cannot serialize resolved config: {e}")))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

/// Report label for a model: mixture size plus the variant when it is not
/// the full model (`moses4`, `moses1-gmm`, ...).
pub fn model_label(model: &ModelConfig) -> String {
    let d = model.components;
    if model.variant.is_full() {
        format!("moses{d}")
    } else {
        format!("moses{d}-{}", model.variant.label())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 7\n[dataset]\ntrain = \"a.jsonl\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dataset.train.as_deref(), Some(Path::new("a.jsonl")));
        assert!(cfg.dataset.standardize);
        assert_eq!(cfg.eval.metrics, vec!["njnll".to_string()]);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let dir = tempfile::tempdir().unwrap();
        for (name, text) in [
            ("top.toml", "sead = 7\n"),
            ("train.toml", "[train]\nlearning_rate = 0.001\n"),
            ("model.toml", "[model]\nlatent_width = 8\n"),
            ("variant.toml", "[model.variant]\nno_flows = true\n"),
        ] {
            let path = dir.path().join(name);
            std::fs::write(&path, text).unwrap();
            let err = RunConfig::load(&path).unwrap_err();
            assert!(matches!(err, Error::Validation(_)), "{name}: {err}");
        }
    }

    #[test]
    fn json_configs_load_too() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"seed": 3, "model": {"components": 2}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.components, 2);
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.out = dir.path().join("out");
        cfg.seed = 11;
        let path = cfg.write_resolved().unwrap();
        let reread = RunConfig::load(&path).unwrap();
        assert_eq!(reread, cfg);
    }

    #[test]
    fn model_names_encode_size_and_variant() {
        let mut cfg = RunConfig::default();
        cfg.model.components = 4;
        assert_eq!(cfg.model_name(), "moses4");
        cfg.model.variant = marconflow::variants::VariantSpec::parse("gmm").unwrap();
        assert_eq!(cfg.model_name(), "moses4-gmm");
    }
}
