//! Run configuration: a single TOML file with sections for paths,
//! training, and evaluation. Every field has a default; a SHA-256 hash of
//! the canonical serialization is stamped into metrics logs so any result
//! traces back to exact settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub catalog: PathBuf,
    pub workload: PathBuf,
    pub holdout: PathBuf,
    pub sft_checkpoint: PathBuf,
    pub grpo_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            catalog: "catalog.jsonl".into(),
            workload: "workload.jsonl".into(),
            holdout: "holdout.jsonl".into(),
            sft_checkpoint: "sft.ckpt".into(),
            grpo_checkpoint: "grpo.ckpt".into(),
            metrics: "metrics.jsonl".into(),
            report: "report.json".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_items: usize,
    pub n_categories: usize,
    pub attrs_per_category: usize,
    pub n_queries: usize,
    pub n_holdout: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 1,
            n_items: 500,
            n_categories: 10,
            attrs_per_category: 4,
            n_queries: 200,
            n_holdout: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.runs == 0 {
            return Err(Error::Config("eval.runs must be >= 1".into()));
        }
        if self.eval.temperature <= 0.0 {
            return Err(Error::Config("eval.temperature must be > 0".into()));
        }
        if self.gen.n_items == 0 || self.gen.n_queries == 0 {
            return Err(Error::Config("gen sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical TOML serialization, hex-encoded.
    pub fn hash(&self) -> Result<String> {
        let text =
            toml::to_string(self).map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    let text =
        toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("serialize config: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Environment overrides, applied after the file and before CLI flags.
/// Only scalar knobs that vary between runs of the same experiment.
pub fn apply_env_overrides(cfg: &mut RunConfig) -> Result<()> {
    fn parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>> {
        match std::env::var(name) {
            Ok(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid {name}: {v}"))),
            Err(_) => Ok(None),
        }
    }
    if let Some(v) = parse::<u64>("QEXPAND_SEED")? {
        cfg.train.seed = v;
        cfg.eval.seed = v;
    }
    if let Some(v) = parse::<usize>("QEXPAND_STEPS")? {
        cfg.train.steps = v;
    }
    if let Some(v) = parse::<usize>("QEXPAND_RUNS")? {
        cfg.eval.runs = v;
    }
    if let Some(v) = parse::<f64>("QEXPAND_TEMPERATURE")? {
        cfg.eval.temperature = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("run.toml");
        save_config(&cfg, &p).unwrap();
        let back = load_config(&p).unwrap();
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[train]\nseed = 7\nsteps = 12\n").unwrap();
        let cfg = load_config(&p).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.steps, 12);
        assert_eq!(cfg.train.group_size, 4);
        assert_eq!(cfg.eval.runs, 5);
    }

    #[test]
    fn hash_changes_with_settings() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.train.beta = 0.05;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn invalid_values_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[train]\nclip = 1.5\n").unwrap();
        assert!(matches!(load_config(&p), Err(Error::Config(_))));
        let p2 = dir.path().join("bad.toml");
        std::fs::write(&p2, "not [ valid = toml").unwrap();
        assert!(matches!(load_config(&p2), Err(Error::Config(_))));
    }
}
