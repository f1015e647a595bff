//! The merged run configuration: built-in defaults, then a JSON config file,
//! then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::branches::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{config_hash, AblationPlan, AttentionVariant, ExperimentConfig};
use crate::nn::checkpoint::write_atomic;
use crate::synthetic::{DatasetSpec, FamilyKind};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Base seed: dataset generation, model initialization and training.
    pub seed: u64,
    /// Seeds of the multi-seed protocols.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Worker threads; `None` uses every core.
    pub jobs: Option<usize>,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Variants compared by `generalize`.
    pub generalization_variants: Vec<AttentionVariant>,
    pub ablation: AblationPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seeds: vec![0, 1, 2],
            out: PathBuf::from("out"),
            jobs: None,
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generalization_variants: vec![AttentionVariant::NoAttention, AttentionVariant::LamsSam],
            ablation: AblationPlan::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub fragment_size: Option<usize>,
    pub epochs: Option<usize>,
    pub leave_out: Option<FamilyKind>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Defaults, then the optional file, then `ov`. A seed override also
    /// seeds the dataset and shifts the protocol seeds to `seed, seed+1, …`.
    pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
        let mut cfg = match file {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = ov.seed {
            cfg.seed = seed;
            cfg.dataset.seed = seed;
            let n = cfg.seeds.len().max(1) as u64;
            cfg.seeds = (0..n).map(|k| seed.wrapping_add(k)).collect();
        }
        if let Some(out) = &ov.out {
            cfg.out = out.clone();
        }
        if ov.jobs.is_some() {
            cfg.jobs = ov.jobs;
        }
        if let Some(s) = ov.fragment_size {
            cfg.model.mfss.fragment_size = s;
        }
        if let Some(e) = ov.epochs {
            cfg.train.epochs = e;
        }
        if ov.leave_out.is_some() {
            cfg.dataset.leave_out = ov.leave_out;
        }
        cfg.train.seed = cfg.seed;
        cfg.model.validate()?;
        if cfg.jobs == Some(0) {
            return Err(Error::contract("--jobs must be at least 1"));
        }
        Ok(cfg)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            seeds: self.seeds.clone(),
        }
    }

    /// Hash of everything that affects results; the output directory and
    /// thread count are excluded.
    pub fn hash(&self) -> Result<String> {
        config_hash(&RunConfig {
            out: PathBuf::new(),
            jobs: None,
            ..self.clone()
        })
    }

    /// `<out>/<hash>-seed<seed>`.
    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.out.join(format!("{}-seed{}", self.hash()?, self.seed)))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_CONFIG_FILE);
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 4, "train": {"epochs": 3}, "model": {"mfss": {"fragment_size": 48}}}"#).unwrap();
        let from_file = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(from_file.seed, 4);
        assert_eq!(from_file.train.epochs, 3);
        assert_eq!(from_file.model.mfss.fragment_size, 48);
        assert_eq!(from_file.train.batch_size, TrainConfig::default().batch_size);
        let ov = Overrides {
            seed: Some(9),
            epochs: Some(5),
            leave_out: Some(FamilyKind::GlobalWarp),
            ..Overrides::default()
        };
        let merged = RunConfig::resolve(Some(&path), &ov).unwrap();
        assert_eq!(merged.seed, 9);
        assert_eq!(merged.seeds, vec![9, 10, 11]);
        assert_eq!(merged.dataset.seed, 9);
        assert_eq!(merged.train.epochs, 5);
        assert_eq!(merged.model.mfss.fragment_size, 48);
        assert_eq!(merged.dataset.leave_out, Some(FamilyKind::GlobalWarp));
    }

    #[test]
    fn saved_config_reproduces_itself() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::resolve(None, &Overrides {
            seed: Some(2),
            ..Overrides::default()
        })
        .unwrap();
        let path = cfg.save(dir.path()).unwrap();
        let back = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::default();
        let b = RunConfig {
            out: "elsewhere".into(),
            jobs: Some(1),
            ..RunConfig::default()
        };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert!(a.run_dir().unwrap().ends_with(format!("{}-seed0", a.hash().unwrap())));
    }

    #[test]
    fn invalid_values_rejected() {
        let ov = Overrides {
            fragment_size: Some(8),
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(None, &ov).is_err());
        let ov = Overrides {
            jobs: Some(0),
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(None, &ov).is_err());
    }
}
