//! Experiment configuration file (YAML).
//!
//! ```yaml
//! modality: CT
//! datalist: ./dataset.json
//! dataroot: ./data
//! train:        # optional, any TrainConfig field
//!   epochs: 20
//! arch:         # optional, replaces train.arch
//!   init_filters: 16
//! infer:        # optional, any InferConfig field
//!   overlap: 0.5
//! ```
//!
//! Relative paths are resolved against the directory holding the file.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::infer::InferConfig;
use crate::losses::LossConfig;
use crate::segresnet::ArchConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub modality: String,
    pub datalist: PathBuf,
    pub dataroot: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossConfig>,
    #[serde(default)]
    pub infer: InferConfig,
}

impl ExperimentConfig {
    pub fn from_yaml(text: &str) -> Result<Self> {
        serde_yaml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_yaml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.datalist, &mut cfg.dataroot] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The training recipe with the top-level overrides applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(a) = &self.arch {
            t.arch = a.clone();
        }
        if let Some(a) = &self.augment {
            t.augment = a.clone();
        }
        if let Some(l) = &self.loss {
            t.loss = l.clone();
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        if self.modality != "CT" {
            return Err(Error::Config(format!("unsupported modality {:?} (expected \"CT\")", self.modality)));
        }
        if !self.datalist.is_file() {
            return Err(Error::Config(format!("datalist {} does not exist", self.datalist.display())));
        }
        if !self.dataroot.is_dir() {
            return Err(Error::Config(format!("dataroot {} does not exist", self.dataroot.display())));
        }
        self.train_config().validate()?;
        if self.infer.paper_literal != self.train.paper_literal {
            return Err(Error::Config("train.paper_literal and infer.paper_literal disagree".into()));
        }
        if !(0.0..1.0).contains(&self.infer.overlap) {
            return Err(Error::Config(format!("infer.overlap must be in [0, 1), got {}", self.infer.overlap)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(yaml: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("dataset.json"), r#"{"training": []}"#).unwrap();
        std::fs::create_dir(dir.path().join("data")).unwrap();
        let p = dir.path().join("exp.yaml");
        std::fs::write(&p, yaml).unwrap();
        (dir, p)
    }

    #[test]
    fn minimal_three_line_config() {
        let (dir, p) = setup("modality: CT\ndatalist: ./dataset.json\ndataroot: data\n");
        let cfg = ExperimentConfig::load(&p).unwrap();
        assert_eq!(cfg.datalist, dir.path().join("./dataset.json"));
        assert_eq!(cfg.train_config(), TrainConfig::default());
        assert_eq!(cfg.infer, InferConfig::default());
    }

    #[test]
    fn overrides_apply() {
        let (_d, p) = setup(
            "modality: CT\ndatalist: dataset.json\ndataroot: data\ntrain:\n  epochs: 3\n  seed: 9\narch:\n  init_filters: 8\ninfer:\n  overlap: 0.5\n",
        );
        let cfg = ExperimentConfig::load(&p).unwrap();
        let t = cfg.train_config();
        assert_eq!((t.epochs, t.seed, t.arch.init_filters), (3, 9, 8));
        assert_eq!(t.arch.blocks_per_stage, ArchConfig::default().blocks_per_stage);
        assert_eq!(cfg.infer.overlap, 0.5);
    }

    #[test]
    fn strictness() {
        for yaml in [
            "modality: MR\ndatalist: dataset.json\ndataroot: data\n",
            "modality: CT\ndatalist: missing.json\ndataroot: data\n",
            "modality: CT\ndatalist: dataset.json\ndataroot: data\nepochs: 3\n",
            "modality: CT\ndatalist: dataset.json\ndataroot: data\ntrain:\n  epoch: 3\n",
            "modality: CT\ndatalist: dataset.json\ndataroot: data\ntrain:\n  lr0: -1\n",
            "datalist: dataset.json\ndataroot: data\n",
        ] {
            let (_d, p) = setup(yaml);
            let e = ExperimentConfig::load(&p).unwrap_err();
            assert_eq!(e.kind(), "config", "{yaml}: {e}");
        }
    }
}
