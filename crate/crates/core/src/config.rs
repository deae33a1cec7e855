//! Top-level configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::finetune::FinetuneConfig;
use crate::harness::{CorpusSpec, ExperimentConfig, MatrixSpec};
use crate::pretrain::PretrainConfig;
use crate::synth::BlurSpec;

pub const SEED_ENV: &str = "LSMFM_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Propagated into the pretraining and finetuning seeds, and into the
    /// matrix seeds when none are listed.
    pub seed: u64,
    pub run_root: PathBuf,
    pub corpus: CorpusSpec,
    pub blur: BlurSpec,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub matrix: MatrixSpec,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            run_root: PathBuf::from("runs"),
            corpus: CorpusSpec::default(),
            blur: BlurSpec::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            matrix: MatrixSpec {
                seeds: Vec::new(),
                ..MatrixSpec::default()
            },
        }
    }
}

impl Config {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (or the defaults when `None`), applies the seed override
    /// from the environment and propagates the seed.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_toml(&fs::read_to_string(p).map_err(io_err(p))?)?,
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&mut self) {
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        if self.matrix.seeds.is_empty() {
            self.matrix.seeds = vec![self.seed];
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.blur.validate()?;
        self.pretrain.validate()?;
        self.finetune.schedule.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn experiment(&self) -> ExperimentConfig {
        let mut matrix = self.matrix.clone();
        if matrix.seeds.is_empty() {
            matrix.seeds = vec![self.seed];
        }
        ExperimentConfig {
            matrix,
            corpus: self.corpus.clone(),
            blur: self.blur.clone(),
            finetune: self.finetune.clone(),
        }
    }
}
