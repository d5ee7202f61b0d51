//! Run configuration file (TOML). Every field has a default and unknown
//! keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{copy_task_corpus, load_and_filter, DataError, ParallelCorpus, DEFAULT_MAX_BYTES};
use crate::eval::DecodeConfig;
use crate::model::{ModelConfig, ModelError};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_source: Option<PathBuf>,
    pub train_target: Option<PathBuf>,
    pub valid_source: Option<PathBuf>,
    pub valid_target: Option<PathBuf>,
    pub max_bytes: usize,
    /// Use a synthetic copy corpus of this many pairs instead of files.
    pub copy_pairs: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_source: None,
            train_target: None,
            valid_source: None,
            valid_target: None,
            max_bytes: DEFAULT_MAX_BYTES,
            copy_pairs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub decode: DecodeConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Read a config file; relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.train_source,
            &mut cfg.data.train_target,
            &mut cfg.data.valid_source,
            &mut cfg.data.valid_target,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// The effective configuration with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        if self.decode.beam == 0 {
            return Err(ConfigError::Invalid("decode.beam must be at least 1".into()));
        }
        if self.train.token_budget == 0 {
            return Err(ConfigError::Invalid("train.token_budget must be positive".into()));
        }
        Ok(())
    }

    pub fn training_corpus(&self) -> Result<ParallelCorpus, ConfigError> {
        if let Some(n) = self.data.copy_pairs {
            return Ok(copy_task_corpus(n, self.seed).filter(self.data.max_bytes));
        }
        match (&self.data.train_source, &self.data.train_target) {
            (Some(s), Some(t)) => Ok(load_and_filter(s, t, self.data.max_bytes)?),
            _ => Err(ConfigError::Invalid(
                "data.train_source and data.train_target (or data.copy_pairs) are required".into(),
            )),
        }
    }

    pub fn validation_corpus(&self) -> Result<Option<ParallelCorpus>, ConfigError> {
        match (&self.data.valid_source, &self.data.valid_target) {
            (Some(s), Some(t)) => Ok(Some(load_and_filter(s, t, self.data.max_bytes)?)),
            (None, None) => Ok(None),
            _ => Err(ConfigError::Invalid(
                "data.valid_source and data.valid_target must be given together".into(),
            )),
        }
    }
}
