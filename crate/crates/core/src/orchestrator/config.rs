use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::EndpointConfig;
use crate::oracle::WorldConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Synthetic,
    Live,
}

/// External training step fired after each Enlightenment batch in live mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainerHook {
    /// Program and leading arguments; the batch path is appended.
    Command(Vec<String>),
    /// POST `{"round": r, "batch_path": "..."}` to this URL.
    Webhook(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveConfig {
    pub sources: Vec<EndpointConfig>,
    pub target: Option<EndpointConfig>,
    pub trainer: Option<TrainerHook>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for metrics, dataset, report and checkpoints. Nothing is
    /// written when unset.
    pub dir: Option<PathBuf>,
    /// Write a checkpoint every this many rounds; 0 disables.
    pub checkpoint_every: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// R
    pub rounds: u32,
    /// B
    pub meditation_batch: u32,
    /// M
    pub enlightenment_batch: u32,
    /// w
    pub window: usize,
    /// u
    pub significance: f64,
    /// K, synthetic mode only; live mode uses the number of source endpoints.
    pub sources: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Main, secondary and sub domain names planted before the first round.
    pub initial_chains: Vec<[String; 3]>,
    pub world: WorldConfig,
    pub live: LiveConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            meditation_batch: 90,
            enlightenment_batch: 180,
            window: 20,
            significance: 0.2,
            sources: 3,
            seed: 0,
            mode: Mode::Synthetic,
            initial_chains: Vec::new(),
            world: WorldConfig::default(),
            live: LiveConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validating, for callers that apply overrides first.
    pub fn parse_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string().trim().replace('\n', " ")))
    }

    pub fn load(path: &FsPath) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::parse_toml(&text)
    }

    /// Number of source models in the ensemble.
    pub fn source_count(&self) -> usize {
        match self.mode {
            Mode::Synthetic => self.sources,
            Mode::Live => self.live.sources.len(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rounds < 1 {
            return Err(invalid("rounds", "must be at least 1"));
        }
        if self.meditation_batch < 1 {
            return Err(invalid("meditation_batch", "must be at least 1"));
        }
        if self.enlightenment_batch < 1 {
            return Err(invalid("enlightenment_batch", "must be at least 1"));
        }
        if self.window < 2 {
            return Err(invalid("window", format!("must be at least 2, got {}", self.window)));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(invalid("significance", format!("must lie in (0, 1), got {}", self.significance)));
        }
        for chain in &self.initial_chains {
            if chain.iter().any(|n| n.trim().is_empty()) {
                return Err(invalid("initial_chains", "domain names must be nonempty"));
            }
        }
        match self.mode {
            Mode::Synthetic => {
                if self.sources < 1 {
                    return Err(invalid("sources", "must be at least 1"));
                }
                self.world.validate().map_err(|r| invalid("world", r))?;
            }
            Mode::Live => {
                if self.live.sources.is_empty() {
                    return Err(invalid("live.sources", "live mode needs at least one source endpoint"));
                }
                let target = self.live.target.as_ref().ok_or_else(|| invalid("live.target", "missing"))?;
                if self.output.dir.is_none() {
                    return Err(invalid("output.dir", "live mode writes training batches and needs an output directory"));
                }
                for e in self.live.sources.iter().chain(std::iter::once(target)) {
                    e.validate().map_err(|r| invalid("live", r))?;
                }
            }
        }
        Ok(())
    }
}
