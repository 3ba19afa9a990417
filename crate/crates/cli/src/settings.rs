//! The config document: run settings at the top level plus optional
//! `[simulation]` and `[calibration]` tables for the study commands.

use std::path::Path;

use arbor_core::orchestrator::{ConfigError, RunConfig};
use arbor_core::simulate::RateChange;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Simulation {
    pub arms: Vec<f64>,
    pub rounds: u64,
    /// Number of seeds, counted up from the base seed.
    pub seeds: u64,
    pub drift: Vec<RateChange>,
    /// Run the IR sweep with the top-level window and significance.
    pub ir: bool,
}

impl Default for Simulation {
    fn default() -> Self {
        Self { arms: Vec::new(), rounds: 1000, seeds: 1, drift: Vec::new(), ir: false }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Calibration {
    pub lambda: f64,
    pub trials: u64,
    pub n: u64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self { lambda: 0.5, trials: 20_000, n: 200 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub run: RunConfig,
    pub simulation: Simulation,
    pub calibration: Calibration,
}

fn parse_err(e: toml::de::Error) -> ConfigError {
    ConfigError::Parse(e.to_string().trim().replace('\n', " "))
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(parse_err)?;
        let simulation = match table.remove("simulation") {
            Some(v) => v.try_into().map_err(parse_err)?,
            None => Simulation::default(),
        };
        let calibration = match table.remove("calibration") {
            Some(v) => v.try_into().map_err(parse_err)?,
            None => Calibration::default(),
        };
        let run = toml::Value::Table(table).try_into().map_err(parse_err)?;
        Ok(Self { run, simulation, calibration })
    }

    /// Defaults when no path is given. Nothing is validated yet, so that
    /// flag overrides can be applied first.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::parse(&text)
    }
}
