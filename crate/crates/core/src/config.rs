//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::{OracleConfig, PoolConfig, Scenario};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::simnet::{FlowConfig, LinkConfig, SimConfig};
use crate::telemetry::DetectorConfig;
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Closed-loop evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub switch_interval_s: f64,
    /// Seconds after the last switch or flow start before fairness is
    /// measured.
    pub settle_s: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { switch_interval_s: 5.0, settle_s: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_scenario")]
    pub scenario: Scenario,
    /// Simulation seed.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Explicit flows; the scenario's flows when empty.
    #[serde(default)]
    pub flows: Vec<FlowConfig>,
    #[serde(default)]
    pub link: LinkConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub detectors: DetectorConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_scenario() -> Scenario {
    Scenario::CubicBbr
}

fn default_seed() -> u64 {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario: default_scenario(),
            seed: default_seed(),
            out_dir: default_out_dir(),
            flows: Vec::new(),
            link: LinkConfig::default(),
            sim: SimConfig::default(),
            detectors: DetectorConfig::default(),
            oracle: OracleConfig::default(),
            pool: PoolConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; unreadable files and bad contents are both
    /// configuration errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.link.validate()?;
        self.sim.validate()?;
        self.detectors.validate()?;
        self.oracle.validate()?;
        self.pool.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.task != self.train.task() {
            return Err(Error::config("model.task does not match train.mode and train.sl_target"));
        }
        if !(self.eval.switch_interval_s > 0.0) || !(self.eval.settle_s >= 0.0) {
            return Err(Error::config("eval.switch_interval_s must be positive and eval.settle_s non-negative"));
        }
        // Flow ids, start times and schedules are checked by the simulator.
        crate::simnet::Simulator::new(self.link.clone(), self.flows(), self.sim.clone(), self.seed)?;
        Ok(())
    }

    pub fn flows(&self) -> Vec<FlowConfig> {
        if self.flows.is_empty() { self.scenario.flows() } else { self.flows.clone() }
    }
}
