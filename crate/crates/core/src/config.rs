//! Engine configuration: one TOML document with six sections —
//! `thresholds`, `budget`, `adapters`, `backbone`, `experts`, and
//! `scenario`. Key names are frozen by a golden-file test; the full
//! schema is documented in `docs/config-schema.md`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, AdapterId, AdapterScheduler, AdapterSpec};
use crate::evaluator::EvalThresholds;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Repair budget knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    /// Maximum suspensions handled before the fallback fires.
    pub omega_max: u32,
    /// Caps replacement subgraphs at the size of the removed closure
    /// plus this many extra vertices, keeping the termination bound
    /// meaningful.
    pub replacement_size_cap: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            omega_max: 3,
            replacement_size_cap: 2,
        }
    }
}

/// Geometry block for one module's adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterBlock {
    pub rank: u32,
    pub alpha: f64,
    pub dropout: f64,
    pub bytes_per_param: u64,
    pub dims: Vec<(u64, u64)>,
    /// Overrides the engine-level hot-load cost for this module.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hot_load_override: Option<f64>,
}

impl Default for AdapterBlock {
    fn default() -> Self {
        AdapterBlock {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            bytes_per_param: 2,
            dims: vec![(4096, 4096); 32],
            hot_load_override: None,
        }
    }
}

impl AdapterBlock {
    pub fn to_spec(&self, module: AdapterId) -> Result<AdapterSpec, AdapterError> {
        AdapterSpec::new(
            module,
            self.rank,
            self.alpha,
            self.dropout,
            self.dims.clone(),
            self.bytes_per_param,
        )
    }
}

/// Adapter registry config: engine-level hot-load cost plus a per-module
/// geometry block.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptersConfig {
    pub hot_load_seconds: HotLoad,
    pub plan: AdapterBlock,
    pub rag: AdapterBlock,
    pub logic: AdapterBlock,
    pub expr: AdapterBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HotLoad(pub f64);

impl Default for HotLoad {
    fn default() -> Self {
        HotLoad(0.8)
    }
}

impl AdaptersConfig {
    pub fn blocks(&self) -> BTreeMap<AdapterId, &AdapterBlock> {
        BTreeMap::from([
            (AdapterId::new("plan"), &self.plan),
            (AdapterId::new("rag"), &self.rag),
            (AdapterId::new("logic"), &self.logic),
            (AdapterId::new("expr"), &self.expr),
        ])
    }
}

/// The shared backbone: parameter count drives compute estimates, memory
/// bytes drive the footprint model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub name: String,
    pub parameter_count: u64,
    pub memory_bytes: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            name: "backbone-8b".into(),
            parameter_count: 8_000_000_000,
            memory_bytes: 16_500_000_000,
        }
    }
}

/// Which expert pool the run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertMode {
    Scripted,
    Fault,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertsConfig {
    pub mode: ExpertMode,
    /// Seed for stochastic experts and planners.
    pub seed: u64,
    /// Fault mode: probability a call fails.
    pub failure_rate: f64,
    /// Fault mode: probability a success lands below the usual floor.
    pub low_confidence_prob: f64,
    /// Remote mode: endpoint base URL.
    pub endpoint: Option<String>,
    /// Remote mode: transport retries before giving up.
    pub retries: u32,
}

impl Default for ExpertsConfig {
    fn default() -> Self {
        ExpertsConfig {
            mode: ExpertMode::Scripted,
            seed: 0,
            failure_rate: 0.0,
            low_confidence_prob: 0.1,
            endpoint: None,
            retries: 2,
        }
    }
}

/// Scenario file binding for scripted runs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub path: Option<PathBuf>,
}

/// The complete engine configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub thresholds: EvalThresholds,
    pub budget: BudgetConfig,
    pub adapters: AdaptersConfig,
    pub backbone: BackboneConfig,
    pub experts: ExpertsConfig,
    pub scenario: ScenarioConfig,
}

impl EngineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: EngineConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.thresholds
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.budget.omega_max == 0 {
            return Err(ConfigError::Invalid("budget.omega_max must be >= 1".into()));
        }
        if self.backbone.parameter_count == 0 {
            return Err(ConfigError::Invalid(
                "backbone.parameter_count must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.experts.failure_rate) {
            return Err(ConfigError::Invalid(
                "experts.failure_rate must lie in [0, 1]".into(),
            ));
        }
        if self.experts.mode == ExpertMode::Remote && self.experts.endpoint.is_none() {
            return Err(ConfigError::Invalid(
                "experts.endpoint is required in remote mode".into(),
            ));
        }
        for (module, block) in self.adapters.blocks() {
            block
                .to_spec(module)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// Builds the adapter scheduler with the four engine modules
    /// registered.
    pub fn scheduler(&self) -> Result<AdapterScheduler, ConfigError> {
        let mut scheduler = AdapterScheduler::new(
            self.backbone.memory_bytes,
            self.adapters.hot_load_seconds.0,
        );
        for (module, block) in self.adapters.blocks() {
            let spec = block
                .to_spec(module.clone())
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            scheduler.register(&spec);
            if let Some(seconds) = block.hot_load_override {
                scheduler.set_cost_override(module, seconds);
            }
        }
        Ok(scheduler)
    }
}
