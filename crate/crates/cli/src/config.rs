//! Scenario files: a network reference plus synthesis, simulation and
//! contingency settings, all in one TOML document.

use std::path::{Path, PathBuf};

use netcbf::grid::{GridNetwork, LegacyGains};
use netcbf::scenario::{ContingencyConfig, SafetyConfig, SineDisturbance};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Network file, relative to the scenario file.
    pub network: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the network's frequency bound.
    pub omega_max: Option<f64>,
    #[serde(default)]
    pub bus: Vec<BusOverride>,
    #[serde(default)]
    pub safety: SafetyConfig,
    #[serde(default)]
    pub legacy: LegacyGains,
    #[serde(default)]
    pub disturbance: SineDisturbance,
    #[serde(default)]
    pub simulate: SimulateConfig,
    /// Contingency event and tube MPC settings; tube synthesis and the
    /// disturbance default to the `safety` and `disturbance` tables.
    pub contingency: Option<toml::Table>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusOverride {
    pub id: usize,
    pub u_max: Option<f64>,
    pub d_max: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub t_end: f64,
    pub supervised: bool,
    /// Extra STL formulas over `dtheta_<id>` and `omega_<id>`, checked at t = 0.
    pub formulas: Vec<String>,
    /// States sampled per bus when certifying the supervisors.
    pub certify_samples: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { t_end: 60.0, supervised: true, formulas: Vec::new(), certify_samples: 200 }
    }
}

/// A parsed scenario with its network loaded and overrides applied.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub net: GridNetwork,
}

impl Scenario {
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut config: ScenarioConfig =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let net_path = base.join(&config.network);
        if !net_path.is_file() {
            return Err(CliError::config(format!("network file {} not found", net_path.display())));
        }
        let mut net = GridNetwork::load(&net_path)?;
        if let Some(w) = config.omega_max {
            net.omega_max = w;
        }
        if !(net.omega_max > 0.0) {
            return Err(CliError::config(format!("omega_max must be positive, got {}", net.omega_max)));
        }
        for o in &config.bus {
            let bus = net
                .buses
                .iter_mut()
                .find(|b| b.id == o.id)
                .ok_or_else(|| CliError::config(format!("override for unknown bus {}", o.id)))?;
            if let Some(u) = o.u_max {
                bus.u_max = u;
            }
            if let Some(d) = o.d_max {
                bus.d_max = d;
            }
        }
        net.validate()?;
        if !(config.safety.ts > 0.0) || !(config.simulate.t_end >= 0.0) {
            return Err(CliError::config("sample time must be positive and t_end nonnegative"));
        }
        Ok(Self { config, net })
    }

    pub fn contingency(&self) -> Result<Option<ContingencyConfig>, CliError> {
        let Some(table) = &self.config.contingency else { return Ok(None) };
        let mut table = table.clone();
        if !table.contains_key("tube") {
            table.insert("tube".into(), to_value(&self.config.safety)?);
        }
        if !table.contains_key("disturbance") {
            table.insert("disturbance".into(), to_value(&self.config.disturbance)?);
        }
        let cfg: ContingencyConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::config(format!("contingency: {e}")))?;
        Ok(Some(cfg))
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<toml::Value, CliError> {
    toml::Value::try_from(v).map_err(|e| CliError::config(format!("contingency defaults: {e}")))
}
