//! Run configuration file. Secrets never live here: the service credential is read from the
//! environment variable named by `services.credential_env`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::PlantParams;
use crate::environment::LabelVocabulary;
use crate::planner::LmSettings;
use crate::scenario::{PlantSpec, Scenario, ScenarioDoc};
use crate::simulator::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Services {
    pub lm_endpoint: Option<String>,
    pub encoder_endpoint: Option<String>,
    pub timeout_s: f64,
    pub credential_env: String,
}

impl Default for Services {
    fn default() -> Self {
        Self {
            lm_endpoint: None,
            encoder_endpoint: None,
            timeout_s: 30.0,
            credential_env: "DRIVE_MPC_API_KEY".to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sim: SimConfig,
    /// Plant values for scenarios whose files leave them out.
    pub plant: Option<PlantParams>,
    pub vocabulary: LabelVocabulary,
    pub services: Services,
    pub lm: LmSettings,
    /// Memory file; the built-in grouped table when absent.
    pub memory: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: Config = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(p) = &self.plant {
            p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if !(self.services.timeout_s > 0.0) {
            return Err(ConfigError::Invalid("services.timeout_s must be positive".into()));
        }
        Ok(())
    }

    /// Fills plant fields the scenario file leaves out with the configured plant.
    pub fn apply_plant(&self, scenario: Scenario) -> Scenario {
        let Some(p) = self.plant else { return scenario };
        let doc = scenario.doc();
        let spec = doc.plant.unwrap_or_default();
        let filled = PlantSpec {
            m: spec.m.or(Some(p.m)),
            drag_coeff: spec.drag_coeff.or(Some(p.drag_coeff)),
            d_m: spec.d_m.or(Some(p.d_m)),
            tau_a: spec.tau_a.or(Some(p.tau_a)),
            length: spec.length,
        };
        Scenario::from_doc(ScenarioDoc {
            plant: Some(filled),
            ..doc.clone()
        })
        .unwrap_or(scenario)
    }
}
