//! Scenario configuration.

use serde::{Deserialize, Serialize};
use twinforge_core::bridges::RouteMode;
use twinforge_core::frame::SyncPolicy;
use twinforge_core::platform::Service;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which stages a message crosses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    /// gateway -> registry -> bus -> timeseries
    #[default]
    Core,
    /// gateway -> forwarder -> model -> route -> registry -> timeseries
    Ml,
    /// Both of the above from the same telemetry.
    Full,
}

impl Pipeline {
    pub fn core(self) -> bool {
        matches!(self, Pipeline::Core | Pipeline::Full)
    }

    pub fn ml(self) -> bool {
        matches!(self, Pipeline::Ml | Pipeline::Full)
    }
}

/// Kill `target` at `kill_at_s` into the run and restart it `down_s` later.
/// No target means a fault-free baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    #[serde(default)]
    pub target: Option<Service>,
    #[serde(default = "default_kill_at")]
    pub kill_at_s: f64,
    #[serde(default = "default_down")]
    pub down_s: f64,
}

fn default_kill_at() -> f64 {
    1.0
}

fn default_down() -> f64 {
    1.5
}

impl FaultSpec {
    pub fn kill(target: Service) -> Self {
        FaultSpec { target: Some(target), kill_at_s: default_kill_at(), down_s: default_down() }
    }

    pub fn baseline() -> Self {
        FaultSpec { target: None, kill_at_s: default_kill_at(), down_s: default_down() }
    }

    pub fn label(&self) -> &'static str {
        self.target.map(Service::as_str).unwrap_or("none")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Simulated sensors, each a device and a twin.
    #[serde(default = "one")]
    pub sensors: usize,
    /// Concurrent senders; client `i` feeds sensor `i % sensors`.
    #[serde(default = "one")]
    pub clients: usize,
    /// Messages per client.
    #[serde(default = "default_messages")]
    pub messages: usize,
    /// Pause between a client's sends; 0 sends back to back.
    #[serde(default)]
    pub period_s: f64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default)]
    pub route_mode: RouteMode,
    /// Weight of the linear model `y = w x` used by the ML pipeline.
    #[serde(default = "default_weight")]
    pub model_weight: f64,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    /// Run once per client count instead of once with `clients`.
    #[serde(default)]
    pub client_sweep: Vec<usize>,
    #[serde(default = "default_drain")]
    pub drain_timeout_s: f64,
    #[serde(default)]
    pub sync: SyncPolicy,
}

fn one() -> usize {
    1
}

fn default_messages() -> usize {
    100
}

fn default_repetitions() -> usize {
    10
}

fn default_weight() -> f64 {
    2.0
}

fn default_drain() -> f64 {
    60.0
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        if self.sensors == 0 {
            return bad("sensors must be at least 1");
        }
        if self.clients == 0 || self.client_sweep.contains(&0) {
            return bad("clients must be at least 1");
        }
        if self.messages == 0 || self.repetitions == 0 {
            return bad("messages and repetitions must be at least 1");
        }
        if !(self.period_s.is_finite() && self.period_s >= 0.0) {
            return bad("period_s must be a non-negative number");
        }
        if !(self.model_weight.is_finite() && self.model_weight != 0.0) {
            return bad("model_weight must be a non-zero number");
        }
        if !(self.drain_timeout_s.is_finite() && self.drain_timeout_s > 0.0) {
            return bad("drain_timeout_s must be positive");
        }
        for f in &self.faults {
            if !(f.kill_at_s.is_finite() && f.kill_at_s >= 0.0 && f.down_s.is_finite() && f.down_s >= 0.0) {
                return bad("fault times must be non-negative numbers");
            }
        }
        Ok(())
    }

    /// The config of one sweep point.
    pub fn with_clients(&self, clients: usize) -> Self {
        ScenarioConfig { clients, client_sweep: Vec::new(), ..self.clone() }
    }
}
