//! Synthetic device data. Each signal is a sine wave with uniform noise,
//! sent through the gateway as the raw payload `{"value": v, "time": t}` so
//! the tenant's payload mapper applies.

use std::sync::Arc;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::json;

use twinforge_core::gateway::{Credentials, Gateway};
use twinforge_core::model::Timestamp;
use twinforge_core::worker::Worker;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Signal {
    pub device: String,
    pub username: String,
    pub password: String,
    pub mean: f64,
    #[serde(default)]
    pub amplitude: f64,
    /// Period of the sine wave.
    #[serde(default = "default_wave")]
    pub wave_s: f64,
    #[serde(default)]
    pub noise: f64,
}

fn default_wave() -> f64 {
    600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub tenant: String,
    /// Pause between rounds; every signal sends once per round.
    #[serde(default = "default_period")]
    pub period_s: f64,
    #[serde(default)]
    pub seed: u64,
    pub signals: Vec<Signal>,
}

fn default_period() -> f64 {
    1.0
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.period_s.is_finite() && self.period_s > 0.0) {
            return Err("generator period_s must be positive".into());
        }
        for s in &self.signals {
            if !(s.wave_s.is_finite() && s.wave_s > 0.0) {
                return Err(format!("signal `{}`: wave_s must be positive", s.device));
            }
            if ![s.mean, s.amplitude, s.noise].iter().all(|v| v.is_finite()) {
                return Err(format!("signal `{}`: numbers must be finite", s.device));
            }
        }
        Ok(())
    }
}

pub fn sample(s: &Signal, t_s: f64, rng: &mut impl Rng) -> f64 {
    let wave = s.amplitude * (2.0 * std::f64::consts::PI * t_s / s.wave_s).sin();
    let noise = if s.noise > 0.0 { rng.random_range(-s.noise..=s.noise) } else { 0.0 };
    s.mean + wave + noise
}

/// Starts sending; stops when the returned worker is dropped.
pub fn start(cfg: GeneratorConfig, gateway: Arc<Gateway>) -> Worker {
    Worker::spawn("generator", move |stop| {
        let mut rng = StdRng::seed_from_u64(cfg.seed);
        let start = Timestamp::now();
        let period = Duration::from_secs_f64(cfg.period_s);
        while !stop.is_set() {
            let now = Timestamp::now();
            let t_s = (now.0 - start.0) as f64 / 1e9;
            for s in &cfg.signals {
                let v = sample(s, t_s, &mut rng);
                let payload = json!({ "value": v, "time": now.to_rfc3339() });
                let creds = Credentials { username: s.username.clone(), password: s.password.clone() };
                if let Err(e) = gateway.ingest(&cfg.tenant, &s.device, &creds, payload.to_string().as_bytes()) {
                    tracing::debug!(device = %s.device, error = %e, "generator send failed");
                }
            }
            stop.sleep(period);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_signal_follows_the_wave() {
        let s = Signal {
            device: "d".into(),
            username: "u".into(),
            password: "p".into(),
            mean: 10.0,
            amplitude: 2.0,
            wave_s: 4.0,
            noise: 0.0,
        };
        let mut rng = StdRng::seed_from_u64(0);
        assert!((sample(&s, 0.0, &mut rng) - 10.0).abs() < 1e-12);
        assert!((sample(&s, 1.0, &mut rng) - 12.0).abs() < 1e-12);
        assert!((sample(&s, 3.0, &mut rng) - 8.0).abs() < 1e-12);
    }
}
