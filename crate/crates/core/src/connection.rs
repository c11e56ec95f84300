//! Telemetry connections: apply a tenant's telemetry to the registry.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::bus::{run_group, Bus, Headers, Record, Step};
use crate::frame::SyncPolicy;
use crate::gateway::telemetry_topic;
use crate::kv::{KvError, KvStore};
use crate::metrics::Metrics;
use crate::model::{Envelope, DEVICE_HEADER, TIMESTAMP_HEADER};
use crate::registry::{Registry, RegistryError};
use crate::worker::{StopFlag, Worker};

pub const GATEWAY_SUBJECT: &str = "gateway";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConnectionError {
    #[error("connection `{0}` already exists")]
    Duplicate(String),
    #[error("connection `{0}` not found")]
    NotFound(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("connections unavailable: {0}")]
    Unavailable(String),
}

impl From<KvError> for ConnectionError {
    fn from(e: KvError) -> Self {
        ConnectionError::Unavailable(e.to_string())
    }
}

pub type Result<T, E = ConnectionError> = std::result::Result<T, E>;

fn yes() -> bool {
    true
}

fn gateway_subject() -> String {
    GATEWAY_SUBJECT.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionConfig {
    pub tenant_id: String,
    #[serde(default = "gateway_subject")]
    pub subject: String,
    #[serde(default = "yes")]
    pub active: bool,
}

impl ConnectionConfig {
    pub fn new(tenant_id: &str) -> Self {
        ConnectionConfig { tenant_id: tenant_id.to_string(), subject: gateway_subject(), active: true }
    }

    pub fn group(&self) -> String {
        format!("connection-{}", self.tenant_id)
    }

    pub fn dead_letter_topic(&self) -> String {
        format!("connection/{}/dead-letter", self.tenant_id)
    }
}

/// Why a telemetry record was not applied.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Rejection {
    #[error("not an envelope: {0}")]
    Malformed(String),
    #[error("device `{device}` may not address `{thing}`")]
    WrongThing { device: String, thing: String },
    #[error("registry rejected: {0}")]
    Registry(RegistryError),
}

/// The envelope to apply for a telemetry record. The envelope's thing must
/// be the sending device; the bus `x-ts` is carried over when the envelope
/// has none.
pub fn command_for(rec: &Record) -> Result<Envelope, Rejection> {
    let mut env = Envelope::from_bytes(&rec.payload).map_err(|e| Rejection::Malformed(e.to_string()))?;
    let thing = env.topic_path().map_err(|e| Rejection::Malformed(e.to_string()))?.thing;
    let device = rec.headers.get(DEVICE_HEADER).cloned().unwrap_or_default();
    if device != thing.as_str() {
        return Err(Rejection::WrongThing { device, thing: thing.to_string() });
    }
    if let Some(ts) = rec.headers.get(TIMESTAMP_HEADER) {
        env.headers.entry(TIMESTAMP_HEADER.to_string()).or_insert_with(|| ts.clone());
    }
    Ok(env)
}

/// Applies one record. `Err(None)` means the registry is down.
pub fn apply(registry: &Registry, subject: &str, rec: &Record) -> Result<(), Option<Rejection>> {
    let env = command_for(rec).map_err(Some)?;
    let thing = env.topic_path().expect("checked").thing;
    match registry.update(&thing, &env, subject) {
        Ok(_) => Ok(()),
        Err(RegistryError::Unavailable(_)) => Err(None),
        Err(e) => Err(Some(Rejection::Registry(e))),
    }
}

fn connection_loop(bus: Arc<Bus>, registry: Arc<Registry>, metrics: Arc<Metrics>, cfg: ConnectionConfig, stop: StopFlag) {
    run_group(&bus, &telemetry_topic(&cfg.tenant_id), &cfg.group(), &stop, |rec| {
        match apply(&registry, &cfg.subject, rec) {
            Ok(()) => Step::Done,
            Err(None) => Step::Retry,
            Err(Some(reason)) => {
                let mut headers: Headers = rec.headers.clone();
                headers.insert("x-reason".into(), reason.to_string());
                match bus.publish(&cfg.dead_letter_topic(), &headers, &rec.payload) {
                    Ok(_) => {
                        Metrics::inc(&metrics.dead_lettered);
                        Step::Done
                    }
                    Err(_) => Step::Retry,
                }
            }
        }
    });
}

struct Running {
    config: ConnectionConfig,
    worker: Option<Worker>,
}

/// Persisted telemetry connections, one worker per active tenant.
pub struct Connections {
    kv: KvStore,
    bus: Arc<Bus>,
    registry: Arc<Registry>,
    metrics: Arc<Metrics>,
    all: Mutex<BTreeMap<String, Running>>,
}

impl std::fmt::Debug for Connections {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connections").field("store", &self.kv.path()).finish()
    }
}

fn key(tenant: &str) -> String {
    format!("connection/{tenant}")
}

impl Connections {
    pub fn open(
        path: impl AsRef<Path>,
        sync: SyncPolicy,
        bus: Arc<Bus>,
        registry: Arc<Registry>,
        metrics: Arc<Metrics>,
    ) -> Result<Arc<Self>> {
        let kv = KvStore::open(path, sync)?;
        let all = kv
            .scan_as::<ConnectionConfig>("connection/")?
            .into_iter()
            .map(|(_, c)| (c.tenant_id.clone(), Running { config: c, worker: None }))
            .collect();
        Ok(Arc::new(Connections { kv, bus, registry, metrics, all: Mutex::new(all) }))
    }

    pub fn start(&self) {
        for r in self.all.lock().values_mut() {
            self.sync(r);
        }
    }

    pub fn shutdown(&self) {
        let stopped: Vec<Worker> = self.all.lock().values_mut().filter_map(|r| r.worker.take()).collect();
        drop(stopped);
    }

    fn sync(&self, r: &mut Running) {
        if r.config.active && r.worker.is_none() {
            let (bus, reg, metrics, cfg) =
                (self.bus.clone(), self.registry.clone(), self.metrics.clone(), r.config.clone());
            r.worker = Some(Worker::spawn(format!("connection-{}", cfg.tenant_id), move |stop| {
                connection_loop(bus, reg, metrics, cfg, stop)
            }));
        } else if !r.config.active {
            r.worker = None;
        }
    }

    pub fn create(&self, cfg: ConnectionConfig) -> Result<ConnectionConfig> {
        if cfg.tenant_id.is_empty() || cfg.subject.is_empty() {
            return Err(ConnectionError::Invalid("tenant_id and subject are required".into()));
        }
        let mut all = self.all.lock();
        if all.contains_key(&cfg.tenant_id) {
            return Err(ConnectionError::Duplicate(cfg.tenant_id));
        }
        self.kv.put(&key(&cfg.tenant_id), &cfg)?;
        let mut r = Running { config: cfg.clone(), worker: None };
        self.sync(&mut r);
        all.insert(cfg.tenant_id.clone(), r);
        Ok(cfg)
    }

    pub fn set_active(&self, tenant: &str, active: bool) -> Result<ConnectionConfig> {
        let mut all = self.all.lock();
        let r = all.get_mut(tenant).ok_or_else(|| ConnectionError::NotFound(tenant.to_string()))?;
        let mut cfg = r.config.clone();
        cfg.active = active;
        self.kv.put(&key(tenant), &cfg)?;
        r.config = cfg.clone();
        self.sync(r);
        Ok(cfg)
    }

    pub fn get(&self, tenant: &str) -> Result<ConnectionConfig> {
        self.all
            .lock()
            .get(tenant)
            .map(|r| r.config.clone())
            .ok_or_else(|| ConnectionError::NotFound(tenant.to_string()))
    }

    pub fn list(&self) -> Vec<ConnectionConfig> {
        self.all.lock().values().map(|r| r.config.clone()).collect()
    }

    pub fn delete(&self, tenant: &str) -> Result<()> {
        let removed = {
            let mut all = self.all.lock();
            let r = all.remove(tenant).ok_or_else(|| ConnectionError::NotFound(tenant.to_string()))?;
            self.kv.delete(&key(tenant))?;
            r
        };
        drop(removed);
        Ok(())
    }
}

impl Drop for Connections {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_thing_id, Timestamp};
    use serde_json::json;

    fn rec(device: &str, env: &Envelope) -> Record {
        Record {
            offset: 0,
            timestamp: Timestamp(0),
            headers: Headers::from([
                (DEVICE_HEADER.to_string(), device.to_string()),
                (TIMESTAMP_HEADER.to_string(), "2024-01-01T00:00:00Z".to_string()),
            ]),
            payload: env.to_bytes(),
        }
    }

    #[test]
    fn device_must_match_thing() {
        let t = parse_thing_id("plant:pump").unwrap();
        let env = Envelope::modify(&t, "/features/flow/properties/value", json!(1.0));
        let cmd = command_for(&rec("plant:pump", &env)).unwrap();
        assert_eq!(cmd.headers[TIMESTAMP_HEADER], "2024-01-01T00:00:00Z");
        assert!(matches!(command_for(&rec("plant:other", &env)), Err(Rejection::WrongThing { .. })));
        let own = env.with_header(TIMESTAMP_HEADER, "2020-01-01T00:00:00Z");
        assert_eq!(command_for(&rec("plant:pump", &own)).unwrap().headers[TIMESTAMP_HEADER], "2020-01-01T00:00:00Z");
    }
}
