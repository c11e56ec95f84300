//! Bridges between the twin side and the model runtime.
//!
//! A forwarder turns device telemetry into encoded model inputs. A
//! prediction route turns model outputs into protocol envelopes via a
//! template and enqueues them; its route consumer applies them to the
//! registry, either in place or on a `<name>_predicted` copy.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::bus::{run_group, Bus, BusError, Headers, Record, Step};
use crate::codec::{self, Format};
use crate::frame::SyncPolicy;
use crate::gateway::telemetry_topic;
use crate::kv::{KvError, KvStore};
use crate::metrics::Metrics;
use crate::mlrt::parse_output;
use crate::model::{
    validate_envelope, Envelope, ThingId, Timestamp, DEVICE_HEADER, MANAGED_ATTRIBUTES,
    TIMESTAMP_HEADER,
};
use crate::registry::{Registry, RegistryError};
use crate::watchdog::{absorb_leaves, input_values, telemetry_leaves, validate_specs, ValueSpec};
use crate::worker::{StopFlag, Worker};

pub const ROUTE_SUBJECT: &str = "ml-bridge";
pub const PREDICTED_SUFFIX: &str = "_predicted";
pub const MODE_HEADER: &str = "x-route-mode";
pub const HORIZON_HEADER: &str = "x-horizon-s";
pub const ROUTE_HEADER: &str = "x-route";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BridgeError {
    #[error("`{0}` already exists")]
    Duplicate(String),
    #[error("`{0}` not found")]
    NotFound(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("placeholder {{{index}}} out of range for {len} outputs")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("substituted message is invalid: {0}")]
    InvalidResult(String),
    #[error("bridges unavailable: {0}")]
    Unavailable(String),
}

impl From<KvError> for BridgeError {
    fn from(e: KvError) -> Self {
        BridgeError::Unavailable(e.to_string())
    }
}

pub type Result<T, E = BridgeError> = std::result::Result<T, E>;

fn yes() -> bool {
    true
}

// ---------------------------------------------------------------------------
// Template substitution

/// Replaces `{i}` placeholders in string values of `template` with
/// `outputs[i]`. A string that is exactly one placeholder becomes a JSON
/// number; placeholders inside longer strings are replaced textually. Object
/// keys are left alone.
pub fn substitute_value(template: &Value, outputs: &[f64]) -> Result<Value> {
    Ok(match template {
        Value::String(s) => substitute_str(s, outputs)?,
        Value::Array(a) => Value::Array(a.iter().map(|v| substitute_value(v, outputs)).collect::<Result<_>>()?),
        Value::Object(o) => Value::Object(
            o.iter()
                .map(|(k, v)| Ok((k.clone(), substitute_value(v, outputs)?)))
                .collect::<Result<Map<_, _>>>()?,
        ),
        other => other.clone(),
    })
}

fn output(outputs: &[f64], index: usize) -> Result<f64> {
    let v = *outputs.get(index).ok_or(BridgeError::IndexOutOfRange { index, len: outputs.len() })?;
    if !v.is_finite() {
        return Err(BridgeError::InvalidResult(format!("output {index} is not finite")));
    }
    Ok(v)
}

/// Index of a `{digits}` placeholder starting at byte `i`, and its length.
fn placeholder_at(s: &str, i: usize) -> Option<(usize, usize)> {
    let rest = &s[i..];
    let body = rest.strip_prefix('{')?;
    let digits = body.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || body.as_bytes().get(digits) != Some(&b'}') {
        return None;
    }
    Some((body[..digits].parse().ok()?, digits + 2))
}

fn substitute_str(s: &str, outputs: &[f64]) -> Result<Value> {
    if let Some((index, len)) = placeholder_at(s, 0) {
        if len == s.len() {
            return Ok(json!(output(outputs, index)?));
        }
    }
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < s.len() {
        if let Some((index, len)) = placeholder_at(s, i) {
            out.push_str(&output(outputs, index)?.to_string());
            i += len;
        } else {
            let c = s[i..].chars().next().expect("char boundary");
            out.push(c);
            i += c.len_utf8();
        }
    }
    Ok(Value::String(out))
}

/// Substitutes `outputs` into `template` and checks the result is a valid
/// envelope.
pub fn substitute(template: &Value, outputs: &[f64]) -> Result<Envelope> {
    let v = substitute_value(template, outputs)?;
    let env: Envelope = serde_json::from_value(v).map_err(|e| BridgeError::InvalidResult(e.to_string()))?;
    validate_envelope(&env).map_err(|e| BridgeError::InvalidResult(e.to_string()))?;
    Ok(env)
}

// ---------------------------------------------------------------------------
// Forwarders

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwarderDevice {
    pub device_id: String,
    pub ml_input_topic: String,
    pub required_values: Vec<ValueSpec>,
    #[serde(default = "yes")]
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwarderConfig {
    pub tenant_id: String,
    #[serde(default = "yes")]
    pub active: bool,
    #[serde(default)]
    pub devices: Vec<ForwarderDevice>,
}

impl ForwarderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tenant_id.is_empty() {
            return Err(BridgeError::Invalid("tenant_id is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.devices {
            if d.device_id.is_empty() || d.ml_input_topic.is_empty() {
                return Err(BridgeError::Invalid("device_id and ml_input_topic are required".into()));
            }
            if !seen.insert(d.device_id.as_str()) {
                return Err(BridgeError::Duplicate(d.device_id.clone()));
            }
            if d.required_values.is_empty() {
                return Err(BridgeError::Invalid(format!("device `{}` has no required values", d.device_id)));
            }
            validate_specs(&d.required_values).map_err(|e| BridgeError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn group(&self) -> String {
        format!("forwarder-{}", self.tenant_id)
    }

    pub fn dead_letter_topic(&self) -> String {
        format!("forwarder/{}/dead-letter", self.tenant_id)
    }
}

/// Message time: the `x-ts` header if present, else the bus append time.
pub fn record_time(rec: &Record) -> Timestamp {
    rec.headers
        .get(TIMESTAMP_HEADER)
        .and_then(|t| Timestamp::parse(t).ok())
        .unwrap_or(rec.timestamp)
}

/// Encodes the model input for one telemetry record using only the values
/// the record itself carries.
pub fn forward_input(device: &ForwarderDevice, rec: &Record) -> Result<Vec<u8>> {
    let leaves = telemetry_leaves(rec).ok_or_else(|| BridgeError::Invalid("telemetry is not an envelope".into()))?;
    let mut specs: Vec<ValueSpec> = device
        .required_values
        .iter()
        .map(|s| ValueSpec { last_value: None, ..s.clone() })
        .collect();
    absorb_leaves(&mut specs, &leaves);
    let values = input_values(&specs, record_time(rec)).map_err(|e| BridgeError::Invalid(e.to_string()))?;
    let formats: Vec<Format> = specs.iter().map(|s| s.format).collect();
    codec::encode(&formats, &values).map_err(|e| BridgeError::Invalid(e.to_string()))
}

fn forward_loop(bus: Arc<Bus>, metrics: Arc<Metrics>, cfg: ForwarderConfig, stop: StopFlag) {
    let devices: BTreeMap<&str, &ForwarderDevice> =
        cfg.devices.iter().filter(|d| d.active).map(|d| (d.device_id.as_str(), d)).collect();
    run_group(&bus, &telemetry_topic(&cfg.tenant_id), &cfg.group(), &stop, |rec| {
        let Some(device) = rec.headers.get(DEVICE_HEADER).and_then(|d| devices.get(d.as_str())) else {
            return Step::Done;
        };
        let mut headers = rec.headers.clone();
        headers.insert("x-source".into(), "forwarder".into());
        let sent = match forward_input(device, rec) {
            Ok(bytes) => bus.publish(&device.ml_input_topic, &headers, &bytes).map(|_| Metrics::inc(&metrics.forwarded)),
            Err(e) => {
                headers.insert("x-reason".into(), e.to_string());
                bus.publish(&cfg.dead_letter_topic(), &headers, &rec.payload)
                    .map(|_| Metrics::inc(&metrics.dead_lettered))
            }
        };
        if sent.is_ok() { Step::Done } else { Step::Retry }
    });
}

// ---------------------------------------------------------------------------
// Prediction routes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteMode {
    #[default]
    Update,
    FutureCopy,
}

impl RouteMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RouteMode::Update => "update",
            RouteMode::FutureCopy => "future_copy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRoute {
    pub route_id: String,
    pub source_topic: String,
    pub target_queue: String,
    #[serde(default = "yes")]
    pub active: bool,
    pub ditto_message: Value,
    #[serde(default)]
    pub mode: RouteMode,
    #[serde(default)]
    pub horizon_s: Option<f64>,
}

impl PredictionRoute {
    pub fn validate(&self) -> Result<()> {
        if self.route_id.is_empty() || self.source_topic.is_empty() || self.target_queue.is_empty() {
            return Err(BridgeError::Invalid("route_id, source_topic and target_queue are required".into()));
        }
        if !self.ditto_message.is_object() {
            return Err(BridgeError::Invalid("ditto_message must be an object".into()));
        }
        if let Some(h) = self.horizon_s {
            if !h.is_finite() || h < 0.0 {
                return Err(BridgeError::Invalid("horizon_s must be a non-negative number".into()));
            }
        }
        Ok(())
    }

    pub fn group(&self) -> String {
        format!("route-{}", self.route_id)
    }

    pub fn dead_letter_topic(&self) -> String {
        format!("route/{}/dead-letter", self.route_id)
    }

    /// Queue headers for an envelope produced from `rec`.
    pub fn headers(&self, rec: &Record) -> Headers {
        let mut h = Headers::new();
        h.insert(ROUTE_HEADER.into(), self.route_id.clone());
        h.insert(MODE_HEADER.into(), self.mode.as_str().into());
        h.insert(HORIZON_HEADER.into(), self.horizon_s.unwrap_or(0.0).to_string());
        h.insert(TIMESTAMP_HEADER.into(), record_time(rec).to_rfc3339());
        h
    }
}

fn route_loop(bus: Arc<Bus>, metrics: Arc<Metrics>, route: PredictionRoute, stop: StopFlag) {
    run_group(&bus, &route.source_topic, &route.group(), &stop, |rec| {
        let result = parse_output(&rec.payload)
            .ok_or_else(|| BridgeError::InvalidResult("model output is not a number array".into()))
            .and_then(|outputs| substitute(&route.ditto_message, &outputs));
        let sent = match result {
            Ok(mut env) => {
                let headers = route.headers(rec);
                env.headers.insert(TIMESTAMP_HEADER.into(), headers[TIMESTAMP_HEADER].clone());
                bus.enqueue(&route.target_queue, &headers, &env.to_bytes())
                    .map(|_| Metrics::inc(&metrics.route_enqueued))
            }
            Err(e) => {
                let mut headers = rec.headers.clone();
                headers.insert("x-reason".into(), e.to_string());
                bus.publish(&route.dead_letter_topic(), &headers, &rec.payload)
                    .map(|_| Metrics::inc(&metrics.dead_lettered))
            }
        };
        if sent.is_ok() { Step::Done } else { Step::Retry }
    });
}

/// Applies `env` to a `<name>_predicted` copy of its target, creating the
/// copy from the source twin on first use. Returns the copy id.
pub fn copy_future(registry: &Registry, env: &Envelope, horizon_s: f64, subject: &str) -> Result<ThingId, RegistryError> {
    let source = env.topic_path()?.thing;
    let copy = source.with_suffix(PREDICTED_SUFFIX)?;
    if let Err(RegistryError::NotFound(_)) = registry.get(&copy) {
        let src = registry.get(&source)?;
        let mut attributes = src.attributes.clone();
        for k in MANAGED_ATTRIBUTES {
            attributes.remove(k);
        }
        attributes.insert("predicted_horizon_s".into(), json!(horizon_s));
        attributes.insert("predicted_from".into(), json!(source.as_str()));
        match registry.create_twin(copy.clone(), &src.policy_id, attributes, src.features.clone()) {
            Ok(_) | Err(RegistryError::DuplicateId(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let mut redirected = env.clone();
    let mut topic = env.topic_path()?;
    topic.thing = copy.clone();
    redirected.topic = topic.render();
    registry.update(&copy, &redirected, subject)?;
    Ok(copy)
}

/// Applies one queued envelope according to its headers.
pub fn apply_routed(registry: &Registry, headers: &Headers, payload: &[u8]) -> Result<ThingId, RegistryError> {
    let env = Envelope::from_bytes(payload)?;
    let thing = env.topic_path()?.thing;
    match headers.get(MODE_HEADER).map(String::as_str) {
        Some("future_copy") => {
            let horizon = headers.get(HORIZON_HEADER).and_then(|h| h.parse().ok()).unwrap_or(0.0);
            copy_future(registry, &env, horizon, ROUTE_SUBJECT)
        }
        _ => registry.update(&thing, &env, ROUTE_SUBJECT).map(|_| thing),
    }
}

/// Drains `queue` into the registry. Deliveries are acknowledged only after
/// the registry accepted them; permanently rejected ones are dead-lettered.
fn route_consumer_loop(bus: Arc<Bus>, registry: Arc<Registry>, metrics: Arc<Metrics>, route: PredictionRoute, stop: StopFlag) {
    let dead_letter = format!("{}/dead-letter", route.target_queue);
    while !stop.is_set() {
        let delivery = match bus.dequeue(&route.target_queue, Duration::from_millis(50)) {
            Ok(Some(d)) => d,
            Ok(None) => continue,
            Err(_) => {
                stop.sleep(Duration::from_millis(20));
                continue;
            }
        };
        match apply_routed(&registry, &delivery.headers, &delivery.payload) {
            Ok(_) => {
                if delivery.ack().is_ok() {
                    Metrics::inc(&metrics.route_applied);
                }
            }
            Err(RegistryError::Unavailable(_)) => {
                delivery.nack();
                stop.sleep(Duration::from_millis(20));
            }
            Err(e) => {
                let mut headers = delivery.headers.clone();
                headers.insert("x-reason".into(), e.to_string());
                if bus.publish(&dead_letter, &headers, &delivery.payload).is_ok() && delivery.ack().is_ok() {
                    Metrics::inc(&metrics.dead_lettered);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Service

struct Running<T> {
    config: T,
    worker: Option<Worker>,
    consumer: Option<Worker>,
}

/// Owns forwarder, route and route-consumer workers and their persisted
/// configs.
pub struct Bridges {
    kv: KvStore,
    bus: Arc<Bus>,
    registry: Arc<Registry>,
    metrics: Arc<Metrics>,
    forwarders: Mutex<BTreeMap<String, Running<ForwarderConfig>>>,
    routes: Mutex<BTreeMap<String, Running<PredictionRoute>>>,
    consumers_enabled: Mutex<bool>,
}

impl std::fmt::Debug for Bridges {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Bridges").field("store", &self.kv.path()).finish()
    }
}

fn forwarder_key(id: &str) -> String {
    format!("forwarder/{id}")
}

fn route_key(id: &str) -> String {
    format!("route/{id}")
}

impl Bridges {
    pub fn open(
        path: impl AsRef<Path>,
        sync: SyncPolicy,
        bus: Arc<Bus>,
        registry: Arc<Registry>,
        metrics: Arc<Metrics>,
    ) -> Result<Arc<Self>> {
        let kv = KvStore::open(path, sync)?;
        let forwarders = kv
            .scan_as::<ForwarderConfig>("forwarder/")?
            .into_iter()
            .map(|(_, c)| (c.tenant_id.clone(), Running { config: c, worker: None, consumer: None }))
            .collect();
        let routes = kv
            .scan_as::<PredictionRoute>("route/")?
            .into_iter()
            .map(|(_, c)| (c.route_id.clone(), Running { config: c, worker: None, consumer: None }))
            .collect();
        Ok(Arc::new(Bridges {
            kv,
            bus,
            registry,
            metrics,
            forwarders: Mutex::new(forwarders),
            routes: Mutex::new(routes),
            consumers_enabled: Mutex::new(true),
        }))
    }

    /// Starts workers for every active persisted forwarder and route.
    pub fn start(&self) {
        for f in self.forwarders.lock().values_mut() {
            self.sync_forwarder(f);
        }
        let enabled = *self.consumers_enabled.lock();
        for r in self.routes.lock().values_mut() {
            self.sync_route(r, enabled);
        }
    }

    pub fn shutdown(&self) {
        let mut stopped = Vec::new();
        for f in self.forwarders.lock().values_mut() {
            stopped.extend(f.worker.take());
        }
        for r in self.routes.lock().values_mut() {
            stopped.extend(r.worker.take());
            stopped.extend(r.consumer.take());
        }
        drop(stopped);
    }

    fn sync_forwarder(&self, f: &mut Running<ForwarderConfig>) {
        if f.config.active && f.worker.is_none() {
            let (bus, metrics, cfg) = (self.bus.clone(), self.metrics.clone(), f.config.clone());
            f.worker = Some(Worker::spawn(format!("forwarder-{}", cfg.tenant_id), move |stop| {
                forward_loop(bus, metrics, cfg, stop)
            }));
        } else if !f.config.active {
            f.worker = None;
        }
    }

    fn sync_route(&self, r: &mut Running<PredictionRoute>, consumers: bool) {
        if !r.config.active {
            r.worker = None;
            r.consumer = None;
            return;
        }
        if r.worker.is_none() {
            let (bus, metrics, route) = (self.bus.clone(), self.metrics.clone(), r.config.clone());
            r.worker = Some(Worker::spawn(format!("route-{}", route.route_id), move |stop| {
                route_loop(bus, metrics, route, stop)
            }));
        }
        if consumers && r.consumer.is_none() {
            let (bus, reg, metrics, route) =
                (self.bus.clone(), self.registry.clone(), self.metrics.clone(), r.config.clone());
            r.consumer = Some(Worker::spawn(format!("route-consumer-{}", route.route_id), move |stop| {
                route_consumer_loop(bus, reg, metrics, route, stop)
            }));
        } else if !consumers {
            r.consumer = None;
        }
    }

    // -- forwarders ----------------------------------------------------------

    pub fn create_forwarder(&self, cfg: ForwarderConfig) -> Result<ForwarderConfig> {
        cfg.validate()?;
        let mut all = self.forwarders.lock();
        if all.contains_key(&cfg.tenant_id) {
            return Err(BridgeError::Duplicate(cfg.tenant_id));
        }
        self.kv.put(&forwarder_key(&cfg.tenant_id), &cfg)?;
        let mut f = Running { config: cfg.clone(), worker: None, consumer: None };
        self.sync_forwarder(&mut f);
        all.insert(cfg.tenant_id.clone(), f);
        Ok(cfg)
    }

    /// Replaces a forwarder's config and restarts its loop.
    pub fn put_forwarder(&self, cfg: ForwarderConfig) -> Result<ForwarderConfig> {
        cfg.validate()?;
        let mut all = self.forwarders.lock();
        let f = all.get_mut(&cfg.tenant_id).ok_or_else(|| BridgeError::NotFound(cfg.tenant_id.clone()))?;
        self.kv.put(&forwarder_key(&cfg.tenant_id), &cfg)?;
        f.worker = None;
        f.config = cfg.clone();
        self.sync_forwarder(f);
        Ok(cfg)
    }

    pub fn set_forwarder_active(&self, tenant: &str, active: bool) -> Result<ForwarderConfig> {
        let mut cfg = self.get_forwarder(tenant)?;
        cfg.active = active;
        self.put_forwarder(cfg)
    }

    pub fn get_forwarder(&self, tenant: &str) -> Result<ForwarderConfig> {
        self.forwarders
            .lock()
            .get(tenant)
            .map(|f| f.config.clone())
            .ok_or_else(|| BridgeError::NotFound(tenant.to_string()))
    }

    pub fn list_forwarders(&self) -> Vec<ForwarderConfig> {
        self.forwarders.lock().values().map(|f| f.config.clone()).collect()
    }

    pub fn delete_forwarder(&self, tenant: &str) -> Result<()> {
        let removed = {
            let mut all = self.forwarders.lock();
            let f = all.remove(tenant).ok_or_else(|| BridgeError::NotFound(tenant.to_string()))?;
            self.kv.delete(&forwarder_key(tenant))?;
            f
        };
        drop(removed);
        Ok(())
    }

    // -- routes --------------------------------------------------------------

    pub fn create_route(&self, route: PredictionRoute) -> Result<PredictionRoute> {
        route.validate()?;
        let enabled = *self.consumers_enabled.lock();
        let mut all = self.routes.lock();
        if all.contains_key(&route.route_id) {
            return Err(BridgeError::Duplicate(route.route_id));
        }
        self.bus.create_queue(&route.target_queue).map_err(bus_err)?;
        self.kv.put(&route_key(&route.route_id), &route)?;
        let mut r = Running { config: route.clone(), worker: None, consumer: None };
        self.sync_route(&mut r, enabled);
        all.insert(route.route_id.clone(), r);
        Ok(route)
    }

    pub fn put_route(&self, route: PredictionRoute) -> Result<PredictionRoute> {
        route.validate()?;
        let enabled = *self.consumers_enabled.lock();
        let mut all = self.routes.lock();
        let r = all.get_mut(&route.route_id).ok_or_else(|| BridgeError::NotFound(route.route_id.clone()))?;
        self.bus.create_queue(&route.target_queue).map_err(bus_err)?;
        self.kv.put(&route_key(&route.route_id), &route)?;
        r.worker = None;
        r.consumer = None;
        r.config = route.clone();
        self.sync_route(r, enabled);
        Ok(route)
    }

    pub fn set_route_active(&self, id: &str, active: bool) -> Result<PredictionRoute> {
        let mut route = self.get_route(id)?;
        route.active = active;
        self.put_route(route)
    }

    pub fn get_route(&self, id: &str) -> Result<PredictionRoute> {
        self.routes
            .lock()
            .get(id)
            .map(|r| r.config.clone())
            .ok_or_else(|| BridgeError::NotFound(id.to_string()))
    }

    pub fn list_routes(&self) -> Vec<PredictionRoute> {
        self.routes.lock().values().map(|r| r.config.clone()).collect()
    }

    pub fn delete_route(&self, id: &str) -> Result<()> {
        let removed = {
            let mut all = self.routes.lock();
            let r = all.remove(id).ok_or_else(|| BridgeError::NotFound(id.to_string()))?;
            self.kv.delete(&route_key(id))?;
            r
        };
        drop(removed);
        Ok(())
    }

    /// Stops or restarts all route consumers. Queued messages stay queued.
    pub fn set_route_consumers(&self, enabled: bool) {
        *self.consumers_enabled.lock() = enabled;
        let mut stopped = Vec::new();
        for r in self.routes.lock().values_mut() {
            if enabled {
                self.sync_route(r, true);
            } else {
                stopped.extend(r.consumer.take());
            }
        }
        drop(stopped);
    }

    pub fn route_consumers_enabled(&self) -> bool {
        *self.consumers_enabled.lock()
    }
}

impl Drop for Bridges {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn bus_err(e: BusError) -> BridgeError {
    BridgeError::Unavailable(e.to_string())
}
