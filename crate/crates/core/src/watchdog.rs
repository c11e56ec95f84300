//! Silence watchdog.
//!
//! For every supervised device the watchdog learns the message interval
//! (`ceil(gap in seconds) + 0.2 s`) and, when a device goes quiet for longer
//! than that, publishes a synthetic model input built from the device's last
//! values to the device's ML input topic. Timer fires repeat every interval
//! until a real message arrives; the interval learned before the silence is
//! kept.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use chrono::{Datelike, Timelike};
use parking_lot::Mutex;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::bus::{Bus, Consumer, Headers, Record, StartAt};
use crate::clock::SharedClock;
use crate::codec::{self, CodecError, Format};
use crate::frame::SyncPolicy;
use crate::gateway::telemetry_topic;
use crate::kv::{KvError, KvStore};
use crate::metrics::Metrics;
use crate::model::{feature_leaves, Envelope, FeatureLeaf, Timestamp, DEVICE_HEADER, TIMESTAMP_HEADER};
use crate::worker::{StopFlag, Worker};

const NANOS: i64 = 1_000_000_000;
/// Added to the rounded-up gap.
pub const INTERVAL_PAD_NS: i64 = 200_000_000;
const TICK: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WatchdogError {
    #[error("unknown tenant `{0}`")]
    UnknownTenant(String),
    #[error("tenant `{0}` already exists")]
    DuplicateTenant(String),
    #[error("unknown device `{1}` in tenant `{0}`")]
    UnknownDevice(String, String),
    #[error("device `{1}` already exists in tenant `{0}`")]
    DuplicateDevice(String, String),
    #[error("unknown time field `{0}`")]
    UnknownTimeField(String),
    #[error("no last value for `{0}`")]
    MissingLastValue(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("watchdog unavailable: {0}")]
    Unavailable(String),
}

impl From<KvError> for WatchdogError {
    fn from(e: KvError) -> Self {
        WatchdogError::Unavailable(e.to_string())
    }
}

pub type Result<T, E = WatchdogError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Value specs and input building

/// One entry of `required_values`. Names starting with `$` are time fields
/// resolved from the clock; other names refer to a device feature (`f` reads
/// `f.value`, `f.p` reads property `p` of feature `f`).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSpec {
    pub format: Format,
    pub name: String,
    pub last_value: Option<f64>,
}

#[derive(Deserialize)]
struct RawSpec {
    format: Format,
    name: String,
    #[serde(default)]
    last_value: Option<f64>,
}

impl<'de> Deserialize<'de> for ValueSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = RawSpec::deserialize(d)?;
        Ok(ValueSpec { format: r.format, name: r.name, last_value: r.last_value })
    }
}

impl Serialize for ValueSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(None)?;
        m.serialize_entry("format", &self.format)?;
        m.serialize_entry("name", &self.name)?;
        if !self.is_time() {
            m.serialize_entry("last_value", &self.last_value)?;
        }
        m.end()
    }
}

impl ValueSpec {
    pub fn new(format: Format, name: &str) -> Self {
        ValueSpec { format, name: name.to_string(), last_value: None }
    }

    pub fn is_time(&self) -> bool {
        self.name.starts_with('$')
    }

    /// `(feature, property)` read by a non-time value spec.
    pub fn target(&self) -> (&str, &str) {
        match self.name.split_once('.') {
            Some((f, p)) => (f, p),
            None => (&self.name, "value"),
        }
    }
}

pub const TIME_FIELDS: [&str; 6] = ["$year", "$month", "$day", "$hour", "$minute", "$second"];

pub fn validate_specs(specs: &[ValueSpec]) -> Result<()> {
    for s in specs {
        if s.is_time() {
            if !TIME_FIELDS.contains(&s.name.as_str()) {
                return Err(WatchdogError::UnknownTimeField(s.name.clone()));
            }
            if s.last_value.is_some() {
                return Err(WatchdogError::Invalid(format!("time field `{}` has a last_value", s.name)));
            }
        } else if s.name.is_empty() {
            return Err(WatchdogError::Invalid("empty value name".into()));
        }
    }
    Ok(())
}

fn time_field(name: &str, now: Timestamp) -> Result<f64> {
    let t = now.to_datetime();
    Ok(match name {
        "$year" => t.year() as f64,
        "$month" => t.month() as f64,
        "$day" => t.day() as f64,
        "$hour" => t.hour() as f64,
        "$minute" => t.minute() as f64,
        "$second" => t.second() as f64,
        other => return Err(WatchdogError::UnknownTimeField(other.to_string())),
    })
}

/// Values in `ValueSpec` order: time fields from `now`, others from `last_value`.
pub fn input_values(specs: &[ValueSpec], now: Timestamp) -> Result<Vec<f64>> {
    specs
        .iter()
        .map(|s| {
            if s.is_time() {
                time_field(&s.name, now)
            } else {
                s.last_value.ok_or_else(|| WatchdogError::MissingLastValue(s.name.clone()))
            }
        })
        .collect()
}

pub fn build_input(specs: &[ValueSpec], now: Timestamp) -> Result<Vec<u8>> {
    let values = input_values(specs, now)?;
    let formats: Vec<Format> = specs.iter().map(|s| s.format).collect();
    Ok(codec::encode(&formats, &values)?)
}

/// Copies numeric leaves of a message into the matching specs. Returns
/// whether any value spec changed.
pub fn absorb_leaves(specs: &mut [ValueSpec], leaves: &[FeatureLeaf]) -> bool {
    let mut changed = false;
    for s in specs.iter_mut().filter(|s| !s.is_time()) {
        let (f, p) = s.target();
        if let Some(v) = leaves.iter().rev().find(|l| l.feature == f && l.property == p).and_then(|l| l.value.as_f64()) {
            s.last_value = Some(v);
            changed = true;
        }
    }
    changed
}

/// Leaves carried by a telemetry record, or `None` if it is not an envelope.
pub fn telemetry_leaves(rec: &Record) -> Option<Vec<FeatureLeaf>> {
    let env = Envelope::from_bytes(&rec.payload).ok()?;
    let path = env.resource_path().ok()?;
    Some(feature_leaves(&path, &env.value))
}

// ---------------------------------------------------------------------------
// Per-device timer state machine

/// `ceil(gap) + 0.2 s` in nanoseconds; whole seconds are at least one.
pub fn learned_interval_ns(gap_ns: i64) -> i64 {
    let secs = if gap_ns <= 0 { 1 } else { (gap_ns + NANOS - 1) / NANOS };
    secs.max(1) * NANOS + INTERVAL_PAD_NS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TimerState {
    pub last_message: Option<Timestamp>,
    pub interval_ns: Option<i64>,
    pub deadline: Option<Timestamp>,
    /// The timer fired since the last real message.
    pub silent: bool,
}

impl TimerState {
    pub fn with_interval(interval_ns: Option<i64>) -> Self {
        TimerState { interval_ns, ..Default::default() }
    }

    pub fn on_message(&mut self, now: Timestamp) {
        if let (Some(prev), false) = (self.last_message, self.silent) {
            self.interval_ns = Some(learned_interval_ns(now.0 - prev.0));
        }
        self.last_message = Some(now);
        self.silent = false;
        self.deadline = self.interval_ns.map(|i| now.add_nanos(i));
    }

    pub fn due(&self, now: Timestamp) -> bool {
        self.deadline.is_some_and(|d| d <= now)
    }

    /// Marks a fire at `now` and re-arms.
    pub fn on_fire(&mut self, now: Timestamp) {
        self.silent = true;
        self.deadline = self.interval_ns.map(|i| now.add_nanos(i));
    }

    pub fn cancel(&mut self) {
        self.deadline = None;
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimerView {
    pub armed: bool,
    pub deadline: Option<Timestamp>,
    pub last_message: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatchdogDeviceConfig {
    pub device_id: String,
    #[serde(default = "yes")]
    pub active: bool,
    pub ml_input_topic: String,
    #[serde(default)]
    pub required_values: Vec<ValueSpec>,
    #[serde(default)]
    pub learned_interval_s: Option<f64>,
    #[serde(default, skip_deserializing)]
    pub timer: Option<TimerView>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatchdogTenantConfig {
    pub tenant_id: String,
    #[serde(default = "yes")]
    pub active: bool,
    #[serde(default)]
    pub devices: Vec<WatchdogDeviceConfig>,
}

impl WatchdogDeviceConfig {
    fn validate(&self) -> Result<()> {
        if self.device_id.is_empty() || self.ml_input_topic.is_empty() {
            return Err(WatchdogError::Invalid("device_id and ml_input_topic are required".into()));
        }
        validate_specs(&self.required_values)
    }
}

struct DeviceRuntime {
    config: WatchdogDeviceConfig,
    timer: TimerState,
}

impl DeviceRuntime {
    fn new(mut config: WatchdogDeviceConfig) -> Self {
        config.timer = None;
        let interval = config.learned_interval_s.map(|s| (s * 1e9).round() as i64);
        DeviceRuntime { config, timer: TimerState::with_interval(interval) }
    }

    fn view(&self) -> WatchdogDeviceConfig {
        let mut c = self.config.clone();
        c.learned_interval_s = self.timer.interval_ns.map(|n| n as f64 / 1e9);
        c.timer = Some(TimerView {
            armed: self.timer.deadline.is_some(),
            deadline: self.timer.deadline,
            last_message: self.timer.last_message,
        });
        c
    }
}

struct TenantRuntime {
    tenant_id: String,
    active: bool,
    devices: BTreeMap<String, DeviceRuntime>,
}

impl TenantRuntime {
    fn view(&self) -> WatchdogTenantConfig {
        WatchdogTenantConfig {
            tenant_id: self.tenant_id.clone(),
            active: self.active,
            devices: self.devices.values().map(DeviceRuntime::view).collect(),
        }
    }

    fn persisted(&self) -> WatchdogTenantConfig {
        let mut v = self.view();
        for d in &mut v.devices {
            d.timer = None;
        }
        v
    }
}

/// One synthetic input sent for a silent device.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub device_id: String,
    pub at: Timestamp,
    pub topic: String,
    pub bytes: Vec<u8>,
}

/// Handles a telemetry message for `device` at `now`. Unknown or inactive
/// devices are ignored. Returns whether the learned interval changed.
fn handle_message(t: &mut TenantRuntime, device: &str, leaves: &[FeatureLeaf], now: Timestamp) -> bool {
    let Some(d) = t.devices.get_mut(device) else { return false };
    if !d.config.active {
        return false;
    }
    absorb_leaves(&mut d.config.required_values, leaves);
    let before = d.timer.interval_ns;
    d.timer.on_message(now);
    before != d.timer.interval_ns
}

/// Fires every due timer. Timers without a full set of last values re-arm
/// without dispatching.
fn fire_due(t: &mut TenantRuntime, now: Timestamp, metrics: &Metrics) -> Vec<Dispatch> {
    let mut out = Vec::new();
    for (id, d) in t.devices.iter_mut() {
        if !d.config.active || !d.timer.due(now) {
            continue;
        }
        d.timer.on_fire(now);
        match build_input(&d.config.required_values, now) {
            Ok(bytes) => out.push(Dispatch { device_id: id.clone(), at: now, topic: d.config.ml_input_topic.clone(), bytes }),
            Err(e) => {
                Metrics::inc(&metrics.watchdog_missing_values);
                tracing::warn!(device = %id, error = %e, "skipping watchdog dispatch");
            }
        }
    }
    out
}

/// Earliest armed deadline among active devices.
fn next_deadline(t: &TenantRuntime) -> Option<Timestamp> {
    t.devices.values().filter(|d| d.config.active).filter_map(|d| d.timer.deadline).min()
}

/// Runs one device through a message trace on virtual time and returns the
/// dispatches, including those between the last message and `end`.
pub fn replay(
    config: WatchdogDeviceConfig,
    messages: &[(Timestamp, Vec<FeatureLeaf>)],
    end: Timestamp,
    metrics: &Metrics,
) -> Vec<Dispatch> {
    let id = config.device_id.clone();
    let mut t = TenantRuntime { tenant_id: String::new(), active: true, devices: BTreeMap::new() };
    t.devices.insert(id.clone(), DeviceRuntime::new(config));
    let mut out = Vec::new();
    for (at, leaves) in messages {
        out.extend(fire_until(&mut t, *at, metrics));
        handle_message(&mut t, &id, leaves, *at);
    }
    out.extend(fire_until(&mut t, end, metrics));
    out
}

/// Fires every deadline up to and including `until`, each at its own
/// deadline, in time order.
fn fire_until(t: &mut TenantRuntime, until: Timestamp, metrics: &Metrics) -> Vec<Dispatch> {
    let mut out = Vec::new();
    while let Some(d) = next_deadline(t).filter(|d| *d <= until) {
        out.extend(fire_due(t, d, metrics));
    }
    out
}

// ---------------------------------------------------------------------------
// Service

fn tenant_key(id: &str) -> String {
    format!("tenant/{id}")
}

struct Shared {
    kv: KvStore,
    bus: Arc<Bus>,
    clock: SharedClock,
    metrics: Arc<Metrics>,
    tenants: Mutex<HashMap<String, Arc<Mutex<TenantRuntime>>>>,
}

impl Shared {
    fn persist(&self, t: &TenantRuntime) -> Result<()> {
        self.kv.put(&tenant_key(&t.tenant_id), &t.persisted())?;
        Ok(())
    }
}

pub struct Watchdog {
    shared: Arc<Shared>,
    supervisors: Mutex<HashMap<String, Worker>>,
}

impl std::fmt::Debug for Watchdog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Watchdog").field("store", &self.shared.kv.path()).finish()
    }
}

impl Watchdog {
    /// Opens the persisted configuration without starting supervisors.
    pub fn open(
        path: impl AsRef<Path>,
        sync: SyncPolicy,
        bus: Arc<Bus>,
        clock: SharedClock,
        metrics: Arc<Metrics>,
    ) -> Result<Arc<Self>> {
        let kv = KvStore::open(path, sync)?;
        let mut tenants = HashMap::new();
        for (_, cfg) in kv.scan_as::<WatchdogTenantConfig>("tenant/")? {
            let rt = TenantRuntime {
                tenant_id: cfg.tenant_id.clone(),
                active: cfg.active,
                devices: cfg.devices.into_iter().map(|d| (d.device_id.clone(), DeviceRuntime::new(d))).collect(),
            };
            tenants.insert(cfg.tenant_id, Arc::new(Mutex::new(rt)));
        }
        Ok(Arc::new(Watchdog {
            shared: Arc::new(Shared { kv, bus, clock, metrics, tenants: Mutex::new(tenants) }),
            supervisors: Mutex::new(HashMap::new()),
        }))
    }

    /// Launches a supervisor for every active tenant.
    pub fn start(&self) {
        let active: Vec<String> = self
            .shared
            .tenants
            .lock()
            .iter()
            .filter(|(_, t)| t.lock().active)
            .map(|(id, _)| id.clone())
            .collect();
        for id in active {
            self.launch(&id);
        }
    }

    pub fn shutdown(&self) {
        let workers: Vec<Worker> = self.supervisors.lock().drain().map(|(_, w)| w).collect();
        drop(workers);
    }

    pub fn running_supervisors(&self) -> Vec<String> {
        let mut v: Vec<String> =
            self.supervisors.lock().iter().filter(|(_, w)| w.is_running()).map(|(k, _)| k.clone()).collect();
        v.sort();
        v
    }

    fn launch(&self, tenant_id: &str) {
        let mut sups = self.supervisors.lock();
        if sups.get(tenant_id).is_some_and(Worker::is_running) {
            return;
        }
        let Some(rt) = self.shared.tenants.lock().get(tenant_id).cloned() else { return };
        let shared = self.shared.clone();
        let topic = telemetry_topic(tenant_id);
        // messages published after launch are seen even if subscribing lags
        let from = shared.bus.end_offset(&topic).ok();
        let w = Worker::spawn(format!("watchdog-{tenant_id}"), move |stop| supervise(shared, rt, topic, from, stop));
        sups.insert(tenant_id.to_string(), w);
    }

    fn halt(&self, tenant_id: &str) {
        let w = self.supervisors.lock().remove(tenant_id);
        drop(w);
    }

    fn tenant(&self, id: &str) -> Result<Arc<Mutex<TenantRuntime>>> {
        self.shared.tenants.lock().get(id).cloned().ok_or_else(|| WatchdogError::UnknownTenant(id.to_string()))
    }

    pub fn create_tenant(&self, cfg: WatchdogTenantConfig) -> Result<WatchdogTenantConfig> {
        if cfg.tenant_id.is_empty() {
            return Err(WatchdogError::Invalid("tenant_id is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for d in &cfg.devices {
            d.validate()?;
            if !seen.insert(d.device_id.clone()) {
                return Err(WatchdogError::DuplicateDevice(cfg.tenant_id.clone(), d.device_id.clone()));
            }
        }
        let rt = {
            let mut tenants = self.shared.tenants.lock();
            if tenants.contains_key(&cfg.tenant_id) {
                return Err(WatchdogError::DuplicateTenant(cfg.tenant_id));
            }
            let rt = TenantRuntime {
                tenant_id: cfg.tenant_id.clone(),
                active: cfg.active,
                devices: cfg.devices.into_iter().map(|d| (d.device_id.clone(), DeviceRuntime::new(d))).collect(),
            };
            self.shared.persist(&rt)?;
            let rt = Arc::new(Mutex::new(rt));
            tenants.insert(cfg.tenant_id.clone(), rt.clone());
            rt
        };
        let view = rt.lock().view();
        if view.active {
            self.launch(&view.tenant_id);
        }
        Ok(view)
    }

    pub fn get_tenant(&self, id: &str) -> Result<WatchdogTenantConfig> {
        Ok(self.tenant(id)?.lock().view())
    }

    pub fn list_tenants(&self) -> Vec<WatchdogTenantConfig> {
        let tenants: Vec<_> = self.shared.tenants.lock().values().cloned().collect();
        let mut v: Vec<_> = tenants.iter().map(|t| t.lock().view()).collect();
        v.sort_by(|a, b| a.tenant_id.cmp(&b.tenant_id));
        v
    }

    pub fn delete_tenant(&self, id: &str) -> Result<()> {
        self.tenant(id)?;
        self.halt(id);
        self.shared.tenants.lock().remove(id);
        self.shared.kv.delete(&tenant_key(id))?;
        Ok(())
    }

    pub fn set_tenant_active(&self, id: &str, active: bool) -> Result<WatchdogTenantConfig> {
        let rt = self.tenant(id)?;
        {
            let mut t = rt.lock();
            t.active = active;
            if !active {
                for d in t.devices.values_mut() {
                    d.timer.cancel();
                }
            }
            self.shared.persist(&t)?;
        }
        if active {
            self.launch(id);
        } else {
            self.halt(id);
        }
        let view = rt.lock().view();
        Ok(view)
    }

    pub fn add_device(&self, tenant: &str, cfg: WatchdogDeviceConfig) -> Result<WatchdogDeviceConfig> {
        cfg.validate()?;
        let rt = self.tenant(tenant)?;
        let mut t = rt.lock();
        if t.devices.contains_key(&cfg.device_id) {
            return Err(WatchdogError::DuplicateDevice(tenant.into(), cfg.device_id));
        }
        let id = cfg.device_id.clone();
        t.devices.insert(id.clone(), DeviceRuntime::new(cfg));
        self.shared.persist(&t)?;
        Ok(t.devices[&id].view())
    }

    pub fn get_device(&self, tenant: &str, device: &str) -> Result<WatchdogDeviceConfig> {
        let rt = self.tenant(tenant)?;
        let t = rt.lock();
        t.devices
            .get(device)
            .map(DeviceRuntime::view)
            .ok_or_else(|| WatchdogError::UnknownDevice(tenant.into(), device.into()))
    }

    pub fn list_devices(&self, tenant: &str) -> Result<Vec<WatchdogDeviceConfig>> {
        Ok(self.tenant(tenant)?.lock().view().devices)
    }

    pub fn delete_device(&self, tenant: &str, device: &str) -> Result<()> {
        let rt = self.tenant(tenant)?;
        let mut t = rt.lock();
        if t.devices.remove(device).is_none() {
            return Err(WatchdogError::UnknownDevice(tenant.into(), device.into()));
        }
        self.shared.persist(&t)?;
        Ok(())
    }

    pub fn set_device_active(&self, tenant: &str, device: &str, active: bool) -> Result<WatchdogDeviceConfig> {
        let rt = self.tenant(tenant)?;
        let mut t = rt.lock();
        let d = t
            .devices
            .get_mut(device)
            .ok_or_else(|| WatchdogError::UnknownDevice(tenant.into(), device.into()))?;
        d.config.active = active;
        if !active {
            d.timer.cancel();
        }
        let view = d.view();
        self.shared.persist(&t)?;
        Ok(view)
    }
}

impl Drop for Watchdog {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn publish(shared: &Shared, d: &Dispatch) {
    let mut h = Headers::new();
    h.insert(DEVICE_HEADER.into(), d.device_id.clone());
    h.insert(TIMESTAMP_HEADER.into(), d.at.to_rfc3339());
    h.insert("x-source".into(), "watchdog".into());
    match shared.bus.publish(&d.topic, &h, &d.bytes) {
        Ok(_) => Metrics::inc(&shared.metrics.dispatched),
        Err(e) => tracing::warn!(device = %d.device_id, error = %e, "watchdog dispatch failed"),
    }
}

fn supervise(shared: Arc<Shared>, rt: Arc<Mutex<TenantRuntime>>, topic: String, mut from: Option<u64>, stop: StopFlag) {
    let mut consumer: Option<Consumer> = None;
    while !stop.is_set() {
        let now = shared.clock.now();
        let (dispatches, next) = {
            let mut t = rt.lock();
            let d = fire_until(&mut t, now, &shared.metrics);
            (d, next_deadline(&t))
        };
        for d in &dispatches {
            publish(&shared, d);
        }
        let wait = match next {
            Some(n) if n.0 > now.0 => Duration::from_nanos((n.0 - now.0) as u64).min(TICK),
            Some(_) => Duration::ZERO,
            None => TICK,
        };
        let c = match consumer.as_mut() {
            Some(c) => c,
            None => match shared.bus.subscribe(&topic, from.take().map_or(StartAt::Latest, StartAt::Offset)) {
                Ok(c) => consumer.insert(c),
                Err(_) => {
                    stop.sleep(wait.max(Duration::from_millis(5)));
                    continue;
                }
            },
        };
        match c.poll(wait) {
            Ok(Some(rec)) => {
                let Some(device) = rec.headers.get(DEVICE_HEADER).cloned() else { continue };
                let leaves = telemetry_leaves(&rec).unwrap_or_default();
                let now = shared.clock.now();
                let mut t = rt.lock();
                let due = fire_until(&mut t, now, &shared.metrics);
                let changed = handle_message(&mut t, &device, &leaves, now);
                if changed {
                    if let Err(e) = shared.persist(&t) {
                        tracing::warn!(error = %e, "could not persist learned interval");
                    }
                }
                drop(t);
                for d in &due {
                    publish(&shared, d);
                }
            }
            Ok(None) => {}
            Err(_) => {
                consumer = None;
                stop.sleep(Duration::from_millis(20));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::BusOptions;
    use crate::clock::ManualClock;
    use serde_json::json;

    fn secs(s: f64) -> Timestamp {
        Timestamp((s * 1e9).round() as i64)
    }

    fn leaf(f: &str, v: f64) -> FeatureLeaf {
        FeatureLeaf { feature: f.into(), property: "value".into(), value: json!(v) }
    }

    fn device(specs: Vec<ValueSpec>) -> WatchdogDeviceConfig {
        WatchdogDeviceConfig {
            device_id: "test:DHT22".into(),
            active: true,
            ml_input_topic: "ml-in".into(),
            required_values: specs,
            learned_interval_s: None,
            timer: None,
        }
    }

    #[test]
    fn interval_rounds_up_and_pads() {
        assert_eq!(learned_interval_ns(secs(10.0).0 - secs(7.3).0), 3_200_000_000);
        assert_eq!(learned_interval_ns(1_000_000_000), 1_200_000_000);
        let mut t = TimerState::default();
        for s in [0.0, 1.0, 2.0] {
            t.on_message(secs(s));
        }
        assert_eq!(t.interval_ns, Some(1_200_000_000));
    }

    #[test]
    fn first_message_arms_without_deadline() {
        let mut t = TimerState::default();
        t.on_message(secs(5.0));
        assert_eq!(t.deadline, None);
        t.on_message(secs(7.3));
        assert_eq!(t.deadline, Some(secs(7.3).add_nanos(3_200_000_000)));
    }

    #[test]
    fn silence_keeps_interval() {
        let specs = vec![ValueSpec::new(Format::Float64, "temperature")];
        let msgs: Vec<_> = [0.0, 1.0, 2.0, 10.0, 11.0].iter().map(|s| (secs(*s), vec![leaf("temperature", 1.0)])).collect();
        let m = Metrics::default();
        let d = replay(device(specs), &msgs, secs(11.0), &m);
        let times: Vec<Timestamp> = d.iter().map(|x| x.at).collect();
        // silent from 2 to 10 with a 1.2 s interval: 6 fires
        let expect: Vec<Timestamp> = (1..=6).map(|k| secs(2.0).add_nanos(k * 1_200_000_000)).collect();
        assert_eq!(times, expect);
        // message at 10 after silence keeps 1.2; message at 11 learns from a normal gap
        let mut t = TimerState::default();
        for (at, _) in &msgs[..3] {
            t.on_message(*at);
        }
        t.on_fire(secs(3.2));
        t.on_message(secs(10.0));
        assert_eq!(t.interval_ns, Some(1_200_000_000));
    }

    #[test]
    fn missing_last_value_skips_dispatch() {
        let specs = vec![ValueSpec::new(Format::Float64, "temperature"), ValueSpec::new(Format::Float64, "humidity")];
        let msgs = vec![(secs(0.0), vec![leaf("temperature", 1.0)]), (secs(1.0), vec![leaf("temperature", 2.0)])];
        let m = Metrics::default();
        let d = replay(device(specs), &msgs, secs(5.0), &m);
        assert!(d.is_empty());
        assert_eq!(m.get("watchdog_missing_values"), Some(3));
    }

    #[test]
    fn build_input_follows_spec_order() {
        let mut specs: Vec<ValueSpec> = serde_json::from_value(json!([
            {"format": "float64", "name": "$year"},
            {"format": "float64", "name": "$month"},
            {"format": "float64", "name": "$day"},
            {"format": "float64", "name": "temperature", "last_value": null},
            {"format": "float64", "name": "humidity", "last_value": null}
        ]))
        .unwrap();
        specs[3].last_value = Some(20.0);
        specs[4].last_value = Some(30.0);
        let now = Timestamp::parse("2024-01-02T00:00:00Z").unwrap();
        let bytes = build_input(&specs, now).unwrap();
        assert_eq!(bytes.len(), 40);
        assert_eq!(codec::decode(&[Format::Float64; 5], &bytes).unwrap(), vec![2024.0, 1.0, 2.0, 20.0, 30.0]);
        assert!(build_input(&[], now).unwrap().is_empty());
        assert_eq!(
            build_input(&[ValueSpec::new(Format::Float64, "$fortnight")], now),
            Err(WatchdogError::UnknownTimeField("$fortnight".into()))
        );
        let round = serde_json::to_value(&specs[0]).unwrap();
        assert_eq!(round, json!({"format": "float64", "name": "$year"}));
    }

    fn wait_for(mut f: impl FnMut() -> bool) -> bool {
        let end = std::time::Instant::now() + Duration::from_secs(5);
        while std::time::Instant::now() < end {
            if f() {
                return true;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        false
    }

    #[test]
    fn supervisor_dispatches_on_virtual_time() {
        let dir = tempfile::tempdir().unwrap();
        let bus = Bus::open(dir.path().join("bus"), BusOptions::default()).unwrap();
        let clock = ManualClock::new(secs(1000.0));
        let metrics = Arc::new(Metrics::default());
        let wd = Watchdog::open(dir.path().join("wd.kv"), SyncPolicy::Os, bus.clone(), clock.clone(), metrics.clone()).unwrap();
        let specs = vec![ValueSpec::new(Format::Float64, "temperature")];
        wd.create_tenant(WatchdogTenantConfig { tenant_id: "t".into(), active: true, devices: vec![device(specs)] })
            .unwrap();
        assert_eq!(wd.running_supervisors(), vec!["t"]);
        std::thread::sleep(Duration::from_millis(100));

        let id = crate::model::parse_thing_id("test:DHT22").unwrap();
        let send = |v: f64| {
            let e = Envelope::modify(&id, "/features/temperature/properties/value", json!(v));
            let mut h = Headers::new();
            h.insert(DEVICE_HEADER.into(), "test:DHT22".into());
            bus.publish("telemetry/t", &h, &e.to_bytes()).unwrap();
        };
        send(1.0);
        assert!(wait_for(|| wd.get_device("t", "test:DHT22").unwrap().timer.unwrap().deadline.is_none()
            && wd.get_device("t", "test:DHT22").unwrap().required_values[0].last_value == Some(1.0)));
        clock.advance_secs(2.0);
        send(2.0);
        assert!(wait_for(|| wd.get_device("t", "test:DHT22").unwrap().learned_interval_s == Some(2.2)));
        clock.advance_secs(2.3);
        assert!(wait_for(|| metrics.get("dispatched") == Some(1)));
        let rec = bus.read("ml-in", 0).unwrap().unwrap();
        assert_eq!(codec::decode(&[Format::Float64], &rec.payload).unwrap(), vec![2.0]);

        wd.set_tenant_active("t", false).unwrap();
        assert!(wd.running_supervisors().is_empty());
        clock.advance_secs(10.0);
        std::thread::sleep(Duration::from_millis(100));
        assert_eq!(metrics.get("dispatched"), Some(1));
        drop(wd);

        let wd = Watchdog::open(dir.path().join("wd.kv"), SyncPolicy::Os, bus, clock, metrics).unwrap();
        let t = wd.get_tenant("t").unwrap();
        assert!(!t.active);
        assert_eq!(t.devices[0].learned_interval_s, Some(2.2));
        wd.set_tenant_active("t", true).unwrap();
        wd.delete_device("t", "test:DHT22").unwrap();
        assert!(wd.list_devices("t").unwrap().is_empty());
    }
}
