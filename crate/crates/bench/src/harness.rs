//! Test bed: a platform on a scratch directory, provisioned for a scenario,
//! plus the simulated device clients and the read-back reconciliation.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Map};
use twinforge_core::bridges::{ForwarderConfig, ForwarderDevice, PredictionRoute, RouteMode, ROUTE_SUBJECT};
use twinforge_core::codec::Format;
use twinforge_core::connection::{ConnectionConfig, GATEWAY_SUBJECT};
use twinforge_core::gateway::{Credentials, DeviceClient, IngestFrame, TcpIngest, Tenant};
use twinforge_core::mlrt::{ModelDeployment, ModelFn};
use twinforge_core::model::{parse_thing_id, Envelope, Permission, Policy, ThingId, Timestamp, TIMESTAMP_HEADER};
use twinforge_core::platform::{Platform, PlatformOptions};
use twinforge_core::timeseries::{Query, TimeSeriesPoint};
use twinforge_core::watchdog::ValueSpec;

use crate::report::{Accounting, LatencyStats, RepetitionReport};
use crate::scenario::{FaultSpec, ScenarioConfig};
use crate::stats::mean;

pub const TENANT: &str = "bench";
pub const POLICY: &str = "bench:policy";
pub const PASSWORD: &str = "bench-secret";
pub const ML_INPUT_TOPIC: &str = "bench/ml-in";
pub const ML_OUTPUT_TOPIC: &str = "bench/ml-out";
pub const PREDICTION_QUEUE: &str = "bench/predictions";
pub const MODEL_ID: &str = "bench-linear";
pub const ROUTE_ID: &str = "bench-route";
pub const VALUE_FEATURE: &str = "value";
pub const PREDICTION_FEATURE: &str = "prediction";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Scenario(#[from] crate::scenario::ScenarioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn setup_err(e: impl std::fmt::Display) -> BenchError {
    BenchError::Setup(e.to_string())
}

pub fn sensor_id(i: usize) -> ThingId {
    parse_thing_id(&format!("bench:sensor-{i:02}")).expect("valid id")
}

pub fn model_twin() -> ThingId {
    parse_thing_id("bench:model").expect("valid id")
}

fn creds(device: &ThingId) -> Credentials {
    Credentials { username: device.to_string(), password: PASSWORD.into() }
}

/// Strictly increasing wall-clock timestamps shared by all clients, so every
/// message gets a distinct time key.
#[derive(Debug, Default)]
pub struct TimeKeys(AtomicI64);

impl TimeKeys {
    pub fn next(&self) -> Timestamp {
        let now = Timestamp::now().0;
        let mut last = self.0.load(Ordering::Relaxed);
        loop {
            let t = now.max(last + 1);
            match self.0.compare_exchange_weak(last, t, Ordering::Relaxed, Ordering::Relaxed) {
                Ok(_) => return Timestamp(t),
                Err(x) => last = x,
            }
        }
    }
}

/// A provisioned platform on a scratch directory. Dropping it shuts the
/// platform down and removes the directory.
pub struct Testbed {
    tcp: TcpIngest,
    pub platform: Arc<Platform>,
    pub sensors: Vec<ThingId>,
    pub prediction_twin: ThingId,
    _dir: tempfile::TempDir,
}

impl Testbed {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, BenchError> {
        let dir = tempfile::Builder::new().prefix("twinforge-bench").tempdir()?;
        let opts = PlatformOptions { sync: cfg.sync, ..Default::default() };
        let p = Platform::open(dir.path(), opts).map_err(setup_err)?;
        p.registry
            .create_policy(Policy {
                policy_id: POLICY.into(),
                entries: BTreeMap::from([
                    (GATEWAY_SUBJECT.to_string(), Permission { read: true, write: true }),
                    (ROUTE_SUBJECT.to_string(), Permission { read: true, write: true }),
                ]),
            })
            .map_err(setup_err)?;
        p.gateway.create_tenant(Tenant { tenant_id: TENANT.into(), mapper: Default::default() }).map_err(setup_err)?;
        let sensors: Vec<ThingId> = (0..cfg.sensors).map(sensor_id).collect();
        for s in &sensors {
            p.registry.create_twin(s.clone(), POLICY, Map::new(), BTreeMap::new()).map_err(setup_err)?;
            p.gateway.register_device(TENANT, s.as_str(), &creds(s)).map_err(setup_err)?;
        }
        if cfg.pipeline.core() {
            p.connections.create(ConnectionConfig::new(TENANT)).map_err(setup_err)?;
        }
        let model = model_twin();
        let prediction_twin = match cfg.route_mode {
            RouteMode::Update => model.clone(),
            RouteMode::FutureCopy => model.with_suffix(twinforge_core::bridges::PREDICTED_SUFFIX).map_err(setup_err)?,
        };
        if cfg.pipeline.ml() {
            p.registry.create_twin(model.clone(), POLICY, Map::new(), BTreeMap::new()).map_err(setup_err)?;
            p.ml.deploy(ModelDeployment {
                model_id: MODEL_ID.into(),
                input_topic: ML_INPUT_TOPIC.into(),
                output_topic: ML_OUTPUT_TOPIC.into(),
                input_schema: vec![Format::Float64],
                function: ModelFn::Linear { weights: vec![cfg.model_weight], bias: 0.0 },
            })
            .map_err(setup_err)?;
            p.bridges
                .create_forwarder(ForwarderConfig {
                    tenant_id: TENANT.into(),
                    active: true,
                    devices: sensors
                        .iter()
                        .map(|s| ForwarderDevice {
                            device_id: s.to_string(),
                            ml_input_topic: ML_INPUT_TOPIC.into(),
                            required_values: vec![ValueSpec::new(Format::Float64, VALUE_FEATURE)],
                            active: true,
                        })
                        .collect(),
                })
                .map_err(setup_err)?;
            p.bridges
                .create_route(PredictionRoute {
                    route_id: ROUTE_ID.into(),
                    source_topic: ML_OUTPUT_TOPIC.into(),
                    target_queue: PREDICTION_QUEUE.into(),
                    active: true,
                    ditto_message: json!({
                        "topic": format!("{}/{}/things/twin/commands/modify", model.namespace(), model.name()),
                        "path": format!("/features/{PREDICTION_FEATURE}/properties/value"),
                        "value": "{0}"
                    }),
                    mode: cfg.route_mode,
                    horizon_s: Some(60.0),
                })
                .map_err(setup_err)?;
        }
        p.start();
        let tcp = TcpIngest::start(p.gateway.clone(), "127.0.0.1:0")?;
        Ok(Testbed { tcp, platform: p, sensors, prediction_twin, _dir: dir })
    }

    pub fn addr(&self) -> SocketAddr {
        self.tcp.local_addr()
    }

    /// Gateway-tagged points on the sensors' value feature.
    pub fn core_points(&self) -> Vec<TimeSeriesPoint> {
        self.platform
            .ts
            .query(&Query {
                feature: Some(VALUE_FEATURE.into()),
                originator: Some(GATEWAY_SUBJECT.into()),
                ..Default::default()
            })
            .unwrap_or_default()
    }

    /// Route-tagged points on the prediction twin.
    pub fn ml_points(&self) -> Vec<TimeSeriesPoint> {
        self.platform
            .ts
            .query(&Query {
                thing: Some(self.prediction_twin.clone()),
                feature: Some(PREDICTION_FEATURE.into()),
                originator: Some(ROUTE_SUBJECT.into()),
                ..Default::default()
            })
            .unwrap_or_default()
    }
}

impl Drop for Testbed {
    fn drop(&mut self) {
        self.tcp.stop();
        self.platform.shutdown();
    }
}

/// One message as the client saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub client: usize,
    /// Original send time; carried as the message's `x-ts` and kept across
    /// retries, so it also identifies the message.
    pub sent_at: Timestamp,
    pub x: f64,
    pub attempts: u32,
}

const RETRY_PAUSE: Duration = Duration::from_millis(20);

/// Sends until the gateway accepts, reconnecting as needed.
fn send_with_retry(addr: SocketAddr, conn: &mut Option<DeviceClient>, frame: &IngestFrame) -> u32 {
    let mut attempts = 0;
    loop {
        attempts += 1;
        let client = match conn {
            Some(c) => c,
            None => match DeviceClient::connect(addr) {
                Ok(c) => conn.insert(c),
                Err(_) => {
                    std::thread::sleep(RETRY_PAUSE);
                    continue;
                }
            },
        };
        match client.send(frame) {
            Ok(r) if r.ok => return attempts,
            Ok(_) => std::thread::sleep(RETRY_PAUSE),
            Err(_) => {
                *conn = None;
                std::thread::sleep(RETRY_PAUSE);
            }
        }
    }
}

fn client_loop(
    addr: SocketAddr,
    client: usize,
    sensor: &ThingId,
    cfg: &ScenarioConfig,
    counter: &AtomicU64,
    keys: &TimeKeys,
) -> Vec<Sample> {
    let mut conn = None;
    let mut out = Vec::with_capacity(cfg.messages);
    let start = Instant::now();
    let c = creds(sensor);
    for m in 0..cfg.messages {
        // each client increments a shared value by 0.01, starting at 0
        let k = counter.fetch_add(1, Ordering::Relaxed) + 1;
        let x = k as f64 * 0.01;
        let sent_at = keys.next();
        let env = Envelope::modify(sensor, &format!("/features/{VALUE_FEATURE}/properties/value"), json!(x))
            .with_header(TIMESTAMP_HEADER, sent_at.to_rfc3339());
        let frame = IngestFrame {
            tenant: TENANT.into(),
            device: sensor.to_string(),
            username: c.username.clone(),
            password: c.password.clone(),
            payload: serde_json::to_value(&env).expect("json"),
        };
        let attempts = send_with_retry(addr, &mut conn, &frame);
        out.push(Sample { client, sent_at, x, attempts });
        if cfg.period_s > 0.0 {
            let next = start + Duration::from_secs_f64(cfg.period_s * (m + 1) as f64);
            if let Some(d) = next.checked_duration_since(Instant::now()) {
                std::thread::sleep(d);
            }
        }
    }
    out
}

/// Wall times of a fault: when the service went down and came back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultWindow {
    pub killed_at: Timestamp,
    pub restarted_at: Timestamp,
}

/// Runs every client to completion while applying `fault`.
pub fn drive(bed: &Testbed, cfg: &ScenarioConfig, fault: Option<&FaultSpec>) -> (Vec<Sample>, Option<FaultWindow>) {
    let counter = AtomicU64::new(0);
    let keys = TimeKeys::default();
    let addr = bed.addr();
    std::thread::scope(|s| {
        let fault_thread = fault.and_then(|f| f.target.map(|t| (f, t))).map(|(f, target)| {
            let p = bed.platform.clone();
            s.spawn(move || {
                std::thread::sleep(Duration::from_secs_f64(f.kill_at_s));
                let killed_at = Timestamp::now();
                p.kill(target);
                std::thread::sleep(Duration::from_secs_f64(f.down_s));
                if let Err(e) = p.restart(target) {
                    tracing::error!(error = %e, "restart failed");
                }
                FaultWindow { killed_at, restarted_at: Timestamp::now() }
            })
        });
        let clients: Vec<_> = (0..cfg.clients)
            .map(|i| {
                let sensor = &bed.sensors[i % bed.sensors.len()];
                let (counter, keys) = (&counter, &keys);
                s.spawn(move || client_loop(addr, i, sensor, cfg, counter, keys))
            })
            .collect();
        let mut samples: Vec<Sample> = clients.into_iter().flat_map(|h| h.join().expect("client thread")).collect();
        samples.sort_by_key(|s| s.sent_at);
        (samples, fault_thread.map(|h| h.join().expect("fault thread")))
    })
}

/// Waits until every path has stored `expected` points, the drain timeout
/// passes, or nothing new arrives for a while.
pub fn wait_for_drain(bed: &Testbed, cfg: &ScenarioConfig, expected: usize) {
    let deadline = Instant::now() + Duration::from_secs_f64(cfg.drain_timeout_s);
    let stall = Duration::from_secs(10);
    let mut last = (usize::MAX, usize::MAX);
    let mut last_change = Instant::now();
    while Instant::now() < deadline {
        let core = if cfg.pipeline.core() { bed.core_points().len() } else { expected };
        let ml = if cfg.pipeline.ml() { bed.ml_points().len() } else { expected };
        if core >= expected && ml >= expected {
            return;
        }
        if (core, ml) != last {
            last = (core, ml);
            last_change = Instant::now();
        } else if last_change.elapsed() > stall {
            return;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

/// Reconciles stored points against what was sent. `value_of` maps a sent
/// value to the expected stored value.
pub fn reconcile(
    samples: &[Sample],
    points: &[TimeSeriesPoint],
    value_of: impl Fn(f64) -> f64,
) -> (Accounting, HashMap<i64, Timestamp>, f64) {
    let by_key: HashMap<i64, &Sample> = samples.iter().map(|s| (s.sent_at.0, s)).collect();
    let mut first_store: HashMap<i64, Timestamp> = HashMap::new();
    let mut copies: HashMap<i64, u64> = HashMap::new();
    let mut unexpected = 0;
    let mut max_err: f64 = 0.0;
    for p in points {
        let key = p.timestamp.0;
        let Some(s) = by_key.get(&key) else {
            unexpected += 1;
            continue;
        };
        let got = p.value.as_f64().unwrap_or(f64::NAN);
        let err = (got - value_of(s.x)).abs();
        if !(err <= 1e-9) {
            unexpected += 1;
        }
        max_err = max_err.max(if err.is_nan() { f64::INFINITY } else { err });
        *copies.entry(key).or_default() += 1;
        let e = first_store.entry(key).or_insert(p.stored_at);
        if p.stored_at < *e {
            *e = p.stored_at;
        }
    }
    let stored = first_store.len() as u64;
    let acc = Accounting {
        sent: samples.len() as u64,
        stored,
        lost: samples.len() as u64 - stored,
        duplicates: copies.values().map(|c| c - 1).sum(),
        unexpected,
    };
    (acc, first_store, max_err)
}

fn secs(a: Timestamp, b: Timestamp) -> f64 {
    (b.0 - a.0) as f64 / 1e9
}

/// Largest gap between consecutive store times of messages sent at or after
/// `from`.
pub fn max_store_gap(samples: &[Sample], stored: &HashMap<i64, Timestamp>, from: Timestamp) -> f64 {
    let mut times: Vec<Timestamp> = samples
        .iter()
        .filter(|s| s.sent_at >= from)
        .filter_map(|s| stored.get(&s.sent_at.0).copied())
        .collect();
    times.sort();
    times.windows(2).map(|w| secs(w[0], w[1])).fold(0.0, f64::max)
}

/// Which path latency and gaps are measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Core,
    Ml,
}

/// Builds the repetition report from a finished, drained run.
pub fn measure(
    bed: &Testbed,
    cfg: &ScenarioConfig,
    samples: &[Sample],
    path: Path,
    gap_from: Timestamp,
) -> RepetitionReport {
    let mut rep = RepetitionReport {
        retried: samples.iter().filter(|s| s.attempts > 1).count() as u64,
        ..Default::default()
    };
    let mut stored_on_path = HashMap::new();
    if cfg.pipeline.core() {
        let (acc, stored, _) = reconcile(samples, &bed.core_points(), |x| x);
        rep.core = Some(acc);
        if path == Path::Core {
            stored_on_path = stored;
        }
    }
    if cfg.pipeline.ml() {
        let w = cfg.model_weight;
        let (acc, stored, err) = reconcile(samples, &bed.ml_points(), |x| w * x);
        rep.ml = Some(acc);
        rep.max_model_error = Some(err);
        if path == Path::Ml {
            stored_on_path = stored;
        }
    }
    rep.latencies_s = samples
        .iter()
        .filter_map(|s| stored_on_path.get(&s.sent_at.0).map(|t| secs(s.sent_at, *t)))
        .collect();
    rep.latency = LatencyStats::of(&rep.latencies_s);

    let mut per_client: BTreeMap<usize, (usize, Timestamp, Timestamp)> = BTreeMap::new();
    for s in samples {
        if let Some(t) = stored_on_path.get(&s.sent_at.0) {
            let e = per_client.entry(s.client).or_insert((0, s.sent_at, *t));
            e.0 += 1;
            e.1 = e.1.min(s.sent_at);
            e.2 = e.2.max(*t);
        }
    }
    let rates: Vec<f64> = per_client.values().map(|(n, a, b)| *n as f64 / secs(*a, *b).max(1e-9)).collect();
    rep.throughput_msg_s = if rates.is_empty() { 0.0 } else { mean(&rates) };
    let first = per_client.values().map(|v| v.1).min();
    let last = per_client.values().map(|v| v.2).max();
    rep.aggregate_throughput_msg_s = match (first, last) {
        (Some(a), Some(b)) => stored_on_path.len() as f64 / secs(a, b).max(1e-9),
        _ => 0.0,
    };
    rep.max_store_gap_s = max_store_gap(samples, &stored_on_path, gap_from);
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_keys_strictly_increase() {
        let keys = TimeKeys::default();
        let ts: Vec<Timestamp> = (0..1000).map(|_| keys.next()).collect();
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }

    fn point(ts: i64, v: f64, stored: i64) -> TimeSeriesPoint {
        TimeSeriesPoint {
            thing_id: sensor_id(0),
            feature: VALUE_FEATURE.into(),
            property: "value".into(),
            timestamp: Timestamp(ts),
            value: json!(v),
            tags: BTreeMap::from([("originator".to_string(), "gateway".to_string())]),
            stored_at: Timestamp(stored),
        }
    }

    #[test]
    fn reconciliation_counts() {
        let samples: Vec<Sample> = (1..=4)
            .map(|i| Sample { client: 0, sent_at: Timestamp(i), x: i as f64, attempts: 1 })
            .collect();
        let points = vec![point(1, 1.0, 10), point(2, 2.0, 20), point(2, 2.0, 25), point(9, 9.0, 30), point(3, 5.0, 40)];
        let (acc, stored, err) = reconcile(&samples, &points, |x| x);
        assert_eq!(acc, Accounting { sent: 4, stored: 3, lost: 1, duplicates: 1, unexpected: 2 });
        assert_eq!(acc.sent, acc.stored + acc.lost);
        assert_eq!(stored[&2], Timestamp(20));
        assert_eq!(err, 2.0);
        assert_eq!(max_store_gap(&samples, &stored, Timestamp(0)), 20e-9);
    }
}
