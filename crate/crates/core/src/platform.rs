//! Wires every service over one data directory.
//!
//! ```text
//! <data>/bus/              topics and queues
//! <data>/registry.kv       twins, types, policies, event outbox
//! <data>/gateway.kv        tenants, devices, mappers
//! <data>/ts/               time-series points
//! <data>/watchdog.kv       watchdog tenants and devices
//! <data>/ml.kv             model deployments
//! <data>/bridges.kv        forwarders and prediction routes
//! <data>/connections.kv    telemetry connections
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::bridges::{BridgeError, Bridges};
use crate::bus::{Bus, BusError, BusOptions};
use crate::clock::{system, SharedClock};
use crate::connection::{ConnectionError, Connections};
use crate::frame::SyncPolicy;
use crate::gateway::{Gateway, GatewayError};
use crate::metrics::Metrics;
use crate::mlrt::{MlError, MlRuntime};
use crate::registry::{Registry, RegistryConfig, RegistryError};
use crate::timeseries::{Sink, TsError, TsStore};
use crate::watchdog::{Watchdog, WatchdogError};
use crate::worker::Worker;

#[derive(Debug, thiserror::Error)]
pub enum PlatformError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Timeseries(#[from] TsError),
    #[error(transparent)]
    Watchdog(#[from] WatchdogError),
    #[error(transparent)]
    Ml(#[from] MlError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Connection(#[from] ConnectionError),
    #[error("unknown service `{0}`")]
    UnknownService(String),
}

pub type Result<T, E = PlatformError> = std::result::Result<T, E>;

/// Services that can be killed and restarted independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Service {
    Gateway,
    Registry,
    Bus,
    TimeseriesSink,
    RouteConsumer,
}

impl Service {
    pub const ALL: [Service; 5] =
        [Service::Gateway, Service::Registry, Service::Bus, Service::TimeseriesSink, Service::RouteConsumer];

    pub fn as_str(self) -> &'static str {
        match self {
            Service::Gateway => "gateway",
            Service::Registry => "registry",
            Service::Bus => "bus",
            Service::TimeseriesSink => "timeseries-sink",
            Service::RouteConsumer => "route-consumer",
        }
    }
}

impl std::str::FromStr for Service {
    type Err = PlatformError;

    fn from_str(s: &str) -> Result<Self> {
        Service::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| PlatformError::UnknownService(s.to_string()))
    }
}

#[derive(Clone)]
pub struct PlatformOptions {
    pub sync: SyncPolicy,
    pub segment_bytes: u64,
    pub events_topic: String,
    pub clock: SharedClock,
}

impl std::fmt::Debug for PlatformOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlatformOptions")
            .field("sync", &self.sync)
            .field("segment_bytes", &self.segment_bytes)
            .field("events_topic", &self.events_topic)
            .finish()
    }
}

impl Default for PlatformOptions {
    fn default() -> Self {
        let bus = BusOptions::default();
        PlatformOptions {
            sync: bus.sync,
            segment_bytes: bus.segment_bytes,
            events_topic: RegistryConfig::default().events_topic,
            clock: system(),
        }
    }
}

pub struct Platform {
    pub data_dir: PathBuf,
    pub clock: SharedClock,
    pub metrics: Arc<Metrics>,
    pub bus: Arc<Bus>,
    pub registry: Arc<Registry>,
    pub gateway: Arc<Gateway>,
    pub ts: Arc<TsStore>,
    pub watchdog: Arc<Watchdog>,
    pub ml: Arc<MlRuntime>,
    pub bridges: Arc<Bridges>,
    pub connections: Arc<Connections>,
    sink: Mutex<Option<Worker>>,
    outbox: Mutex<Option<Worker>>,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform").field("data_dir", &self.data_dir).finish()
    }
}

impl Platform {
    /// Opens all stores. Nothing runs until [`Platform::start`].
    pub fn open(data_dir: impl AsRef<Path>, opts: PlatformOptions) -> Result<Arc<Self>> {
        let dir = data_dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| BusError::Unavailable(e.to_string()))?;
        let metrics = Arc::new(Metrics::default());
        let clock = opts.clock.clone();
        let bus = Bus::open(dir.join("bus"), BusOptions { sync: opts.sync, segment_bytes: opts.segment_bytes })?;
        let registry = Registry::open(
            dir.join("registry.kv"),
            RegistryConfig { events_topic: opts.events_topic.clone(), sync: opts.sync },
            bus.clone(),
            clock.clone(),
        )?;
        let gateway = Gateway::open(dir.join("gateway.kv"), opts.sync, bus.clone(), clock.clone(), metrics.clone())?;
        let ts = TsStore::open(dir.join("ts"), opts.sync)?;
        let watchdog = Watchdog::open(dir.join("watchdog.kv"), opts.sync, bus.clone(), clock.clone(), metrics.clone())?;
        let ml = MlRuntime::open(dir.join("ml.kv"), opts.sync, bus.clone(), metrics.clone())?;
        let bridges = Bridges::open(dir.join("bridges.kv"), opts.sync, bus.clone(), registry.clone(), metrics.clone())?;
        let connections =
            Connections::open(dir.join("connections.kv"), opts.sync, bus.clone(), registry.clone(), metrics.clone())?;
        Ok(Arc::new(Platform {
            data_dir: dir,
            clock,
            metrics,
            bus,
            registry,
            gateway,
            ts,
            watchdog,
            ml,
            bridges,
            connections,
            sink: Mutex::new(None),
            outbox: Mutex::new(None),
        }))
    }

    /// Starts every background worker.
    pub fn start(&self) {
        self.start_outbox();
        self.start_sink();
        self.connections.start();
        self.ml.start();
        self.bridges.start();
        self.watchdog.start();
    }

    pub fn shutdown(&self) {
        self.watchdog.shutdown();
        self.bridges.shutdown();
        self.ml.shutdown();
        self.connections.shutdown();
        self.sink.lock().take();
        self.outbox.lock().take();
        self.registry.flush_outbox();
    }

    fn start_sink(&self) {
        let mut g = self.sink.lock();
        if g.is_none() {
            let sink = Sink {
                bus: self.bus.clone(),
                store: self.ts.clone(),
                topic: self.registry.events_topic().to_string(),
                clock: self.clock.clone(),
                metrics: self.metrics.clone(),
            };
            *g = Some(Worker::spawn("timeseries-sink", move |stop| sink.run(stop)));
        }
    }

    /// Retries unpublished registry events.
    fn start_outbox(&self) {
        let mut g = self.outbox.lock();
        if g.is_none() {
            let reg = self.registry.clone();
            *g = Some(Worker::spawn("registry-outbox", move |stop| {
                while !stop.sleep(Duration::from_millis(50)) {
                    if reg.is_up() && reg.pending_events() > 0 {
                        reg.flush_outbox();
                    }
                }
            }));
        }
    }

    /// Simulates an abrupt failure of one service.
    pub fn kill(&self, service: Service) {
        match service {
            Service::Gateway => self.gateway.crash(),
            Service::Registry => self.registry.crash(),
            Service::Bus => self.bus.crash(),
            Service::TimeseriesSink => {
                self.sink.lock().take();
                self.ts.crash();
            }
            Service::RouteConsumer => self.bridges.set_route_consumers(false),
        }
        tracing::warn!(service = service.as_str(), "service killed");
    }

    /// Brings a killed service back from its persisted state.
    pub fn restart(&self, service: Service) -> Result<()> {
        match service {
            Service::Gateway => self.gateway.recover()?,
            Service::Registry => self.registry.recover()?,
            Service::Bus => self.bus.recover(),
            Service::TimeseriesSink => {
                self.ts.recover()?;
                self.start_sink();
            }
            Service::RouteConsumer => self.bridges.set_route_consumers(true),
        }
        Metrics::inc(&self.metrics.recovery_events);
        tracing::info!(service = service.as_str(), "service restarted");
        Ok(())
    }

    pub fn health(&self) -> BTreeMap<&'static str, bool> {
        BTreeMap::from([
            (Service::Gateway.as_str(), self.gateway.is_up()),
            (Service::Registry.as_str(), self.registry.is_up()),
            (Service::Bus.as_str(), self.bus.is_up()),
            (Service::TimeseriesSink.as_str(), self.ts.is_up() && self.sink.lock().is_some()),
            (Service::RouteConsumer.as_str(), self.bridges.route_consumers_enabled()),
        ])
    }
}

impl Drop for Platform {
    fn drop(&mut self) {
        self.shutdown();
    }
}
