//! Device gateway: tenants, device credentials, payload mapping and
//! telemetry intake.
//!
//! Accepted messages are published to `telemetry/<tenant>` with a `device-id`
//! header and an `x-ts` time (the envelope's own `x-ts` if it has one, else
//! the receipt time). Payloads that cannot be mapped go to
//! `telemetry/<tenant>/dead-letter`.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::RwLock;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::bus::{Bus, BusError, Consumer, Headers, StartAt};
use crate::clock::SharedClock;
use crate::frame::SyncPolicy;
use crate::kv::{KvError, KvStore};
use crate::metrics::Metrics;
use crate::model::{parse_thing_id, validate_envelope, Envelope, ResourcePath, Timestamp, DEVICE_HEADER, TIMESTAMP_HEADER};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("unknown tenant `{0}`")]
    UnknownTenant(String),
    #[error("tenant `{0}` already exists")]
    DuplicateTenant(String),
    #[error("unknown device `{1}` in tenant `{0}`")]
    UnknownDevice(String, String),
    #[error("device `{1}` already registered in tenant `{0}`")]
    DuplicateDevice(String, String),
    #[error("username `{0}` is already taken in this tenant")]
    DuplicateUsername(String),
    #[error("authentication failed")]
    AuthFailed,
    #[error("mapping failed: {0}")]
    MappingFailed(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("gateway unavailable: {0}")]
    Unavailable(String),
}

impl From<KvError> for GatewayError {
    fn from(e: KvError) -> Self {
        GatewayError::Unavailable(e.to_string())
    }
}

impl From<BusError> for GatewayError {
    fn from(e: BusError) -> Self {
        GatewayError::Unavailable(e.to_string())
    }
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

pub fn telemetry_topic(tenant: &str) -> String {
    format!("telemetry/{tenant}")
}

pub fn dead_letter_topic(tenant: &str) -> String {
    format!("telemetry/{tenant}/dead-letter")
}

// ---------------------------------------------------------------------------
// Payload mapping

/// Copies the JSON value at `source` (a JSON pointer) to the resource path
/// `target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapRule {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PayloadMapper {
    #[serde(default)]
    pub rules: Vec<MapRule>,
}

impl PayloadMapper {
    pub fn validate(&self) -> Result<()> {
        for r in &self.rules {
            if !(r.source.is_empty() || r.source.starts_with('/')) {
                return Err(GatewayError::Invalid(format!("source `{}` is not a JSON pointer", r.source)));
            }
            match ResourcePath::parse(&r.target) {
                Ok(ResourcePath::Root) => {
                    return Err(GatewayError::Invalid("a rule cannot target `/`".into()));
                }
                Ok(_) => {}
                Err(e) => return Err(GatewayError::Invalid(e.to_string())),
            }
        }
        Ok(())
    }

    /// Builds a modify command for `thing` from a raw JSON payload. The
    /// envelope path is the deepest path shared by every matched target.
    pub fn map(&self, thing: &str, payload: &Value) -> Result<Envelope> {
        let thing = parse_thing_id(thing).map_err(|e| GatewayError::MappingFailed(e.to_string()))?;
        let mut hits: Vec<(Vec<String>, Value)> = Vec::new();
        for r in &self.rules {
            if let Some(v) = payload.pointer(&r.source) {
                let segs = r.target.trim_start_matches('/').split('/').map(str::to_string).collect();
                hits.push((segs, v.clone()));
            }
        }
        if hits.is_empty() {
            return Err(GatewayError::MappingFailed("no rule matched the payload".into()));
        }
        let mut prefix = hits[0].0.clone();
        for (segs, _) in &hits[1..] {
            let n = prefix.iter().zip(segs).take_while(|(a, b)| a == b).count();
            prefix.truncate(n);
        }
        // shorten until the prefix is a valid resource path
        loop {
            let p = format!("/{}", prefix.join("/"));
            if ResourcePath::parse(&p).is_ok() || prefix.is_empty() {
                break;
            }
            prefix.pop();
        }
        if hits.len() > 1 && hits.iter().any(|(s, _)| s.len() == prefix.len()) {
            return Err(GatewayError::MappingFailed("rule targets overlap".into()));
        }
        let value = if hits.len() == 1 && hits[0].0.len() == prefix.len() {
            hits.pop().expect("one hit").1
        } else {
            let mut root = Value::Object(Map::new());
            for (segs, v) in hits {
                let mut cur = &mut root;
                for s in &segs[prefix.len()..] {
                    if !cur.is_object() {
                        *cur = Value::Object(Map::new());
                    }
                    cur = cur.as_object_mut().expect("object").entry(s.clone()).or_insert(Value::Null);
                }
                *cur = v;
            }
            root
        };
        let env = Envelope::modify(&thing, &format!("/{}", prefix.join("/")), value);
        validate_envelope(&env).map_err(|e| GatewayError::MappingFailed(e.to_string()))?;
        Ok(env)
    }
}

// ---------------------------------------------------------------------------
// Tenants and devices

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Tenant {
    pub tenant_id: String,
    #[serde(default)]
    pub mapper: PayloadMapper,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeviceInfo {
    pub device_id: String,
    pub username: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredDevice {
    device_id: String,
    username: String,
    salt: String,
    hash: String,
}

fn hash_password(salt: &[u8], password: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(password.as_bytes());
    hex::encode(h.finalize())
}

fn check_id(kind: &str, id: &str) -> Result<()> {
    if id.is_empty() || id.contains('/') || id.chars().any(char::is_whitespace) {
        return Err(GatewayError::Invalid(format!("{kind} id `{id}` must be non-empty without `/` or whitespace")));
    }
    Ok(())
}

fn tenant_key(t: &str) -> String {
    format!("tenant/{t}")
}

fn device_key(t: &str, d: &str) -> String {
    format!("device/{t}/{d}")
}

pub struct Gateway {
    path: PathBuf,
    sync: SyncPolicy,
    bus: Arc<Bus>,
    clock: SharedClock,
    metrics: Arc<Metrics>,
    kv: RwLock<Option<Arc<KvStore>>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("path", &self.path).finish()
    }
}

impl Gateway {
    pub fn open(
        path: impl AsRef<Path>,
        sync: SyncPolicy,
        bus: Arc<Bus>,
        clock: SharedClock,
        metrics: Arc<Metrics>,
    ) -> Result<Arc<Self>> {
        let path = path.as_ref().to_path_buf();
        let kv = KvStore::open(&path, sync)?;
        Ok(Arc::new(Gateway { path, sync, bus, clock, metrics, kv: RwLock::new(Some(Arc::new(kv))) }))
    }

    fn kv(&self) -> Result<Arc<KvStore>> {
        self.kv.read().clone().ok_or_else(|| GatewayError::Unavailable("gateway is down".into()))
    }

    pub fn crash(&self) {
        self.kv.write().take();
    }

    pub fn recover(&self) -> Result<()> {
        let mut g = self.kv.write();
        if g.is_none() {
            *g = Some(Arc::new(KvStore::open(&self.path, self.sync)?));
        }
        Ok(())
    }

    pub fn is_up(&self) -> bool {
        self.kv.read().is_some()
    }

    pub fn create_tenant(&self, tenant: Tenant) -> Result<Tenant> {
        check_id("tenant", &tenant.tenant_id)?;
        tenant.mapper.validate()?;
        let kv = self.kv()?;
        if kv.get(&tenant_key(&tenant.tenant_id)).is_some() {
            return Err(GatewayError::DuplicateTenant(tenant.tenant_id));
        }
        kv.put(&tenant_key(&tenant.tenant_id), &tenant)?;
        self.bus.create_topic(&telemetry_topic(&tenant.tenant_id))?;
        Ok(tenant)
    }

    pub fn set_mapper(&self, tenant_id: &str, mapper: PayloadMapper) -> Result<Tenant> {
        mapper.validate()?;
        let mut t = self.get_tenant(tenant_id)?;
        t.mapper = mapper;
        self.kv()?.put(&tenant_key(tenant_id), &t)?;
        Ok(t)
    }

    pub fn get_tenant(&self, tenant_id: &str) -> Result<Tenant> {
        self.kv()?
            .get_as(&tenant_key(tenant_id))?
            .ok_or_else(|| GatewayError::UnknownTenant(tenant_id.to_string()))
    }

    pub fn list_tenants(&self) -> Result<Vec<Tenant>> {
        Ok(self.kv()?.scan_as::<Tenant>("tenant/")?.into_iter().map(|(_, t)| t).collect())
    }

    pub fn delete_tenant(&self, tenant_id: &str) -> Result<()> {
        let kv = self.kv()?;
        self.get_tenant(tenant_id)?;
        let mut batch: Vec<(String, Option<Value>)> = kv
            .scan(&format!("device/{tenant_id}/"))
            .into_iter()
            .map(|(k, _)| (k, None))
            .collect();
        batch.push((tenant_key(tenant_id), None));
        kv.write(batch)?;
        Ok(())
    }

    pub fn register_device(&self, tenant_id: &str, device_id: &str, creds: &Credentials) -> Result<DeviceInfo> {
        check_id("device", device_id)?;
        if creds.username.is_empty() {
            return Err(GatewayError::Invalid("username is empty".into()));
        }
        let kv = self.kv()?;
        self.get_tenant(tenant_id)?;
        if kv.get(&device_key(tenant_id, device_id)).is_some() {
            return Err(GatewayError::DuplicateDevice(tenant_id.into(), device_id.into()));
        }
        let taken = kv
            .scan_as::<StoredDevice>(&format!("device/{tenant_id}/"))?
            .into_iter()
            .any(|(_, d)| d.username == creds.username);
        if taken {
            return Err(GatewayError::DuplicateUsername(creds.username.clone()));
        }
        let mut salt = [0u8; 16];
        rand::rng().fill_bytes(&mut salt);
        let stored = StoredDevice {
            device_id: device_id.to_string(),
            username: creds.username.clone(),
            salt: hex::encode(salt),
            hash: hash_password(&salt, &creds.password),
        };
        kv.put(&device_key(tenant_id, device_id), &stored)?;
        Ok(DeviceInfo { device_id: stored.device_id, username: stored.username })
    }

    pub fn list_devices(&self, tenant_id: &str) -> Result<Vec<DeviceInfo>> {
        self.get_tenant(tenant_id)?;
        Ok(self
            .kv()?
            .scan_as::<StoredDevice>(&format!("device/{tenant_id}/"))?
            .into_iter()
            .map(|(_, d)| DeviceInfo { device_id: d.device_id, username: d.username })
            .collect())
    }

    pub fn delete_device(&self, tenant_id: &str, device_id: &str) -> Result<()> {
        let kv = self.kv()?;
        if kv.get(&device_key(tenant_id, device_id)).is_none() {
            return Err(GatewayError::UnknownDevice(tenant_id.into(), device_id.into()));
        }
        kv.delete(&device_key(tenant_id, device_id))?;
        Ok(())
    }

    fn authenticate(&self, kv: &KvStore, tenant_id: &str, device_id: &str, creds: &Credentials) -> Result<Tenant> {
        let tenant: Tenant = kv
            .get_as(&tenant_key(tenant_id))?
            .ok_or_else(|| GatewayError::UnknownTenant(tenant_id.to_string()))?;
        let stored: Option<StoredDevice> = kv.get_as(&device_key(tenant_id, device_id))?;
        let ok = stored.is_some_and(|d| {
            let salt = hex::decode(&d.salt).unwrap_or_default();
            d.username == creds.username && hash_password(&salt, &creds.password) == d.hash
        });
        if !ok {
            Metrics::inc(&self.metrics.auth_failed);
            return Err(GatewayError::AuthFailed);
        }
        Ok(tenant)
    }

    /// Authenticates, maps and publishes one message. Returns the telemetry
    /// offset.
    pub fn ingest(&self, tenant_id: &str, device_id: &str, creds: &Credentials, payload: &[u8]) -> Result<u64> {
        let kv = self.kv()?;
        let tenant = self.authenticate(&kv, tenant_id, device_id, creds)?;
        let mut headers = Headers::new();
        headers.insert(DEVICE_HEADER.into(), device_id.to_string());
        headers.insert(TIMESTAMP_HEADER.into(), self.clock.now().to_rfc3339());

        let mapped = match serde_json::from_slice::<Value>(payload) {
            Err(e) => Err(GatewayError::MappingFailed(format!("payload is not JSON: {e}"))),
            Ok(v) if v.get("topic").is_some() => match serde_json::from_value::<Envelope>(v) {
                Ok(env) => validate_envelope(&env)
                    .map(|_| (payload.to_vec(), env.headers.get(TIMESTAMP_HEADER).cloned()))
                    .map_err(|e| GatewayError::MappingFailed(e.to_string())),
                Err(e) => Err(GatewayError::MappingFailed(e.to_string())),
            },
            Ok(v) => tenant.mapper.map(device_id, &v).map(|e| (e.to_bytes(), None)),
        };
        match mapped {
            Ok((bytes, device_ts)) => {
                if let Some(ts) = device_ts.filter(|t| Timestamp::parse(t).is_ok()) {
                    headers.insert(TIMESTAMP_HEADER.into(), ts);
                }
                let off = self.bus.publish(&telemetry_topic(tenant_id), &headers, &bytes)?;
                Metrics::inc(&self.metrics.ingested);
                Ok(off)
            }
            Err(GatewayError::MappingFailed(reason)) => {
                headers.insert("x-reason".into(), reason.clone());
                self.bus.publish(&dead_letter_topic(tenant_id), &headers, payload)?;
                Metrics::inc(&self.metrics.dead_lettered);
                Err(GatewayError::MappingFailed(reason))
            }
            Err(e) => Err(e),
        }
    }

    /// Stream of telemetry published from now on.
    pub fn subscribe_telemetry(&self, tenant_id: &str) -> Result<Consumer> {
        self.get_tenant(tenant_id)?;
        Ok(self.bus.subscribe(&telemetry_topic(tenant_id), StartAt::Latest)?)
    }
}

// ---------------------------------------------------------------------------
// TCP intake

/// One request frame on the device socket.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestFrame {
    pub tenant: String,
    pub device: String,
    pub username: String,
    pub password: String,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReply {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
}

const MAX_TCP_FRAME: usize = 16 * 1024 * 1024;

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()
}

pub fn read_frame(r: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_TCP_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

/// Device socket listener. Each connection is served by its own thread and
/// its frames are handled in order.
pub struct TcpIngest {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl TcpIngest {
    pub fn start(gateway: Arc<Gateway>, addr: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::Builder::new().name("tcp-ingest".into()).spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let gw = gateway.clone();
                        let flag = flag.clone();
                        let _ = std::thread::Builder::new()
                            .name("tcp-conn".into())
                            .spawn(move || serve_conn(gw, stream, flag));
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    Err(e) => {
                        tracing::warn!(error = %e, "accept failed");
                        std::thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        })?;
        Ok(TcpIngest { addr, stop, handle: Some(handle) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpIngest {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_conn(gw: Arc<Gateway>, mut stream: TcpStream, stop: Arc<AtomicBool>) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
    loop {
        if stop.load(Ordering::Relaxed) {
            return;
        }
        let body = match read_frame(&mut stream) {
            Ok(b) => b,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(_) => return,
        };
        let reply = match serde_json::from_slice::<IngestFrame>(&body) {
            Ok(f) => {
                let creds = Credentials { username: f.username, password: f.password };
                let payload = serde_json::to_vec(&f.payload).expect("json");
                match gw.ingest(&f.tenant, &f.device, &creds, &payload) {
                    Ok(off) => IngestReply { ok: true, error: None, offset: Some(off) },
                    Err(e) => IngestReply { ok: false, error: Some(e.to_string()), offset: None },
                }
            }
            Err(e) => IngestReply { ok: false, error: Some(format!("bad frame: {e}")), offset: None },
        };
        let bytes = serde_json::to_vec(&reply).expect("json");
        if write_frame(&mut stream, &bytes).is_err() {
            return;
        }
    }
}

/// Blocking client for the device socket.
pub struct DeviceClient {
    stream: TcpStream,
}

impl DeviceClient {
    pub fn connect(addr: SocketAddr) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(10)))?;
        Ok(DeviceClient { stream })
    }

    pub fn send(&mut self, frame: &IngestFrame) -> io::Result<IngestReply> {
        write_frame(&mut self.stream, &serde_json::to_vec(frame).expect("json"))?;
        let body = read_frame(&mut self.stream)?;
        serde_json::from_slice(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}
