//! Time-series store and the event sink that feeds it.
//!
//! Each series `(thing, feature, property)` lives in its own append file of
//! framed JSON records; the first record names the series. Points are unique
//! per `(timestamp, originator)` within a series. The in-memory index is
//! rebuilt from the files on open.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bus::{Bus, Consumer, Record, StartAt};
use crate::clock::SharedClock;
use crate::frame::{self, SyncPolicy};
use crate::metrics::Metrics;
use crate::model::{
    feature_leaves, Action, Criterion, Envelope, ThingId, Timestamp, TIMESTAMP_HEADER,
};
use crate::worker::StopFlag;

pub const SINK_GROUP: &str = "timeseries-sink";
const UNKNOWN_ORIGINATOR: &str = "unknown";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TsError {
    #[error("time-series store unavailable: {0}")]
    Unavailable(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
}

impl From<std::io::Error> for TsError {
    fn from(e: std::io::Error) -> Self {
        TsError::Unavailable(e.to_string())
    }
}

pub type Result<T, E = TsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeriesKey {
    pub thing_id: ThingId,
    pub feature: String,
    pub property: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TimeSeriesPoint {
    pub thing_id: ThingId,
    pub feature: String,
    pub property: String,
    pub timestamp: Timestamp,
    pub value: Value,
    pub tags: BTreeMap<String, String>,
    /// When the point reached the store.
    pub stored_at: Timestamp,
}

impl TimeSeriesPoint {
    pub fn originator(&self) -> &str {
        self.tags.get("originator").map(String::as_str).unwrap_or(UNKNOWN_ORIGINATOR)
    }

    pub fn key(&self) -> SeriesKey {
        SeriesKey { thing_id: self.thing_id.clone(), feature: self.feature.clone(), property: self.property.clone() }
    }
}

/// Per-point record as written after the series header.
#[derive(Debug, Serialize, Deserialize)]
struct Row {
    ts: i64,
    v: Value,
    o: String,
    s: i64,
}

struct Series {
    file: File,
    points: Vec<TimeSeriesPoint>,
    seen: HashSet<(i64, String)>,
}

impl Series {
    fn insert_sorted(&mut self, p: TimeSeriesPoint) {
        let idx = self.points.partition_point(|q| q.timestamp <= p.timestamp);
        self.points.insert(idx, p);
    }
}

#[derive(Default)]
struct Inner {
    series: HashMap<SeriesKey, Series>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub thing: Option<ThingId>,
    pub feature: Option<String>,
    pub property: Option<String>,
    pub from: Option<Timestamp>,
    pub to: Option<Timestamp>,
    pub originator: Option<String>,
}

pub struct TsStore {
    dir: PathBuf,
    sync: SyncPolicy,
    inner: RwLock<Option<Inner>>,
}

impl std::fmt::Debug for TsStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TsStore").field("dir", &self.dir).finish()
    }
}

fn series_file(dir: &Path, key: &SeriesKey) -> PathBuf {
    let mut h = Sha256::new();
    h.update(key.thing_id.as_str().as_bytes());
    h.update([0]);
    h.update(key.feature.as_bytes());
    h.update([0]);
    h.update(key.property.as_bytes());
    dir.join(format!("{}.ts", hex::encode(&h.finalize()[..12])))
}

fn load(dir: &Path) -> Result<Inner> {
    std::fs::create_dir_all(dir)?;
    let mut inner = Inner::default();
    for entry in std::fs::read_dir(dir)?.flatten() {
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ts") {
            continue;
        }
        let (frames, valid) = frame::read_all(&path)?;
        if valid < entry.metadata()?.len() {
            OpenOptions::new().write(true).open(&path)?.set_len(valid)?;
        }
        let Some(head) = frames.first() else { continue };
        let Ok(key) = serde_json::from_slice::<SeriesKey>(&head.body) else {
            tracing::warn!(path = %path.display(), "skipping series with unreadable header");
            continue;
        };
        let mut s = Series { file: OpenOptions::new().append(true).open(&path)?, points: Vec::new(), seen: HashSet::new() };
        for f in &frames[1..] {
            let Ok(row) = serde_json::from_slice::<Row>(&f.body) else { continue };
            if !s.seen.insert((row.ts, row.o.clone())) {
                continue;
            }
            s.points.push(TimeSeriesPoint {
                thing_id: key.thing_id.clone(),
                feature: key.feature.clone(),
                property: key.property.clone(),
                timestamp: Timestamp(row.ts),
                value: row.v,
                tags: BTreeMap::from([("originator".to_string(), row.o)]),
                stored_at: Timestamp(row.s),
            });
        }
        s.points.sort_by_key(|p| p.timestamp);
        inner.series.insert(key, s);
    }
    Ok(inner)
}

impl TsStore {
    pub fn open(dir: impl AsRef<Path>, sync: SyncPolicy) -> Result<Arc<Self>> {
        let dir = dir.as_ref().to_path_buf();
        let inner = load(&dir)?;
        Ok(Arc::new(TsStore { dir, sync, inner: RwLock::new(Some(inner)) }))
    }

    fn down() -> TsError {
        TsError::Unavailable("time-series store is down".into())
    }

    pub fn crash(&self) {
        self.inner.write().take();
    }

    pub fn recover(&self) -> Result<()> {
        let mut g = self.inner.write();
        if g.is_none() {
            *g = Some(load(&self.dir)?);
        }
        Ok(())
    }

    pub fn is_up(&self) -> bool {
        self.inner.read().is_some()
    }

    /// Durably appends points, skipping any whose `(series, timestamp,
    /// originator)` already exists. Returns how many were new.
    pub fn write(&self, points: Vec<TimeSeriesPoint>) -> Result<usize> {
        let mut g = self.inner.write();
        let inner = g.as_mut().ok_or_else(Self::down)?;
        let mut by_series: BTreeMap<SeriesKey, Vec<TimeSeriesPoint>> = BTreeMap::new();
        let mut batch_seen = HashSet::new();
        for p in points {
            let dedup = (p.key(), p.timestamp.0, p.originator().to_string());
            let known = inner.series.get(&dedup.0).is_some_and(|s| s.seen.contains(&(dedup.1, dedup.2.clone())));
            if known || !batch_seen.insert(dedup) {
                continue;
            }
            by_series.entry(p.key()).or_default().push(p);
        }
        let mut added = 0;
        for (key, pts) in by_series {
            let mut bytes = Vec::new();
            if !inner.series.contains_key(&key) {
                let path = series_file(&self.dir, &key);
                let file = OpenOptions::new().create(true).append(true).open(&path)?;
                if file.metadata()?.len() == 0 {
                    bytes.extend(frame::encode(&serde_json::to_vec(&key).expect("json")));
                }
                inner.series.insert(key.clone(), Series { file, points: Vec::new(), seen: HashSet::new() });
            }
            for p in &pts {
                let row = Row { ts: p.timestamp.0, v: p.value.clone(), o: p.originator().to_string(), s: p.stored_at.0 };
                bytes.extend(frame::encode(&serde_json::to_vec(&row).expect("json")));
            }
            let s = inner.series.get_mut(&key).expect("inserted");
            frame::write_frames(&mut s.file, &bytes, self.sync)?;
            for p in pts {
                s.seen.insert((p.timestamp.0, p.originator().to_string()));
                s.insert_sorted(p);
                added += 1;
            }
        }
        Ok(added)
    }

    /// Points matching `q`, ascending by timestamp.
    pub fn query(&self, q: &Query) -> Result<Vec<TimeSeriesPoint>> {
        if let (Some(a), Some(b)) = (q.from, q.to) {
            if a > b {
                return Err(TsError::InvalidQuery("from is after to".into()));
            }
        }
        let g = self.inner.read();
        let inner = g.as_ref().ok_or_else(Self::down)?;
        let mut out = Vec::new();
        for (key, s) in &inner.series {
            if q.thing.as_ref().is_some_and(|t| *t != key.thing_id)
                || q.feature.as_ref().is_some_and(|f| *f != key.feature)
                || q.property.as_ref().is_some_and(|p| *p != key.property)
            {
                continue;
            }
            let lo = q.from.map(|f| s.points.partition_point(|p| p.timestamp < f)).unwrap_or(0);
            let hi = q.to.map(|t| s.points.partition_point(|p| p.timestamp <= t)).unwrap_or(s.points.len());
            out.extend(
                s.points[lo..hi.max(lo)]
                    .iter()
                    .filter(|p| q.originator.as_deref().is_none_or(|o| p.originator() == o))
                    .cloned(),
            );
        }
        out.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.key().cmp(&b.key())));
        Ok(out)
    }

    pub fn series(&self) -> Result<Vec<SeriesKey>> {
        let g = self.inner.read();
        let mut keys: Vec<SeriesKey> = g.as_ref().ok_or_else(Self::down)?.series.keys().cloned().collect();
        keys.sort();
        Ok(keys)
    }

    pub fn count(&self) -> Result<usize> {
        let g = self.inner.read();
        Ok(g.as_ref().ok_or_else(Self::down)?.series.values().map(|s| s.points.len()).sum())
    }
}

pub fn to_jsonl(points: &[TimeSeriesPoint]) -> String {
    let mut out = String::new();
    for p in points {
        out.push_str(&serde_json::to_string(p).expect("json"));
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn to_csv(points: &[TimeSeriesPoint]) -> String {
    let mut out = String::from("thing_id,feature,property,timestamp,value,originator\n");
    for p in points {
        let value = match &p.value {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(p.thing_id.as_str()),
            csv_field(&p.feature),
            csv_field(&p.property),
            p.timestamp.to_rfc3339(),
            csv_field(&value),
            csv_field(p.originator())
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Sink

/// Decomposes one twin event into points. `None` for malformed events;
/// deletions yield no points.
pub fn event_points(rec: &Record, now: Timestamp) -> Option<Vec<TimeSeriesPoint>> {
    let env = Envelope::from_bytes(&rec.payload).ok()?;
    let topic = env.topic_path().ok()?;
    if topic.criterion != Criterion::Events {
        return None;
    }
    let path = env.resource_path().ok()?;
    if topic.action == Action::Delete {
        return Some(Vec::new());
    }
    let ts = match env.headers.get(TIMESTAMP_HEADER) {
        Some(t) => Timestamp::parse(t).ok()?,
        None => now,
    };
    let originator = env.originator().unwrap_or(UNKNOWN_ORIGINATOR).to_string();
    Some(
        feature_leaves(&path, &env.value)
            .into_iter()
            .filter(|l| !l.value.is_null() && !l.value.is_array() && !l.value.is_object())
            .map(|l| TimeSeriesPoint {
                thing_id: topic.thing.clone(),
                feature: l.feature,
                property: l.property,
                timestamp: ts,
                value: l.value,
                tags: BTreeMap::from([("originator".to_string(), originator.clone())]),
                stored_at: now,
            })
            .collect(),
    )
}

/// Consumes twin events and writes their leaves to the store, committing the
/// group offset only after the write.
pub struct Sink {
    pub bus: Arc<Bus>,
    pub store: Arc<TsStore>,
    pub topic: String,
    pub clock: SharedClock,
    pub metrics: Arc<Metrics>,
}

impl Sink {
    pub fn run(&self, stop: StopFlag) {
        let mut consumer: Option<Consumer> = None;
        while !stop.is_set() {
            let c = match consumer.as_mut() {
                Some(c) => c,
                None => match self.bus.subscribe(&self.topic, StartAt::Committed(SINK_GROUP.into())) {
                    Ok(c) => consumer.insert(c),
                    Err(_) => {
                        stop.sleep(Duration::from_millis(20));
                        continue;
                    }
                },
            };
            match self.step(c) {
                Ok(_) => {}
                Err(StepError::Bus) => {
                    consumer = None;
                    stop.sleep(Duration::from_millis(20));
                }
                Err(StepError::Store) => {
                    let _ = c.rewind_to_committed();
                    stop.sleep(Duration::from_millis(20));
                }
            }
        }
    }

    fn step(&self, c: &mut Consumer) -> Result<usize, StepError> {
        let Some(first) = c.poll(Duration::from_millis(50)).map_err(|_| StepError::Bus)? else {
            return Ok(0);
        };
        let mut records = vec![first];
        while records.len() < 512 {
            match c.poll(Duration::ZERO).map_err(|_| StepError::Bus)? {
                Some(r) => records.push(r),
                None => break,
            }
        }
        let now = self.clock.now();
        let mut points = Vec::new();
        for r in &records {
            match event_points(r, now) {
                Some(p) => points.extend(p),
                None => Metrics::inc(&self.metrics.malformed_events),
            }
        }
        let added = self.store.write(points).map_err(|_| StepError::Store)?;
        Metrics::add(&self.metrics.stored, added as u64);
        let next = records.last().expect("non-empty").offset + 1;
        c.commit(next).map_err(|_| StepError::Bus)?;
        Ok(added)
    }
}

enum StepError {
    Bus,
    Store,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::{BusOptions, Headers};
    use crate::model::{parse_thing_id, ORIGINATOR_HEADER};
    use crate::worker::Worker;
    use serde_json::json;

    fn point(t: i64, origin: &str) -> TimeSeriesPoint {
        TimeSeriesPoint {
            thing_id: parse_thing_id("test:DHT22").unwrap(),
            feature: "temperature".into(),
            property: "value".into(),
            timestamp: Timestamp(t),
            value: json!(t as f64),
            tags: BTreeMap::from([("originator".to_string(), origin.to_string())]),
            stored_at: Timestamp(t),
        }
    }

    #[test]
    fn range_query_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let s = TsStore::open(dir.path(), SyncPolicy::Os).unwrap();
        assert!(s.query(&Query::default()).unwrap().is_empty());
        assert_eq!(s.write(vec![point(3, "gateway"), point(1, "gateway"), point(2, "gateway")]).unwrap(), 3);
        assert_eq!(s.write(vec![point(2, "gateway"), point(2, "ml-bridge")]).unwrap(), 1);
        let q = Query { from: Some(Timestamp(2)), to: Some(Timestamp(3)), ..Default::default() };
        let got: Vec<i64> = s.query(&q).unwrap().iter().map(|p| p.timestamp.0).collect();
        assert_eq!(got, vec![2, 2, 3]);
        let q = Query { originator: Some("ml-bridge".into()), ..Default::default() };
        assert_eq!(s.query(&q).unwrap().len(), 1);
        let bad = Query { from: Some(Timestamp(5)), to: Some(Timestamp(1)), ..Default::default() };
        assert!(s.query(&bad).is_err());
    }

    #[test]
    fn survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = TsStore::open(dir.path(), SyncPolicy::Os).unwrap();
            s.write(vec![point(1, "gateway"), point(2, "gateway")]).unwrap();
        }
        let s = TsStore::open(dir.path(), SyncPolicy::Os).unwrap();
        assert_eq!(s.count().unwrap(), 2);
        assert_eq!(s.write(vec![point(1, "gateway")]).unwrap(), 0);
        s.crash();
        assert!(s.query(&Query::default()).is_err());
        s.recover().unwrap();
        assert_eq!(s.count().unwrap(), 2);
    }

    #[test]
    fn decomposes_events() {
        let id = parse_thing_id("test:DHT22").unwrap();
        let env = Envelope::new(
            &id,
            Criterion::Events,
            Action::Modify,
            "/features",
            json!({"temperature": {"properties": {"value": 2}}, "humidity": {"properties": {"value": 5, "unit": null}}}),
        )
        .with_header(ORIGINATOR_HEADER, "ml-bridge")
        .with_header(TIMESTAMP_HEADER, "2024-01-02T00:00:00Z");
        let rec = Record { offset: 0, timestamp: Timestamp(0), headers: Headers::new(), payload: env.to_bytes() };
        let pts = event_points(&rec, Timestamp(9)).unwrap();
        assert_eq!(pts.len(), 2);
        assert!(pts.iter().all(|p| p.originator() == "ml-bridge"));
        assert_eq!(pts[0].timestamp, Timestamp::parse("2024-01-02T00:00:00Z").unwrap());
        let junk = Record { payload: b"nope".to_vec(), ..rec };
        assert!(event_points(&junk, Timestamp(9)).is_none());
    }

    #[test]
    fn sink_commits_after_write_and_counts_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let bus = Bus::open(dir.path().join("bus"), BusOptions::default()).unwrap();
        let store = TsStore::open(dir.path().join("ts"), SyncPolicy::Os).unwrap();
        let metrics = Arc::new(Metrics::default());
        let id = parse_thing_id("test:s").unwrap();
        for i in 0..10 {
            let e = Envelope::new(&id, Criterion::Events, Action::Modify, "/features/f/properties/value", json!(i))
                .with_header(ORIGINATOR_HEADER, "gateway")
                .with_header(TIMESTAMP_HEADER, Timestamp(i).to_rfc3339());
            bus.publish("ev", &Headers::new(), &e.to_bytes()).unwrap();
        }
        bus.publish("ev", &Headers::new(), b"garbage").unwrap();
        let sink = Sink {
            bus: bus.clone(),
            store: store.clone(),
            topic: "ev".into(),
            clock: crate::clock::system(),
            metrics: metrics.clone(),
        };
        let mut w = Worker::spawn("sink", move |stop| sink.run(stop));
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        while bus.committed("ev", SINK_GROUP).unwrap() < 11 && std::time::Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(10));
        }
        w.stop();
        assert_eq!(store.count().unwrap(), 10);
        assert_eq!(metrics.get("malformed_events"), Some(1));
        assert_eq!(metrics.get("stored"), Some(10));
    }

    #[test]
    fn exports() {
        let pts = vec![point(1_000_000_000, "gateway")];
        let csv = to_csv(&pts);
        assert_eq!(csv.lines().nth(1).unwrap(), "test:DHT22,temperature,value,1970-01-01T00:00:01.000000000Z,1000000000.0,gateway");
        assert_eq!(to_jsonl(&pts).lines().count(), 1);
    }
}
