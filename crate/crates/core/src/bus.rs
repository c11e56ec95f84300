//! Durable pub-sub substrate: append-only single-partition topics with
//! committed consumer-group offsets, and durable work queues with
//! acknowledgement.
//!
//! Layout under the bus root (names escaped with [`frame::encode_name`]):
//!
//! ```text
//! topics/<topic>/<base-offset:020>.seg     segment files of framed records
//! topics/<topic>/groups/<group>.off        committed offsets, one frame per commit
//! queues/<queue>/<base-offset:020>.seg     enqueued messages
//! queues/<queue>/acks                      acknowledged message ids
//! ```
//!
//! See `docs/bus-format.md` for the byte layout.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::frame::{self, SyncPolicy, FRAME_HEADER_LEN};
use crate::model::Timestamp;

pub type Headers = BTreeMap<String, String>;

const FETCH_BATCH: usize = 256;
const GROUP_REWRITE_EVERY: u64 = 4096;

#[derive(Debug, Clone, thiserror::Error)]
pub enum BusError {
    #[error("bus unavailable: {0}")]
    Unavailable(String),
    #[error("invalid name `{0}`")]
    InvalidName(String),
}

impl From<io::Error> for BusError {
    fn from(e: io::Error) -> Self {
        BusError::Unavailable(e.to_string())
    }
}

pub type Result<T, E = BusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BusOptions {
    #[serde(default)]
    pub sync: SyncPolicy,
    #[serde(default = "default_segment_bytes")]
    pub segment_bytes: u64,
}

fn default_segment_bytes() -> u64 {
    8 * 1024 * 1024
}

impl Default for BusOptions {
    fn default() -> Self {
        BusOptions { sync: SyncPolicy::Os, segment_bytes: default_segment_bytes() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub offset: u64,
    pub timestamp: Timestamp,
    pub headers: Headers,
    pub payload: Vec<u8>,
}

fn encode_record(offset: u64, timestamp: Timestamp, headers: &Headers, payload: &[u8]) -> Vec<u8> {
    let mut body = Vec::with_capacity(18 + payload.len() + headers.len() * 32);
    body.extend_from_slice(&offset.to_le_bytes());
    body.extend_from_slice(&timestamp.0.to_le_bytes());
    body.extend_from_slice(&(headers.len() as u16).to_le_bytes());
    for (k, v) in headers {
        body.extend_from_slice(&(k.len() as u16).to_le_bytes());
        body.extend_from_slice(k.as_bytes());
        body.extend_from_slice(&(v.len() as u32).to_le_bytes());
        body.extend_from_slice(v.as_bytes());
    }
    body.extend_from_slice(payload);
    body
}

fn decode_record(body: &[u8]) -> io::Result<Record> {
    let bad = || io::Error::new(io::ErrorKind::InvalidData, "malformed bus record");
    let mut cur = body;
    let mut take = |n: usize| -> io::Result<&[u8]> {
        if cur.len() < n {
            return Err(bad());
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    let offset = u64::from_le_bytes(take(8)?.try_into().map_err(|_| bad())?);
    let ts = i64::from_le_bytes(take(8)?.try_into().map_err(|_| bad())?);
    let count = u16::from_le_bytes(take(2)?.try_into().map_err(|_| bad())?);
    let mut headers = Headers::new();
    for _ in 0..count {
        let klen = u16::from_le_bytes(take(2)?.try_into().map_err(|_| bad())?) as usize;
        let k = String::from_utf8(take(klen)?.to_vec()).map_err(|_| bad())?;
        let vlen = u32::from_le_bytes(take(4)?.try_into().map_err(|_| bad())?) as usize;
        let v = String::from_utf8(take(vlen)?.to_vec()).map_err(|_| bad())?;
        headers.insert(k, v);
    }
    let payload = cur.to_vec();
    Ok(Record { offset, timestamp: Timestamp(ts), headers, payload })
}

// ---------------------------------------------------------------------------
// Segment log

struct Segment {
    reader: File,
    len: u64,
}

#[derive(Clone, Copy)]
struct Loc {
    segment: u32,
    pos: u64,
    len: u32,
}

/// Contiguous offset log split into segment files.
struct SegmentLog {
    dir: PathBuf,
    opts: BusOptions,
    segments: Vec<Segment>,
    writer: File,
    index: Vec<Loc>,
}

fn segment_path(dir: &Path, base: u64) -> PathBuf {
    dir.join(format!("{base:020}.seg"))
}

impl SegmentLog {
    fn open(dir: &Path, opts: BusOptions) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut bases: Vec<u64> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".seg")?.parse().ok()
            })
            .collect();
        bases.sort_unstable();
        if bases.is_empty() {
            File::create(segment_path(dir, 0))?;
            bases.push(0);
        }

        let mut segments = Vec::new();
        let mut index = Vec::new();
        let last = bases.len() - 1;
        for (i, base) in bases.iter().enumerate() {
            let path = segment_path(dir, *base);
            let (frames, valid) = frame::read_all(&path)?;
            let on_disk = std::fs::metadata(&path)?.len();
            if valid < on_disk {
                if i != last {
                    return Err(io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!("corrupt sealed segment {}", path.display()),
                    ));
                }
                tracing::warn!(path = %path.display(), valid, on_disk, "truncating torn segment tail");
                OpenOptions::new().write(true).open(&path)?.set_len(valid)?;
            }
            for f in frames {
                let offset = u64::from_le_bytes(
                    f.body.get(..8).and_then(|b| b.try_into().ok()).unwrap_or([0xFF; 8]),
                );
                if offset != index.len() as u64 {
                    return Err(io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!("offset gap in {}: expected {}, found {offset}", path.display(), index.len()),
                    ));
                }
                index.push(Loc {
                    segment: i as u32,
                    pos: f.pos + FRAME_HEADER_LEN as u64,
                    len: f.body.len() as u32,
                });
            }
            segments.push(Segment { reader: File::open(&path)?, len: valid });
        }
        let writer = OpenOptions::new().append(true).open(segment_path(dir, bases[last]))?;
        Ok(SegmentLog { dir: dir.to_path_buf(), opts, segments, writer, index })
    }

    fn next_offset(&self) -> u64 {
        self.index.len() as u64
    }

    fn append(&mut self, timestamp: Timestamp, headers: &Headers, payload: &[u8]) -> io::Result<u64> {
        let offset = self.next_offset();
        if self.segments.last().is_some_and(|s| s.len >= self.opts.segment_bytes) {
            let path = segment_path(&self.dir, offset);
            self.writer = OpenOptions::new().create(true).append(true).open(&path)?;
            self.segments.push(Segment { reader: File::open(&path)?, len: 0 });
        }
        let body = encode_record(offset, timestamp, headers, payload);
        let bytes = frame::encode(&body);
        frame::write_frames(&mut self.writer, &bytes, self.opts.sync)?;
        let seg_idx = self.segments.len() - 1;
        let seg = &mut self.segments[seg_idx];
        self.index.push(Loc {
            segment: seg_idx as u32,
            pos: seg.len + FRAME_HEADER_LEN as u64,
            len: body.len() as u32,
        });
        seg.len += bytes.len() as u64;
        Ok(offset)
    }

    fn read(&self, offset: u64) -> io::Result<Record> {
        let loc = self
            .index
            .get(offset as usize)
            .copied()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("offset {offset}")))?;
        let mut buf = vec![0u8; loc.len as usize];
        self.segments[loc.segment as usize].reader.read_exact_at(&mut buf, loc.pos)?;
        decode_record(&buf)
    }
}

// ---------------------------------------------------------------------------
// Topics

struct GroupFile {
    path: PathBuf,
    file: File,
    committed: u64,
    writes: u64,
}

impl GroupFile {
    fn open(path: PathBuf) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let (frames, _) = frame::read_all(&path)?;
        let committed = frames
            .iter()
            .rev()
            .find_map(|f| f.body.as_slice().try_into().ok().map(u64::from_le_bytes))
            .unwrap_or(0);
        let writes = frames.len() as u64;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(GroupFile { path, file, committed, writes })
    }

    fn commit(&mut self, next: u64, sync: SyncPolicy) -> io::Result<()> {
        let bytes = frame::encode(&next.to_le_bytes());
        if self.writes >= GROUP_REWRITE_EVERY {
            frame::write_atomic(&self.path, &bytes, sync)?;
            self.file = OpenOptions::new().append(true).open(&self.path)?;
            self.writes = 1;
        } else {
            frame::write_frames(&mut self.file, &bytes, sync)?;
            self.writes += 1;
        }
        self.committed = next;
        Ok(())
    }
}

struct TopicState {
    log: SegmentLog,
    groups: HashMap<String, GroupFile>,
    dead: bool,
}

struct TopicLog {
    name: String,
    dir: PathBuf,
    state: Mutex<TopicState>,
    cond: Condvar,
}

impl TopicLog {
    fn open(name: &str, dir: PathBuf, opts: BusOptions) -> io::Result<Self> {
        let log = SegmentLog::open(&dir, opts)?;
        Ok(TopicLog {
            name: name.to_string(),
            dir,
            state: Mutex::new(TopicState { log, groups: HashMap::new(), dead: false }),
            cond: Condvar::new(),
        })
    }

    fn group<'a>(&self, state: &'a mut TopicState, group: &str) -> io::Result<&'a mut GroupFile> {
        if !state.groups.contains_key(group) {
            let path = self.dir.join("groups").join(format!("{}.off", frame::encode_name(group)));
            state.groups.insert(group.to_string(), GroupFile::open(path)?);
        }
        Ok(state.groups.get_mut(group).expect("inserted above"))
    }
}

// ---------------------------------------------------------------------------
// Queues

struct QueueState {
    log: SegmentLog,
    acks: File,
    pending: BTreeSet<u64>,
    inflight: HashSet<u64>,
    delivered: HashSet<u64>,
    acked: u64,
    dead: bool,
}

struct QueueLog {
    name: String,
    state: Mutex<QueueState>,
    cond: Condvar,
}

impl QueueLog {
    fn open(name: &str, dir: &Path, opts: BusOptions) -> io::Result<Self> {
        let log = SegmentLog::open(dir, opts)?;
        let acks_path = dir.join("acks");
        let (frames, valid) = frame::read_all(&acks_path)?;
        if acks_path.exists() && valid < std::fs::metadata(&acks_path)?.len() {
            OpenOptions::new().write(true).open(&acks_path)?.set_len(valid)?;
        }
        let acked: HashSet<u64> = frames
            .iter()
            .filter_map(|f| f.body.as_slice().try_into().ok().map(u64::from_le_bytes))
            .collect();
        let pending = (0..log.next_offset()).filter(|o| !acked.contains(o)).collect();
        let acks = OpenOptions::new().create(true).append(true).open(&acks_path)?;
        Ok(QueueLog {
            name: name.to_string(),
            state: Mutex::new(QueueState {
                log,
                acks,
                pending,
                inflight: HashSet::new(),
                delivered: HashSet::new(),
                acked: acked.len() as u64,
                dead: false,
            }),
            cond: Condvar::new(),
        })
    }
}

/// A dequeued message. Dropping it without [`Delivery::ack`] returns the
/// message to the front of the queue.
pub struct Delivery {
    queue: Arc<QueueLog>,
    pub id: u64,
    pub headers: Headers,
    pub payload: Vec<u8>,
    pub redelivered: bool,
    settled: bool,
}

impl std::fmt::Debug for Delivery {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Delivery").field("queue", &self.queue.name).field("id", &self.id).finish()
    }
}

impl Delivery {
    pub fn ack(mut self) -> Result<()> {
        let mut st = self.queue.state.lock();
        if st.dead {
            return Err(BusError::Unavailable(format!("queue `{}` is down", self.queue.name)));
        }
        let sync = st.log.opts.sync;
        frame::write_frames(&mut st.acks, &frame::encode(&self.id.to_le_bytes()), sync)?;
        st.inflight.remove(&self.id);
        st.acked += 1;
        self.settled = true;
        Ok(())
    }

    pub fn nack(self) {
        // Drop requeues.
    }
}

impl Drop for Delivery {
    fn drop(&mut self) {
        if self.settled {
            return;
        }
        let mut st = self.queue.state.lock();
        if st.dead {
            return;
        }
        if st.inflight.remove(&self.id) {
            st.pending.insert(self.id);
            self.queue.cond.notify_one();
        }
    }
}

// ---------------------------------------------------------------------------
// Bus

#[derive(Default)]
struct Maps {
    topics: HashMap<String, Arc<TopicLog>>,
    queues: HashMap<String, Arc<QueueLog>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase")]
pub struct TopicInfo {
    pub name: String,
    pub next_offset: u64,
    pub groups: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase")]
pub struct QueueInfo {
    pub name: String,
    pub total: u64,
    pub pending: u64,
    pub inflight: u64,
}

pub struct Bus {
    root: PathBuf,
    opts: BusOptions,
    maps: RwLock<Option<Maps>>,
}

impl std::fmt::Debug for Bus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Bus").field("root", &self.root).finish()
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.len() > 200 {
        return Err(BusError::InvalidName(name.to_string()));
    }
    Ok(())
}

impl Bus {
    pub fn open(root: impl AsRef<Path>, opts: BusOptions) -> Result<Arc<Self>> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(root.join("topics"))?;
        std::fs::create_dir_all(root.join("queues"))?;
        Ok(Arc::new(Bus { root, opts, maps: RwLock::new(Some(Maps::default())) }))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_up(&self) -> bool {
        self.maps.read().is_some()
    }

    fn down(&self) -> BusError {
        BusError::Unavailable("bus is down".into())
    }

    fn topic(&self, name: &str) -> Result<Arc<TopicLog>> {
        check_name(name)?;
        if let Some(maps) = self.maps.read().as_ref() {
            if let Some(t) = maps.topics.get(name) {
                return Ok(t.clone());
            }
        } else {
            return Err(self.down());
        }
        let mut guard = self.maps.write();
        let maps = guard.as_mut().ok_or_else(|| self.down())?;
        if let Some(t) = maps.topics.get(name) {
            return Ok(t.clone());
        }
        let dir = self.root.join("topics").join(frame::encode_name(name));
        let t = Arc::new(TopicLog::open(name, dir, self.opts)?);
        maps.topics.insert(name.to_string(), t.clone());
        Ok(t)
    }

    fn queue(&self, name: &str) -> Result<Arc<QueueLog>> {
        check_name(name)?;
        if let Some(maps) = self.maps.read().as_ref() {
            if let Some(q) = maps.queues.get(name) {
                return Ok(q.clone());
            }
        } else {
            return Err(self.down());
        }
        let mut guard = self.maps.write();
        let maps = guard.as_mut().ok_or_else(|| self.down())?;
        if let Some(q) = maps.queues.get(name) {
            return Ok(q.clone());
        }
        let dir = self.root.join("queues").join(frame::encode_name(name));
        let q = Arc::new(QueueLog::open(name, &dir, self.opts)?);
        maps.queues.insert(name.to_string(), q.clone());
        Ok(q)
    }

    pub fn create_topic(&self, name: &str) -> Result<()> {
        self.topic(name).map(|_| ())
    }

    pub fn create_queue(&self, name: &str) -> Result<()> {
        self.queue(name).map(|_| ())
    }

    /// Appends to `topic` (created on first use). The record has reached the
    /// OS, or stable storage under [`SyncPolicy::Fsync`], when this returns.
    pub fn publish(&self, topic: &str, headers: &Headers, payload: &[u8]) -> Result<u64> {
        self.publish_at(topic, Timestamp::now(), headers, payload)
    }

    pub fn publish_at(&self, topic: &str, ts: Timestamp, headers: &Headers, payload: &[u8]) -> Result<u64> {
        let t = self.topic(topic)?;
        let mut st = t.state.lock();
        if st.dead {
            return Err(self.down());
        }
        let offset = st.log.append(ts, headers, payload)?;
        drop(st);
        t.cond.notify_all();
        Ok(offset)
    }

    pub fn end_offset(&self, topic: &str) -> Result<u64> {
        let t = self.topic(topic)?;
        let st = t.state.lock();
        if st.dead {
            return Err(self.down());
        }
        Ok(st.log.next_offset())
    }

    pub fn committed(&self, topic: &str, group: &str) -> Result<u64> {
        let t = self.topic(topic)?;
        let mut st = t.state.lock();
        if st.dead {
            return Err(self.down());
        }
        Ok(t.group(&mut st, group)?.committed)
    }

    pub fn commit(&self, topic: &str, group: &str, next_offset: u64) -> Result<()> {
        let t = self.topic(topic)?;
        let mut st = t.state.lock();
        if st.dead {
            return Err(self.down());
        }
        let sync = self.opts.sync;
        t.group(&mut st, group)?.commit(next_offset, sync)?;
        Ok(())
    }

    /// Reads one record by offset.
    pub fn read(&self, topic: &str, offset: u64) -> Result<Option<Record>> {
        let t = self.topic(topic)?;
        let st = t.state.lock();
        if st.dead {
            return Err(self.down());
        }
        if offset >= st.log.next_offset() {
            return Ok(None);
        }
        Ok(Some(st.log.read(offset)?))
    }

    pub fn subscribe(self: &Arc<Self>, topic: &str, start: StartAt) -> Result<Consumer> {
        let position = match &start {
            StartAt::Earliest => 0,
            StartAt::Latest => self.end_offset(topic)?,
            StartAt::Offset(o) => *o,
            StartAt::Committed(group) => self.committed(topic, group)?,
        };
        let group = match start {
            StartAt::Committed(g) => Some(g),
            _ => None,
        };
        Ok(Consumer {
            bus: self.clone(),
            topic: topic.to_string(),
            group,
            position,
            buffer: VecDeque::new(),
        })
    }

    pub fn enqueue(&self, queue: &str, headers: &Headers, payload: &[u8]) -> Result<u64> {
        let q = self.queue(queue)?;
        let mut st = q.state.lock();
        if st.dead {
            return Err(self.down());
        }
        let id = st.log.append(Timestamp::now(), headers, payload)?;
        st.pending.insert(id);
        drop(st);
        q.cond.notify_one();
        Ok(id)
    }

    /// Waits up to `timeout` for the oldest pending message.
    pub fn dequeue(&self, queue: &str, timeout: Duration) -> Result<Option<Delivery>> {
        let q = self.queue(queue)?;
        let deadline = Instant::now() + timeout;
        let mut st = q.state.lock();
        loop {
            if st.dead {
                return Err(self.down());
            }
            if let Some(id) = st.pending.pop_first() {
                let rec = match st.log.read(id) {
                    Ok(r) => r,
                    Err(e) => {
                        st.pending.insert(id);
                        return Err(e.into());
                    }
                };
                st.inflight.insert(id);
                let redelivered = !st.delivered.insert(id);
                drop(st);
                return Ok(Some(Delivery {
                    queue: q.clone(),
                    id,
                    headers: rec.headers,
                    payload: rec.payload,
                    redelivered,
                    settled: false,
                }));
            }
            if q.cond.wait_until(&mut st, deadline).timed_out() {
                if st.pending.is_empty() || st.dead {
                    return if st.dead { Err(self.down()) } else { Ok(None) };
                }
            }
        }
    }

    pub fn list_topics(&self) -> Result<Vec<TopicInfo>> {
        let mut out = Vec::new();
        for name in self.names_on_disk("topics")? {
            let t = self.topic(&name)?;
            let mut st = t.state.lock();
            if st.dead {
                return Err(self.down());
            }
            let groups_dir = t.dir.join("groups");
            if let Ok(entries) = std::fs::read_dir(&groups_dir) {
                for e in entries.flatten() {
                    let fname = e.file_name().to_string_lossy().to_string();
                    if let Some(g) = fname.strip_suffix(".off").and_then(frame::decode_name) {
                        t.group(&mut st, &g)?;
                    }
                }
            }
            out.push(TopicInfo {
                name: t.name.clone(),
                next_offset: st.log.next_offset(),
                groups: st.groups.iter().map(|(g, f)| (g.clone(), f.committed)).collect(),
            });
        }
        Ok(out)
    }

    pub fn list_queues(&self) -> Result<Vec<QueueInfo>> {
        let mut out = Vec::new();
        for name in self.names_on_disk("queues")? {
            let q = self.queue(&name)?;
            let st = q.state.lock();
            out.push(QueueInfo {
                name: q.name.clone(),
                total: st.log.next_offset(),
                pending: st.pending.len() as u64,
                inflight: st.inflight.len() as u64,
            });
        }
        Ok(out)
    }

    fn names_on_disk(&self, kind: &str) -> Result<Vec<String>> {
        if !self.is_up() {
            return Err(self.down());
        }
        let mut names: Vec<String> = std::fs::read_dir(self.root.join(kind))?
            .flatten()
            .filter_map(|e| frame::decode_name(&e.file_name().to_string_lossy()))
            .collect();
        names.sort();
        Ok(names)
    }

    /// Abruptly stops the bus: every in-memory index, waiter and in-flight
    /// delivery is discarded. Operations fail with `Unavailable` until
    /// [`Bus::recover`].
    pub fn crash(&self) {
        let Some(maps) = self.maps.write().take() else { return };
        for t in maps.topics.values() {
            t.state.lock().dead = true;
            t.cond.notify_all();
        }
        for q in maps.queues.values() {
            q.state.lock().dead = true;
            q.cond.notify_all();
        }
    }

    /// Reopens from the on-disk state.
    pub fn recover(&self) {
        let mut guard = self.maps.write();
        if guard.is_none() {
            *guard = Some(Maps::default());
        }
    }
}

/// Where a new consumer starts reading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StartAt {
    Earliest,
    Latest,
    Offset(u64),
    /// Resume from the group's committed offset; commits go to that group.
    Committed(String),
}

/// Sequential reader over one topic.
pub struct Consumer {
    bus: Arc<Bus>,
    topic: String,
    group: Option<String>,
    position: u64,
    buffer: VecDeque<Record>,
}

impl std::fmt::Debug for Consumer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Consumer")
            .field("topic", &self.topic)
            .field("group", &self.group)
            .field("position", &self.position)
            .finish()
    }
}

impl Consumer {
    pub fn topic(&self) -> &str {
        &self.topic
    }

    /// Next offset this consumer will hand out.
    pub fn position(&self) -> u64 {
        self.buffer.front().map(|r| r.offset).unwrap_or(self.position)
    }

    /// Returns the next record, waiting up to `timeout` for one to arrive.
    pub fn poll(&mut self, timeout: Duration) -> Result<Option<Record>> {
        if let Some(r) = self.buffer.pop_front() {
            return Ok(Some(r));
        }
        let t = self.bus.topic(&self.topic)?;
        let deadline = Instant::now() + timeout;
        let mut st = t.state.lock();
        loop {
            if st.dead {
                return Err(BusError::Unavailable("bus is down".into()));
            }
            let end = st.log.next_offset();
            if self.position < end {
                let upto = end.min(self.position + FETCH_BATCH as u64);
                for o in self.position..upto {
                    self.buffer.push_back(st.log.read(o)?);
                }
                self.position = upto;
                return Ok(self.buffer.pop_front());
            }
            if t.cond.wait_until(&mut st, deadline).timed_out() {
                if st.dead {
                    return Err(BusError::Unavailable("bus is down".into()));
                }
                if self.position >= st.log.next_offset() {
                    return Ok(None);
                }
            }
        }
    }

    /// Commits `next_offset` for this consumer's group.
    pub fn commit(&self, next_offset: u64) -> Result<()> {
        match &self.group {
            Some(g) => self.bus.commit(&self.topic, g, next_offset),
            None => Ok(()),
        }
    }

    /// Drops buffered records and rewinds to the group's committed offset.
    pub fn rewind_to_committed(&mut self) -> Result<()> {
        if let Some(g) = &self.group {
            self.position = self.bus.committed(&self.topic, g)?;
            self.buffer.clear();
        }
        Ok(())
    }
}

/// Outcome of handling one record in [`run_group`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// Done with the record; its offset may be committed.
    Done,
    /// Transient failure: rewind to the committed offset and retry later.
    Retry,
}

const COMMIT_EVERY: u64 = 64;
const RETRY_PAUSE: Duration = Duration::from_millis(20);

/// Consumes `topic` as `group` until `stop` is set. Commits after every
/// [`COMMIT_EVERY`] handled records and whenever the topic is drained.
pub fn run_group(
    bus: &Arc<Bus>,
    topic: &str,
    group: &str,
    stop: &crate::worker::StopFlag,
    mut handle: impl FnMut(&Record) -> Step,
) {
    let mut consumer: Option<Consumer> = None;
    let mut uncommitted: Option<u64> = None;
    let mut handled = 0u64;
    while !stop.is_set() {
        let c = match consumer.as_mut() {
            Some(c) => c,
            None => match bus.subscribe(topic, StartAt::Committed(group.to_string())) {
                Ok(c) => consumer.insert(c),
                Err(_) => {
                    stop.sleep(RETRY_PAUSE);
                    continue;
                }
            },
        };
        let ok = match c.poll(Duration::from_millis(50)) {
            Ok(Some(rec)) => match handle(&rec) {
                Step::Done => {
                    uncommitted = Some(rec.offset + 1);
                    handled += 1;
                    handled % COMMIT_EVERY != 0 || commit_pending(c, &mut uncommitted)
                }
                Step::Retry => {
                    commit_pending(c, &mut uncommitted);
                    false
                }
            },
            Ok(None) => commit_pending(c, &mut uncommitted),
            Err(_) => false,
        };
        if !ok {
            consumer = None;
            uncommitted = None;
            stop.sleep(RETRY_PAUSE);
        }
    }
    if let Some(c) = consumer.as_ref() {
        commit_pending(c, &mut uncommitted);
    }
}

fn commit_pending(c: &Consumer, pending: &mut Option<u64>) -> bool {
    match pending.take() {
        Some(next) => c.commit(next).is_ok(),
        None => true,
    }
}
