//! Twin and type registry.
//!
//! Things carry four managed attributes: `isType`, `type`, `parent` and
//! `children`. Twins form a forest (one optional parent, child multiplicity 1);
//! types form a DAG (parent map, child multiplicity >= 1). Reads hide `isType`.
//!
//! Every mutation writes the new state and its change events in one store
//! batch (the outbox), then publishes the events to the bus. Events that could
//! not be published stay in the outbox and are retried by
//! [`Registry::flush_outbox`], including after a restart.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::bus::{Bus, Headers};
use crate::clock::SharedClock;
use crate::frame::SyncPolicy;
use crate::kv::{Batch, KvError, KvStore};
use crate::model::{
    apply_envelope, parse_thing_id, Action, Criterion, Envelope, FeatureState, ModelError, Policy,
    ThingId, TwinRecord, MANAGED_ATTRIBUTES, ORIGINATOR_HEADER, TIMESTAMP_HEADER,
};

pub const DEFAULT_EVENTS_TOPIC: &str = "twin-events";
const STRIPES: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("thing `{0}` not found")]
    NotFound(ThingId),
    #[error("thing `{0}` already exists")]
    DuplicateId(ThingId),
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("policy `{0}` already exists")]
    DuplicatePolicy(String),
    #[error("policy `{0}` is still referenced by `{1}`")]
    PolicyInUse(String, ThingId),
    #[error("managed attribute `{0}` cannot be written directly")]
    ManagedAttributeViolation(String),
    #[error("`{parent}` and `{child}` are not the same kind of thing")]
    KindMismatch { parent: ThingId, child: ThingId },
    #[error("twin `{child}` already has parent `{parent}`")]
    TwinAlreadyHasParent { child: ThingId, parent: ThingId },
    #[error("linking `{parent}` -> `{child}` would create a cycle")]
    CycleCreated { parent: ThingId, child: ThingId },
    #[error("`{parent}` is not a parent of `{child}`")]
    NotLinked { parent: ThingId, child: ThingId },
    #[error("`{0}` is not a type")]
    NotAType(ThingId),
    #[error("types can only be deleted in orphan mode")]
    CascadeOnType,
    #[error("subject `{subject}` may not write `{thing}`")]
    Forbidden { subject: String, thing: ThingId },
    #[error(transparent)]
    Model(ModelError),
    #[error("registry unavailable: {0}")]
    Unavailable(String),
}

impl From<ModelError> for RegistryError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::ManagedAttributeViolation(k) => RegistryError::ManagedAttributeViolation(k),
            other => RegistryError::Model(other),
        }
    }
}

impl From<KvError> for RegistryError {
    fn from(e: KvError) -> Self {
        RegistryError::Unavailable(e.to_string())
    }
}

pub type Result<T, E = RegistryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Twin,
    Type,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeleteMode {
    #[default]
    Orphan,
    Cascade,
}

// ---------------------------------------------------------------------------
// Managed attribute helpers

fn kind_of(r: &TwinRecord) -> Kind {
    if r.attributes.get("isType").and_then(Value::as_bool) == Some(true) {
        Kind::Type
    } else {
        Kind::Twin
    }
}

fn children_of(r: &TwinRecord) -> BTreeMap<String, u64> {
    r.attributes
        .get("children")
        .and_then(Value::as_object)
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.as_u64().unwrap_or(1))).collect())
        .unwrap_or_default()
}

fn parents_of(r: &TwinRecord) -> Vec<String> {
    match r.attributes.get("parent") {
        Some(Value::String(p)) => vec![p.clone()],
        Some(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn set_children(r: &mut TwinRecord, children: &BTreeMap<String, u64>) {
    let m: Map<String, Value> = children.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    r.attributes.insert("children".into(), Value::Object(m));
}

fn set_parents(r: &mut TwinRecord, parents: &[String]) {
    let v = match kind_of(r) {
        Kind::Twin => parents.first().map(|p| json!(p)).unwrap_or(Value::Null),
        Kind::Type => Value::Object(parents.iter().map(|p| (p.clone(), json!(1))).collect()),
    };
    r.attributes.insert("parent".into(), v);
}

fn hide(mut r: TwinRecord) -> TwinRecord {
    r.attributes.remove("isType");
    r
}

fn ids(keys: impl IntoIterator<Item = String>) -> Vec<ThingId> {
    keys.into_iter().filter_map(|k| parse_thing_id(&k).ok()).collect()
}

fn thing_key(id: &ThingId) -> String {
    format!("thing/{id}")
}

fn policy_key(id: &str) -> String {
    format!("policy/{id}")
}

fn outbox_key(seq: u64) -> String {
    format!("outbox/{seq:020}")
}

// ---------------------------------------------------------------------------
// Store

#[derive(Default)]
struct Outbox {
    pending: BTreeMap<u64, Envelope>,
    flushed: Vec<String>,
}

struct Store {
    kv: KvStore,
    /// `true` once the store has been crashed. Structural operations hold it
    /// exclusively, leaf updates share it.
    structure: RwLock<bool>,
    stripes: Vec<Mutex<()>>,
    outbox: Mutex<Outbox>,
    seq: AtomicU64,
}

impl Store {
    fn open(path: &Path, sync: SyncPolicy) -> Result<Self> {
        let kv = KvStore::open(path, sync)?;
        let mut pending = BTreeMap::new();
        for (k, v) in kv.scan("outbox/") {
            let seq: u64 = k["outbox/".len()..].parse().unwrap_or(0);
            if let Ok(e) = serde_json::from_value::<Envelope>(v) {
                pending.insert(seq, e);
            }
        }
        let next = pending.keys().next_back().map(|s| s + 1).unwrap_or(0);
        Ok(Store {
            kv,
            structure: RwLock::new(false),
            stripes: (0..STRIPES).map(|_| Mutex::new(())).collect(),
            outbox: Mutex::new(Outbox { pending, flushed: Vec::new() }),
            seq: AtomicU64::new(next),
        })
    }

    fn stripe(&self, id: &ThingId) -> &Mutex<()> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        id.hash(&mut h);
        &self.stripes[h.finish() as usize % STRIPES]
    }

    fn load(&self, id: &ThingId) -> Result<Option<TwinRecord>> {
        Ok(self.kv.get_as(&thing_key(id))?)
    }

    fn policy(&self, id: &str) -> Result<Option<Policy>> {
        Ok(self.kv.get_as(&policy_key(id))?)
    }

    /// Writes state changes plus their events atomically, then records the
    /// events as pending publication.
    fn commit(&self, mut batch: Batch, events: Vec<Envelope>) -> Result<()> {
        let mut staged = Vec::with_capacity(events.len());
        for e in events {
            let seq = self.seq.fetch_add(1, Ordering::SeqCst);
            batch.push((outbox_key(seq), Some(serde_json::to_value(&e).expect("envelope json"))));
            staged.push((seq, e));
        }
        let done: Vec<String> = std::mem::take(&mut self.outbox.lock().flushed);
        batch.extend(done.iter().map(|k| (k.clone(), None)));
        if let Err(err) = self.kv.write(batch) {
            self.outbox.lock().flushed.extend(done);
            return Err(err.into());
        }
        self.outbox.lock().pending.extend(staged);
        Ok(())
    }

    fn flush(&self, bus: &Bus, topic: &str) -> usize {
        let mut ob = self.outbox.lock();
        let mut sent = Vec::new();
        for (seq, e) in ob.pending.iter() {
            let headers: Headers = e.headers.clone();
            if bus.publish(topic, &headers, &e.to_bytes()).is_err() {
                break;
            }
            sent.push(*seq);
        }
        for s in &sent {
            ob.pending.remove(s);
            ob.flushed.push(outbox_key(*s));
        }
        ob.pending.len()
    }
}

/// Pending mutation of several records.
struct Tx<'a> {
    store: &'a Store,
    changed: BTreeMap<ThingId, Option<TwinRecord>>,
    events: Vec<Envelope>,
}

impl<'a> Tx<'a> {
    fn new(store: &'a Store) -> Self {
        Tx { store, changed: BTreeMap::new(), events: Vec::new() }
    }

    fn find(&self, id: &ThingId) -> Result<Option<TwinRecord>> {
        match self.changed.get(id) {
            Some(r) => Ok(r.clone()),
            None => self.store.load(id),
        }
    }

    fn get(&self, id: &ThingId) -> Result<TwinRecord> {
        self.find(id)?.ok_or_else(|| RegistryError::NotFound(id.clone()))
    }

    fn put(&mut self, r: TwinRecord) {
        self.changed.insert(r.thing_id.clone(), Some(r));
    }

    fn remove(&mut self, id: &ThingId) {
        self.changed.insert(id.clone(), None);
    }

    fn into_batch(self) -> (Batch, Vec<Envelope>) {
        let batch = self
            .changed
            .into_iter()
            .map(|(id, r)| (thing_key(&id), r.map(|r| serde_json::to_value(r).expect("record json"))))
            .collect();
        (batch, self.events)
    }
}

// ---------------------------------------------------------------------------
// Registry

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct RegistryConfig {
    #[serde(default = "default_events_topic")]
    pub events_topic: String,
    #[serde(default)]
    pub sync: SyncPolicy,
}

fn default_events_topic() -> String {
    DEFAULT_EVENTS_TOPIC.to_string()
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig { events_topic: default_events_topic(), sync: SyncPolicy::Os }
    }
}

pub struct Registry {
    path: PathBuf,
    config: RegistryConfig,
    bus: Arc<Bus>,
    clock: SharedClock,
    store: RwLock<Option<Arc<Store>>>,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry").field("path", &self.path).finish()
    }
}

impl Registry {
    pub fn open(
        path: impl AsRef<Path>,
        config: RegistryConfig,
        bus: Arc<Bus>,
        clock: SharedClock,
    ) -> Result<Arc<Self>> {
        let path = path.as_ref().to_path_buf();
        let store = Store::open(&path, config.sync)?;
        let r = Arc::new(Registry { path, config, bus, clock, store: RwLock::new(Some(Arc::new(store))) });
        r.flush_outbox();
        Ok(r)
    }

    pub fn events_topic(&self) -> &str {
        &self.config.events_topic
    }

    fn store(&self) -> Result<Arc<Store>> {
        self.store.read().clone().ok_or_else(|| RegistryError::Unavailable("registry is down".into()))
    }

    fn down() -> RegistryError {
        RegistryError::Unavailable("registry is down".into())
    }

    /// Stops the registry as if the process died. Pending events stay in the
    /// outbox on disk.
    pub fn crash(&self) {
        if let Some(s) = self.store.write().take() {
            *s.structure.write() = true;
        }
    }

    /// Reopens from disk and republishes any unpublished events.
    pub fn recover(&self) -> Result<()> {
        let mut guard = self.store.write();
        if guard.is_none() {
            *guard = Some(Arc::new(Store::open(&self.path, self.config.sync)?));
        }
        drop(guard);
        self.flush_outbox();
        Ok(())
    }

    pub fn is_up(&self) -> bool {
        self.store.read().is_some()
    }

    /// Publishes outbox events. Returns how many are still pending.
    pub fn flush_outbox(&self) -> usize {
        let Ok(s) = self.store() else { return 0 };
        let left = s.flush(&self.bus, &self.config.events_topic);
        let flushed = std::mem::take(&mut s.outbox.lock().flushed);
        if !flushed.is_empty() && s.kv.write(flushed.iter().map(|k| (k.clone(), None)).collect()).is_err() {
            s.outbox.lock().flushed.extend(flushed);
        }
        left
    }

    pub fn pending_events(&self) -> usize {
        self.store().map(|s| s.outbox.lock().pending.len()).unwrap_or(0)
    }

    fn event(&self, id: &ThingId, action: Action, path: &str, value: Value, originator: &str) -> Envelope {
        Envelope::new(id, Criterion::Events, action, path, value)
            .with_header(ORIGINATOR_HEADER, originator)
            .with_header(TIMESTAMP_HEADER, self.clock.now().to_rfc3339())
    }

    fn created_event(&self, r: &TwinRecord) -> Envelope {
        let value = serde_json::to_value(hide(r.clone())).expect("record json");
        self.event(&r.thing_id, Action::Create, "/", value, "registry")
    }

    fn hierarchy_event(&self, r: &TwinRecord, key: &str) -> Envelope {
        let value = r.attributes.get(key).cloned().unwrap_or(Value::Null);
        self.event(&r.thing_id, Action::Modify, &format!("/attributes/{key}"), value, "registry")
    }

    fn run<T>(&self, f: impl FnOnce(&Store, &mut Tx) -> Result<T>) -> Result<T> {
        let s = self.store()?;
        let out = {
            let dead = s.structure.write();
            if *dead {
                return Err(Self::down());
            }
            let mut tx = Tx::new(&s);
            let out = f(&s, &mut tx)?;
            let (batch, events) = tx.into_batch();
            s.commit(batch, events)?;
            out
        };
        s.flush(&self.bus, &self.config.events_topic);
        Ok(out)
    }

    // -- policies ----------------------------------------------------------

    pub fn create_policy(&self, policy: Policy) -> Result<Policy> {
        policy.validate()?;
        let s = self.store()?;
        let dead = s.structure.write();
        if *dead {
            return Err(Self::down());
        }
        if s.policy(&policy.policy_id)?.is_some() {
            return Err(RegistryError::DuplicatePolicy(policy.policy_id));
        }
        s.kv.put(&policy_key(&policy.policy_id), &policy)?;
        Ok(policy)
    }

    /// Creates or replaces a policy.
    pub fn put_policy(&self, policy: Policy) -> Result<Policy> {
        policy.validate()?;
        let s = self.store()?;
        let dead = s.structure.write();
        if *dead {
            return Err(Self::down());
        }
        s.kv.put(&policy_key(&policy.policy_id), &policy)?;
        Ok(policy)
    }

    pub fn get_policy(&self, id: &str) -> Result<Policy> {
        self.store()?.policy(id)?.ok_or_else(|| RegistryError::UnknownPolicy(id.to_string()))
    }

    /// All policies ordered by id.
    pub fn list_policies(&self) -> Result<Vec<Policy>> {
        Ok(self.store()?.kv.scan_as::<Policy>("policy/")?.into_iter().map(|(_, p)| p).collect())
    }

    pub fn delete_policy(&self, id: &str) -> Result<()> {
        let s = self.store()?;
        let dead = s.structure.write();
        if *dead {
            return Err(Self::down());
        }
        if s.policy(id)?.is_none() {
            return Err(RegistryError::UnknownPolicy(id.to_string()));
        }
        for (_, r) in s.kv.scan_as::<TwinRecord>("thing/")? {
            if r.policy_id == id {
                return Err(RegistryError::PolicyInUse(id.to_string(), r.thing_id));
            }
        }
        s.kv.delete(&policy_key(id))?;
        Ok(())
    }

    // -- things ------------------------------------------------------------

    pub fn create_twin(
        &self,
        id: ThingId,
        policy_id: &str,
        attributes: Map<String, Value>,
        features: BTreeMap<String, FeatureState>,
    ) -> Result<TwinRecord> {
        self.create(Kind::Twin, id, policy_id, attributes, features)
    }

    pub fn create_type(
        &self,
        id: ThingId,
        policy_id: &str,
        attributes: Map<String, Value>,
        features: BTreeMap<String, FeatureState>,
    ) -> Result<TwinRecord> {
        self.create(Kind::Type, id, policy_id, attributes, features)
    }

    pub fn create(
        &self,
        kind: Kind,
        id: ThingId,
        policy_id: &str,
        attributes: Map<String, Value>,
        features: BTreeMap<String, FeatureState>,
    ) -> Result<TwinRecord> {
        if let Some(k) = MANAGED_ATTRIBUTES.iter().find(|k| attributes.contains_key(**k)) {
            return Err(RegistryError::ManagedAttributeViolation(k.to_string()));
        }
        self.run(|s, tx| {
            if tx.find(&id)?.is_some() {
                return Err(RegistryError::DuplicateId(id.clone()));
            }
            if s.policy(policy_id)?.is_none() {
                return Err(RegistryError::UnknownPolicy(policy_id.to_string()));
            }
            let mut r = TwinRecord::new(id.clone(), policy_id);
            r.attributes = attributes;
            r.features = features;
            r.attributes.insert("isType".into(), json!(kind == Kind::Type));
            set_parents(&mut r, &[]);
            set_children(&mut r, &BTreeMap::new());
            tx.events.push(self.created_event(&r));
            tx.put(r.clone());
            Ok(hide(r))
        })
    }

    /// The record without `isType`.
    pub fn get(&self, id: &ThingId) -> Result<TwinRecord> {
        let s = self.store()?;
        s.load(id)?.map(hide).ok_or_else(|| RegistryError::NotFound(id.clone()))
    }

    pub fn kind(&self, id: &ThingId) -> Result<Kind> {
        let s = self.store()?;
        s.load(id)?.map(|r| kind_of(&r)).ok_or_else(|| RegistryError::NotFound(id.clone()))
    }

    fn list_kind(&self, kind: Kind) -> Result<Vec<TwinRecord>> {
        Ok(self
            .store()?
            .kv
            .scan_as::<TwinRecord>("thing/")?
            .into_iter()
            .map(|(_, r)| r)
            .filter(|r| kind_of(r) == kind)
            .map(hide)
            .collect())
    }

    /// Twins ordered by id.
    pub fn list_twins(&self) -> Result<Vec<TwinRecord>> {
        self.list_kind(Kind::Twin)
    }

    /// Types ordered by id.
    pub fn list_types(&self) -> Result<Vec<TwinRecord>> {
        self.list_kind(Kind::Type)
    }

    pub fn list_children(&self, id: &ThingId) -> Result<Vec<ThingId>> {
        let s = self.store()?;
        let r = s.load(id)?.ok_or_else(|| RegistryError::NotFound(id.clone()))?;
        Ok(ids(children_of(&r).into_keys()))
    }

    /// Child ids with their multiplicity.
    pub fn children_with_multiplicity(&self, id: &ThingId) -> Result<BTreeMap<ThingId, u64>> {
        let s = self.store()?;
        let r = s.load(id)?.ok_or_else(|| RegistryError::NotFound(id.clone()))?;
        Ok(children_of(&r).into_iter().filter_map(|(k, m)| Some((parse_thing_id(&k).ok()?, m))).collect())
    }

    pub fn list_parents(&self, id: &ThingId) -> Result<Vec<ThingId>> {
        let s = self.store()?;
        let r = s.load(id)?.ok_or_else(|| RegistryError::NotFound(id.clone()))?;
        Ok(ids(parents_of(&r)))
    }

    pub fn link(&self, parent: &ThingId, child: &ThingId) -> Result<()> {
        self.run(|_, tx| {
            let mut p = tx.get(parent)?;
            let mut c = tx.get(child)?;
            let kind = kind_of(&p);
            if kind != kind_of(&c) {
                return Err(RegistryError::KindMismatch { parent: parent.clone(), child: child.clone() });
            }
            if parent == child {
                return Err(RegistryError::CycleCreated { parent: parent.clone(), child: child.clone() });
            }
            match kind {
                Kind::Twin => {
                    if let Some(existing) = parents_of(&c).first() {
                        return Err(RegistryError::TwinAlreadyHasParent {
                            child: child.clone(),
                            parent: parse_thing_id(existing)?,
                        });
                    }
                    // walk up from the new parent
                    let mut cur = parents_of(&p).into_iter().next();
                    while let Some(a) = cur {
                        if a == child.as_str() {
                            return Err(RegistryError::CycleCreated {
                                parent: parent.clone(),
                                child: child.clone(),
                            });
                        }
                        cur = tx.find(&parse_thing_id(&a)?)?.and_then(|r| parents_of(&r).into_iter().next());
                    }
                    set_parents(&mut c, &[parent.to_string()]);
                    let mut ch = children_of(&p);
                    ch.insert(child.to_string(), 1);
                    set_children(&mut p, &ch);
                    tx.events.push(self.hierarchy_event(&c, "parent"));
                    tx.events.push(self.hierarchy_event(&p, "children"));
                    tx.put(c);
                    tx.put(p);
                }
                Kind::Type => {
                    if self.reaches(tx, child, parent)? {
                        return Err(RegistryError::CycleCreated { parent: parent.clone(), child: child.clone() });
                    }
                    let mut ps = parents_of(&c);
                    if !ps.contains(&parent.to_string()) {
                        ps.push(parent.to_string());
                        ps.sort();
                        set_parents(&mut c, &ps);
                        tx.events.push(self.hierarchy_event(&c, "parent"));
                        tx.put(c);
                    }
                    let mut ch = children_of(&p);
                    *ch.entry(child.to_string()).or_insert(0) += 1;
                    set_children(&mut p, &ch);
                    tx.events.push(self.hierarchy_event(&p, "children"));
                    tx.put(p);
                }
            }
            Ok(())
        })
    }

    /// Whether `to` is reachable from `from` along child edges.
    fn reaches(&self, tx: &Tx, from: &ThingId, to: &ThingId) -> Result<bool> {
        let mut seen = HashSet::new();
        let mut stack = vec![from.to_string()];
        while let Some(cur) = stack.pop() {
            if cur == to.as_str() {
                return Ok(true);
            }
            if !seen.insert(cur.clone()) {
                continue;
            }
            if let Some(r) = tx.find(&parse_thing_id(&cur)?)? {
                stack.extend(children_of(&r).into_keys());
            }
        }
        Ok(false)
    }

    /// Removes the edge `parent -> child` (for types, all of its multiplicity).
    pub fn unlink(&self, parent: &ThingId, child: &ThingId) -> Result<()> {
        self.run(|_, tx| {
            let mut p = tx.get(parent)?;
            let mut c = tx.get(child)?;
            let mut ch = children_of(&p);
            if ch.remove(child.as_str()).is_none() {
                return Err(RegistryError::NotLinked { parent: parent.clone(), child: child.clone() });
            }
            set_children(&mut p, &ch);
            let ps: Vec<String> = parents_of(&c).into_iter().filter(|x| x != parent.as_str()).collect();
            set_parents(&mut c, &ps);
            tx.events.push(self.hierarchy_event(&c, "parent"));
            tx.events.push(self.hierarchy_event(&p, "children"));
            tx.put(c);
            tx.put(p);
            Ok(())
        })
    }

    /// Creates a twin from a type, recursively creating `multiplicity` twins
    /// per child-type edge. Child ids are `<name>_<childTypeName>_<k>`.
    pub fn instantiate(&self, type_id: &ThingId, new_id: &ThingId, policy_id: &str) -> Result<Vec<TwinRecord>> {
        self.run(|s, tx| {
            let root = tx.get(type_id)?;
            if kind_of(&root) != Kind::Type {
                return Err(RegistryError::NotAType(type_id.clone()));
            }
            if s.policy(policy_id)?.is_none() {
                return Err(RegistryError::UnknownPolicy(policy_id.to_string()));
            }
            // (twin id, type record, parent twin id)
            let mut plan: Vec<(ThingId, TwinRecord, Option<ThingId>)> = Vec::new();
            let mut queue = VecDeque::from([(new_id.clone(), root, None)]);
            while let Some((id, ty, parent)) = queue.pop_front() {
                for (child_type, m) in children_of(&ty) {
                    let ct_id = parse_thing_id(&child_type)?;
                    let ct = tx.get(&ct_id)?;
                    for k in 1..=m {
                        let cid = id.with_suffix(&format!("_{}_{k}", ct_id.name()))?;
                        queue.push_back((cid, ct.clone(), Some(id.clone())));
                    }
                }
                plan.push((id, ty, parent));
            }
            let mut seen = BTreeSet::new();
            for (id, _, _) in &plan {
                if !seen.insert(id.clone()) || tx.find(id)?.is_some() {
                    return Err(RegistryError::DuplicateId(id.clone()));
                }
            }
            let mut children: BTreeMap<ThingId, BTreeMap<String, u64>> = BTreeMap::new();
            for (id, _, parent) in &plan {
                if let Some(p) = parent {
                    children.entry(p.clone()).or_default().insert(id.to_string(), 1);
                }
            }
            let mut created = Vec::new();
            for (id, ty, parent) in plan {
                let mut r = TwinRecord::new(id.clone(), policy_id);
                r.attributes = ty.attributes.clone();
                for k in MANAGED_ATTRIBUTES {
                    r.attributes.remove(k);
                }
                r.features = ty.features.clone();
                r.attributes.insert("isType".into(), json!(false));
                r.attributes.insert("type".into(), json!(ty.thing_id.to_string()));
                set_parents(&mut r, &parent.map(|p| vec![p.to_string()]).unwrap_or_default());
                set_children(&mut r, children.get(&id).unwrap_or(&BTreeMap::new()));
                tx.events.push(self.created_event(&r));
                tx.put(r.clone());
                created.push(hide(r));
            }
            Ok(created)
        })
    }

    /// Deletes a thing. Returns the removed ids.
    pub fn delete(&self, id: &ThingId, mode: DeleteMode) -> Result<Vec<ThingId>> {
        self.run(|_, tx| {
            let r = tx.get(id)?;
            let kind = kind_of(&r);
            if kind == Kind::Type && mode == DeleteMode::Cascade {
                return Err(RegistryError::CascadeOnType);
            }
            // detach from parents
            for p in ids(parents_of(&r)) {
                if let Some(mut pr) = tx.find(&p)? {
                    let mut ch = children_of(&pr);
                    ch.remove(id.as_str());
                    set_children(&mut pr, &ch);
                    tx.events.push(self.hierarchy_event(&pr, "children"));
                    tx.put(pr);
                }
            }
            let removed = match mode {
                DeleteMode::Orphan => {
                    for c in ids(children_of(&r).into_keys()) {
                        if let Some(mut cr) = tx.find(&c)? {
                            let ps: Vec<String> = parents_of(&cr).into_iter().filter(|x| x != id.as_str()).collect();
                            set_parents(&mut cr, &ps);
                            tx.events.push(self.hierarchy_event(&cr, "parent"));
                            tx.put(cr);
                        }
                    }
                    vec![id.clone()]
                }
                DeleteMode::Cascade => {
                    let mut out = Vec::new();
                    let mut queue = VecDeque::from([id.clone()]);
                    while let Some(cur) = queue.pop_front() {
                        if let Some(cr) = tx.find(&cur)? {
                            queue.extend(ids(children_of(&cr).into_keys()));
                            out.push(cur);
                        }
                    }
                    out
                }
            };
            for d in &removed {
                tx.remove(d);
                tx.events.push(self.event(d, Action::Delete, "/", Value::Null, "registry"));
            }
            Ok(removed)
        })
    }

    /// Applies a modify command on behalf of `subject`, who needs write
    /// permission in the thing's policy. The emitted event carries the command
    /// path and value, the subject as originator, and the command's `x-ts`
    /// header when present.
    pub fn update(&self, id: &ThingId, envelope: &Envelope, subject: &str) -> Result<TwinRecord> {
        let s = self.store()?;
        let updated = {
            let dead = s.structure.read();
            if *dead {
                return Err(Self::down());
            }
            let _stripe = s.stripe(id).lock();
            let r = s.load(id)?.ok_or_else(|| RegistryError::NotFound(id.clone()))?;
            let policy = s.policy(&r.policy_id)?.ok_or_else(|| RegistryError::UnknownPolicy(r.policy_id.clone()))?;
            if !policy.can_write(subject) {
                return Err(RegistryError::Forbidden { subject: subject.to_string(), thing: id.clone() });
            }
            let updated = apply_envelope(&r, envelope)?;
            let mut event = Envelope::new(id, Criterion::Events, Action::Modify, &envelope.path, envelope.value.clone())
                .with_header(ORIGINATOR_HEADER, subject);
            let ts = envelope
                .headers
                .get(TIMESTAMP_HEADER)
                .cloned()
                .unwrap_or_else(|| self.clock.now().to_rfc3339());
            event = event.with_header(TIMESTAMP_HEADER, ts);
            let batch = vec![(thing_key(id), Some(serde_json::to_value(&updated).expect("record json")))];
            s.commit(batch, vec![event])?;
            updated
        };
        s.flush(&self.bus, &self.config.events_topic);
        Ok(hide(updated))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::{BusOptions, StartAt};
    use crate::model::{validate_envelope, Permission};
    use std::time::Duration;

    pub(crate) fn policy(id: &str) -> Policy {
        Policy {
            policy_id: id.into(),
            entries: BTreeMap::from([
                ("admin".to_string(), Permission { read: true, write: true }),
                ("viewer".to_string(), Permission { read: true, write: false }),
            ]),
        }
    }

    fn setup() -> (tempfile::TempDir, Arc<Bus>, Arc<Registry>) {
        let dir = tempfile::tempdir().unwrap();
        let bus = Bus::open(dir.path().join("bus"), BusOptions::default()).unwrap();
        let reg = Registry::open(
            dir.path().join("registry.kv"),
            RegistryConfig::default(),
            bus.clone(),
            crate::clock::system(),
        )
        .unwrap();
        reg.create_policy(policy("t:p")).unwrap();
        (dir, bus, reg)
    }

    fn id(s: &str) -> ThingId {
        parse_thing_id(s).unwrap()
    }

    fn twin(reg: &Registry, s: &str) {
        reg.create_twin(id(s), "t:p", Map::new(), BTreeMap::new()).unwrap();
    }

    fn ty(reg: &Registry, s: &str) {
        reg.create_type(id(s), "t:p", Map::new(), BTreeMap::new()).unwrap();
    }

    fn events(bus: &Arc<Bus>) -> Vec<Envelope> {
        let mut c = bus.subscribe(DEFAULT_EVENTS_TOPIC, StartAt::Earliest).unwrap();
        let mut out = Vec::new();
        while let Some(r) = c.poll(Duration::from_millis(5)).unwrap() {
            out.push(Envelope::from_bytes(&r.payload).unwrap());
        }
        out
    }

    #[test]
    fn create_hides_is_type_and_emits_event() {
        let (_d, bus, reg) = setup();
        let mut attrs = Map::new();
        attrs.insert("units".into(), json!("degC"));
        let r = reg.create_twin(id("cepsa:LSRC3002.PF"), "t:p", attrs, BTreeMap::new()).unwrap();
        assert!(!r.attributes.contains_key("isType"));
        assert_eq!(r.attributes["parent"], Value::Null);
        assert_eq!(r.attributes["children"], json!({}));
        let ev = events(&bus);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].topic, "cepsa/LSRC3002.PF/things/twin/events/create");
        validate_envelope(&ev[0]).unwrap();
        assert!(!ev[0].value["attributes"].as_object().unwrap().contains_key("isType"));
    }

    #[test]
    fn create_rejects_managed_and_duplicates() {
        let (_d, _bus, reg) = setup();
        for k in MANAGED_ATTRIBUTES {
            let mut attrs = Map::new();
            attrs.insert(k.into(), json!(true));
            assert_eq!(
                reg.create_twin(id("t:x"), "t:p", attrs, BTreeMap::new()),
                Err(RegistryError::ManagedAttributeViolation(k.into()))
            );
        }
        twin(&reg, "t:x");
        assert!(matches!(
            reg.create_twin(id("t:x"), "t:p", Map::new(), BTreeMap::new()),
            Err(RegistryError::DuplicateId(_))
        ));
        assert!(matches!(
            reg.create_type(id("t:y"), "t:nope", Map::new(), BTreeMap::new()),
            Err(RegistryError::UnknownPolicy(_))
        ));
    }

    #[test]
    fn twin_links_follow_forest_rules() {
        let (_d, _bus, reg) = setup();
        for t in ["t:factory", "t:robot1", "t:robot2", "t:sensor1", "t:sensor2"] {
            twin(&reg, t);
        }
        reg.link(&id("t:factory"), &id("t:robot1")).unwrap();
        reg.link(&id("t:factory"), &id("t:robot2")).unwrap();
        reg.link(&id("t:robot1"), &id("t:sensor1")).unwrap();
        reg.link(&id("t:robot1"), &id("t:sensor2")).unwrap();
        assert_eq!(reg.list_children(&id("t:factory")).unwrap(), vec![id("t:robot1"), id("t:robot2")]);
        assert!(matches!(
            reg.link(&id("t:robot2"), &id("t:sensor1")),
            Err(RegistryError::TwinAlreadyHasParent { .. })
        ));
        twin(&reg, "t:lone");
        assert!(matches!(
            reg.link(&id("t:sensor1"), &id("t:factory")),
            Err(RegistryError::CycleCreated { .. })
        ));
        assert!(matches!(reg.link(&id("t:lone"), &id("t:lone")), Err(RegistryError::CycleCreated { .. })));
        ty(&reg, "t:T");
        assert!(matches!(reg.link(&id("t:T"), &id("t:lone")), Err(RegistryError::KindMismatch { .. })));
    }

    #[test]
    fn type_links_count_multiplicity_and_reject_cycles() {
        let (_d, _bus, reg) = setup();
        ty(&reg, "t:A");
        ty(&reg, "t:B");
        reg.link(&id("t:A"), &id("t:B")).unwrap();
        reg.link(&id("t:A"), &id("t:B")).unwrap();
        assert_eq!(reg.children_with_multiplicity(&id("t:A")).unwrap()[&id("t:B")], 2);
        assert_eq!(reg.get(&id("t:B")).unwrap().attributes["parent"], json!({"t:A": 1}));
        assert!(matches!(reg.link(&id("t:B"), &id("t:A")), Err(RegistryError::CycleCreated { .. })));
    }

    #[test]
    fn instantiate_expands_multiplicity() {
        let (_d, bus, reg) = setup();
        ty(&reg, "t:RobotType");
        ty(&reg, "t:SensorType");
        reg.link(&id("t:RobotType"), &id("t:SensorType")).unwrap();
        reg.link(&id("t:RobotType"), &id("t:SensorType")).unwrap();
        let before = events(&bus).len();
        let made = reg.instantiate(&id("t:RobotType"), &id("t:robot"), "t:p").unwrap();
        let names: Vec<String> = made.iter().map(|r| r.thing_id.to_string()).collect();
        assert_eq!(names, vec!["t:robot", "t:robot_SensorType_1", "t:robot_SensorType_2"]);
        assert_eq!(reg.list_parents(&id("t:robot_SensorType_2")).unwrap(), vec![id("t:robot")]);
        assert_eq!(made[0].attributes["type"], json!("t:RobotType"));
        assert_eq!(events(&bus).len() - before, 3);
        assert!(matches!(
            reg.instantiate(&id("t:robot"), &id("t:other"), "t:p"),
            Err(RegistryError::NotAType(_))
        ));
        assert!(matches!(
            reg.instantiate(&id("t:RobotType"), &id("t:robot"), "t:p"),
            Err(RegistryError::DuplicateId(_))
        ));
    }

    #[test]
    fn delete_modes() {
        let (_d, _bus, reg) = setup();
        for t in ["t:robot1", "t:sensor1", "t:sensor2"] {
            twin(&reg, t);
        }
        reg.link(&id("t:robot1"), &id("t:sensor1")).unwrap();
        reg.link(&id("t:robot1"), &id("t:sensor2")).unwrap();
        assert_eq!(reg.delete(&id("t:robot1"), DeleteMode::Orphan).unwrap(), vec![id("t:robot1")]);
        assert_eq!(reg.get(&id("t:sensor1")).unwrap().attributes["parent"], Value::Null);

        twin(&reg, "t:robot1");
        reg.link(&id("t:robot1"), &id("t:sensor1")).unwrap();
        reg.link(&id("t:robot1"), &id("t:sensor2")).unwrap();
        let mut gone = reg.delete(&id("t:robot1"), DeleteMode::Cascade).unwrap();
        gone.sort();
        assert_eq!(gone, vec![id("t:robot1"), id("t:sensor1"), id("t:sensor2")]);
        assert!(reg.list_twins().unwrap().is_empty());

        ty(&reg, "t:T");
        assert_eq!(reg.delete(&id("t:T"), DeleteMode::Cascade), Err(RegistryError::CascadeOnType));
    }

    #[test]
    fn update_checks_policy_and_managed_keys() {
        let (_d, bus, reg) = setup();
        twin(&reg, "t:s");
        let e = Envelope::modify(&id("t:s"), "/features/last_measured/properties/value", json!(4.5));
        let r = reg.update(&id("t:s"), &e, "admin").unwrap();
        assert_eq!(r.property("last_measured", "value").unwrap().as_f64(), Some(4.5));
        let ev = events(&bus).pop().unwrap();
        assert_eq!(ev.topic, "t/s/things/twin/events/modify");
        assert_eq!(ev.originator(), Some("admin"));
        validate_envelope(&ev).unwrap();

        assert!(matches!(reg.update(&id("t:s"), &e, "viewer"), Err(RegistryError::Forbidden { .. })));
        let bad = Envelope::modify(&id("t:s"), "/attributes/parent", json!("t:x"));
        assert_eq!(
            reg.update(&id("t:s"), &bad, "admin"),
            Err(RegistryError::ManagedAttributeViolation("parent".into()))
        );
        assert!(matches!(reg.get(&id("t:nope")), Err(RegistryError::NotFound(_))));
    }

    #[test]
    fn policies_are_listed_in_order() {
        let (_d, _bus, reg) = setup();
        reg.create_policy(policy("cepsa:basic_policy")).unwrap();
        let ids: Vec<String> = reg.list_policies().unwrap().into_iter().map(|p| p.policy_id).collect();
        assert_eq!(ids, vec!["cepsa:basic_policy", "t:p"]);
        twin(&reg, "t:a");
        assert!(matches!(reg.delete_policy("t:p"), Err(RegistryError::PolicyInUse(..))));
    }

    #[test]
    fn outbox_survives_bus_outage_and_crash() {
        let (_d, bus, reg) = setup();
        bus.crash();
        twin(&reg, "t:a");
        assert_eq!(reg.pending_events(), 1);
        reg.crash();
        assert!(reg.get(&id("t:a")).is_err());
        bus.recover();
        reg.recover().unwrap();
        assert_eq!(reg.pending_events(), 0);
        let ev = events(&bus);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].topic, "t/a/things/twin/events/create");
        assert!(reg.get(&id("t:a")).is_ok());
    }
}
