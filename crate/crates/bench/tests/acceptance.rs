//! Acceptance suite. Runs each criterion and prints one PASS/FAIL line per
//! criterion; exits non-zero if any failed.
//!
//! `cargo test -p twinforge-bench --test acceptance [c1 c3 ...]`

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Map, Value};

use twinforge_bench::harness::{drive, measure, model_twin, wait_for_drain, Path, Testbed, PREDICTION_FEATURE};
use twinforge_bench::scenario::{Pipeline, ScenarioConfig};
use twinforge_bench::{all_service_faults, run_fault_injection};
use twinforge_core::bridges::{substitute, RouteMode, ROUTE_SUBJECT};
use twinforge_core::bus::{Bus, BusOptions, Headers};
use twinforge_core::clock::ManualClock;
use twinforge_core::codec::Format;
use twinforge_core::connection::GATEWAY_SUBJECT;
use twinforge_core::frame::SyncPolicy;
use twinforge_core::gateway::telemetry_topic;
use twinforge_core::metrics::Metrics;
use twinforge_core::model::{
    feature_leaves, parse_thing_id, validate_envelope, Envelope, FeatureLeaf, ModelError, Permission, Policy,
    ResourcePath, ThingId, Timestamp, DEVICE_HEADER, MANAGED_ATTRIBUTES, TIMESTAMP_HEADER,
};
use twinforge_core::platform::Service;
use twinforge_core::registry::{DeleteMode, Kind, Registry, RegistryConfig, RegistryError};
use twinforge_core::timeseries::Query;
use twinforge_core::watchdog::{replay, ValueSpec, Watchdog, WatchdogDeviceConfig, WatchdogTenantConfig};

type Outcome = Result<String, String>;

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 7] = [
        ("c1", "hierarchy invariants", c1_hierarchy),
        ("c2", "core flow 27x100", c2_core_flow),
        ("c3", "watchdog oracle", c3_watchdog),
        ("c4", "model round trip", c4_model_round_trip),
        ("c5", "template substitution", c5_templates),
        ("c6", "fault tolerance", c6_faults),
        ("c7", "latency trend", c7_trend),
    ];
    let mut failed = 0;
    for (i, (key, name, f)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|x| x == key) {
            continue;
        }
        let started = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS [{secs:.1}s] {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL [{secs:.1}s] {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// 1. hierarchy

const SEQUENCES: usize = 10_000;
const NS: &str = "h";
const POOL: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
const PLAN_CAP: usize = 120;

#[derive(Debug, Clone, Default, PartialEq)]
struct RefNode {
    is_type: bool,
    parents: BTreeSet<String>,
    children: BTreeMap<String, u64>,
    type_of: Option<String>,
}

/// Reference hierarchy written from the rules alone.
#[derive(Debug, Default)]
struct RefRegistry {
    nodes: BTreeMap<String, RefNode>,
}

type RefResult = Result<(), &'static str>;

fn full(name: &str) -> String {
    format!("{NS}:{name}")
}

fn short(id: &str) -> &str {
    id.split_once(':').map(|(_, n)| n).unwrap_or(id)
}

impl RefRegistry {
    fn create(&mut self, id: &str, is_type: bool) -> RefResult {
        if self.nodes.contains_key(id) {
            return Err("DuplicateId");
        }
        self.nodes.insert(id.to_string(), RefNode { is_type, ..Default::default() });
        Ok(())
    }

    fn reaches(&self, from: &str, to: &str) -> bool {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from.to_string()];
        while let Some(cur) = stack.pop() {
            if cur == to {
                return true;
            }
            if seen.insert(cur.clone()) {
                if let Some(n) = self.nodes.get(&cur) {
                    stack.extend(n.children.keys().cloned());
                }
            }
        }
        false
    }

    fn link(&mut self, p: &str, c: &str) -> RefResult {
        let (Some(pn), Some(cn)) = (self.nodes.get(p), self.nodes.get(c)) else { return Err("NotFound") };
        if pn.is_type != cn.is_type {
            return Err("KindMismatch");
        }
        if p == c {
            return Err("CycleCreated");
        }
        if pn.is_type {
            if self.reaches(c, p) {
                return Err("CycleCreated");
            }
        } else {
            if !cn.parents.is_empty() {
                return Err("TwinAlreadyHasParent");
            }
            let mut up = pn.parents.iter().next().cloned();
            while let Some(a) = up {
                if a == c {
                    return Err("CycleCreated");
                }
                up = self.nodes.get(&a).and_then(|n| n.parents.iter().next().cloned());
            }
        }
        *self.nodes.get_mut(p).unwrap().children.entry(c.to_string()).or_insert(0) += 1;
        self.nodes.get_mut(c).unwrap().parents.insert(p.to_string());
        Ok(())
    }

    fn unlink(&mut self, p: &str, c: &str) -> RefResult {
        if !self.nodes.contains_key(p) || !self.nodes.contains_key(c) {
            return Err("NotFound");
        }
        if self.nodes.get_mut(p).unwrap().children.remove(c).is_none() {
            return Err("NotLinked");
        }
        self.nodes.get_mut(c).unwrap().parents.remove(p);
        Ok(())
    }

    /// `(twin, type, parent twin)` in creation order, or `None` past the cap.
    fn plan(&self, ty: &str, new: &str) -> Option<Vec<(String, String, Option<String>)>> {
        let mut out = Vec::new();
        let mut queue = VecDeque::from([(new.to_string(), ty.to_string(), None)]);
        while let Some((id, t, parent)) = queue.pop_front() {
            for (ct, m) in &self.nodes[&t].children {
                for k in 1..=*m {
                    queue.push_back((full(&format!("{}_{}_{k}", short(&id), short(ct))), ct.clone(), Some(id.clone())));
                }
            }
            out.push((id, t, parent));
            if out.len() + queue.len() > PLAN_CAP {
                return None;
            }
        }
        Some(out)
    }

    fn instantiate(&mut self, plan: &[(String, String, Option<String>)]) -> RefResult {
        let mut seen = BTreeSet::new();
        for (id, _, _) in plan {
            if !seen.insert(id) || self.nodes.contains_key(id) {
                return Err("DuplicateId");
            }
        }
        for (id, t, parent) in plan {
            let mut n = RefNode { type_of: Some(t.clone()), ..Default::default() };
            n.parents.extend(parent.clone());
            self.nodes.insert(id.clone(), n);
        }
        for (id, _, parent) in plan {
            if let Some(p) = parent {
                self.nodes.get_mut(p).unwrap().children.insert(id.clone(), 1);
            }
        }
        Ok(())
    }

    fn delete(&mut self, id: &str, cascade: bool) -> RefResult {
        let Some(n) = self.nodes.get(id).cloned() else { return Err("NotFound") };
        if n.is_type && cascade {
            return Err("CascadeOnType");
        }
        for p in &n.parents {
            if let Some(pn) = self.nodes.get_mut(p) {
                pn.children.remove(id);
            }
        }
        if cascade {
            let mut stack = vec![id.to_string()];
            while let Some(cur) = stack.pop() {
                if let Some(cn) = self.nodes.remove(&cur) {
                    stack.extend(cn.children.into_keys());
                }
            }
        } else {
            for c in n.children.keys() {
                if let Some(cn) = self.nodes.get_mut(c) {
                    cn.parents.remove(id);
                }
            }
            self.nodes.remove(id);
        }
        Ok(())
    }
}

fn tag(e: &RegistryError) -> &'static str {
    match e {
        RegistryError::NotFound(_) => "NotFound",
        RegistryError::DuplicateId(_) => "DuplicateId",
        RegistryError::KindMismatch { .. } => "KindMismatch",
        RegistryError::TwinAlreadyHasParent { .. } => "TwinAlreadyHasParent",
        RegistryError::CycleCreated { .. } => "CycleCreated",
        RegistryError::NotLinked { .. } => "NotLinked",
        RegistryError::NotAType(_) => "NotAType",
        RegistryError::CascadeOnType => "CascadeOnType",
        RegistryError::ManagedAttributeViolation(_) => "Managed",
        RegistryError::Model(ModelError::ManagedAttributeViolation(_)) => "Managed",
        _ => "Other",
    }
}

fn tid(s: &str) -> ThingId {
    parse_thing_id(s).unwrap()
}

fn outcome_of<T>(r: &Result<T, RegistryError>) -> Result<(), &'static str> {
    match r {
        Ok(_) => Ok(()),
        Err(e) => Err(tag(e)),
    }
}

/// Compares the registry with the reference and checks the structural
/// invariants on the registry's own data.
fn check_state(reg: &Registry, model: &RefRegistry) -> Result<(), String> {
    let mut things = BTreeMap::new();
    for r in reg.list_twins().map_err(|e| e.to_string())? {
        things.insert(r.thing_id.to_string(), (false, r));
    }
    for r in reg.list_types().map_err(|e| e.to_string())? {
        things.insert(r.thing_id.to_string(), (true, r));
    }
    let ids: BTreeSet<&String> = things.keys().collect();
    let want: BTreeSet<&String> = model.nodes.keys().collect();
    ensure!(ids == want, "ids {ids:?} != reference {want:?}");
    let mut children = BTreeMap::new();
    let mut parents = BTreeMap::new();
    for (id, (is_type, rec)) in &things {
        let t = tid(id);
        let n = &model.nodes[id];
        ensure!(*is_type == n.is_type, "{id}: kind differs");
        let kind = reg.kind(&t).map_err(|e| e.to_string())?;
        ensure!((kind == Kind::Type) == n.is_type, "{id}: kind() differs");
        let ch: BTreeMap<String, u64> =
            reg.children_with_multiplicity(&t).map_err(|e| e.to_string())?.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        ensure!(ch == n.children, "{id}: children {ch:?} != {:?}", n.children);
        let ps: BTreeSet<String> = reg.list_parents(&t).map_err(|e| e.to_string())?.into_iter().map(|p| p.to_string()).collect();
        ensure!(ps == n.parents, "{id}: parents {ps:?} != {:?}", n.parents);
        // attribute representation
        let a = &rec.attributes;
        match (n.is_type, a.get("parent")) {
            (false, Some(Value::Null)) => ensure!(ps.is_empty(), "{id}: null parent with parents"),
            (false, Some(Value::String(p))) => ensure!(ps.len() == 1 && ps.contains(p), "{id}: parent attribute"),
            (true, Some(Value::Object(m))) => {
                ensure!(m.keys().cloned().collect::<BTreeSet<_>>() == ps, "{id}: parent attribute keys")
            }
            (_, other) => return Err(format!("{id}: bad parent attribute {other:?}")),
        }
        let Some(Value::Object(cm)) = a.get("children") else { return Err(format!("{id}: children attribute")) };
        ensure!(cm.len() == ch.len() && ch.iter().all(|(k, v)| cm.get(k).and_then(Value::as_u64) == Some(*v)), "{id}: children attribute");
        ensure!(a.get("type").and_then(Value::as_str).map(String::from) == n.type_of, "{id}: type attribute");
        children.insert(id.clone(), ch);
        parents.insert(id.clone(), ps);
    }
    // link consistency and same-kind edges
    for (p, ch) in &children {
        for c in ch.keys() {
            ensure!(parents.get(c).is_some_and(|ps| ps.contains(p)), "{p} -> {c} missing back link");
            ensure!(things[p].0 == things[c].0, "{p} -> {c} crosses kinds");
        }
    }
    for (c, ps) in &parents {
        for p in ps {
            ensure!(children.get(p).is_some_and(|ch| ch.contains_key(c)), "{c} names parent {p} without edge");
        }
    }
    // twins form a forest
    for (id, (is_type, _)) in &things {
        if *is_type {
            continue;
        }
        ensure!(parents[id].len() <= 1, "twin {id} has several parents");
        let mut seen = BTreeSet::from([id.clone()]);
        let mut cur = parents[id].iter().next().cloned();
        while let Some(p) = cur {
            ensure!(seen.insert(p.clone()), "twin cycle through {id}");
            cur = parents[&p].iter().next().cloned();
        }
    }
    // types form a DAG (Kahn)
    let mut indeg: BTreeMap<&String, usize> =
        things.iter().filter(|(_, (t, _))| *t).map(|(id, _)| (id, parents[id].len())).collect();
    let mut ready: Vec<&String> = indeg.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut done = 0;
    while let Some(n) = ready.pop() {
        done += 1;
        for c in children[n].keys() {
            let d = indeg.get_mut(c).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(c);
            }
        }
    }
    ensure!(done == indeg.len(), "type graph has a cycle");
    Ok(())
}

#[derive(Default)]
struct C1Stats {
    ops: usize,
    errors: BTreeMap<&'static str, usize>,
    managed_update: BTreeSet<&'static str>,
    managed_create: BTreeSet<&'static str>,
    instantiated: usize,
}

fn open_registry(dir: &std::path::Path) -> Arc<Registry> {
    let bus = Bus::open(dir.join("bus"), BusOptions::default()).unwrap();
    let reg = Registry::open(dir.join("registry.kv"), RegistryConfig::default(), bus, twinforge_core::clock::system()).unwrap();
    reg.create_policy(Policy {
        policy_id: "h:p".into(),
        entries: BTreeMap::from([("admin".to_string(), Permission { read: true, write: true })]),
    })
    .unwrap();
    reg
}

fn run_sequence(seed: u64, stats: &mut C1Stats) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let reg = open_registry(dir.path());
    let mut model = RefRegistry::default();
    let ops = rng.random_range(10..30);
    let pick = |rng: &mut StdRng, model: &RefRegistry| -> String {
        if !model.nodes.is_empty() && rng.random_bool(0.7) {
            let i = rng.random_range(0..model.nodes.len());
            model.nodes.keys().nth(i).unwrap().clone()
        } else {
            full(POOL[rng.random_range(0..POOL.len())])
        }
    };
    for step in 0..ops {
        let roll = rng.random_range(0..100);
        let (desc, got, want) = if roll < 25 {
            let id = full(POOL[rng.random_range(0..POOL.len())]);
            let is_type = rng.random_bool(0.5);
            let kind = if is_type { Kind::Type } else { Kind::Twin };
            let got = outcome_of(&reg.create(kind, tid(&id), "h:p", Map::new(), BTreeMap::new()));
            (format!("create {id} type={is_type}"), got, model.create(&id, is_type))
        } else if roll < 55 {
            let (p, c) = (pick(&mut rng, &model), pick(&mut rng, &model));
            (format!("link {p} -> {c}"), outcome_of(&reg.link(&tid(&p), &tid(&c))), model.link(&p, &c))
        } else if roll < 65 {
            let (p, c) = (pick(&mut rng, &model), pick(&mut rng, &model));
            (format!("unlink {p} -> {c}"), outcome_of(&reg.unlink(&tid(&p), &tid(&c))), model.unlink(&p, &c))
        } else if roll < 75 {
            let t = pick(&mut rng, &model);
            let new = full(&format!("i{}", rng.random_range(0..3)));
            let want = match model.nodes.get(&t) {
                None => Err("NotFound"),
                Some(n) if !n.is_type => Err("NotAType"),
                Some(_) => match model.plan(&t, &new) {
                    None => continue,
                    Some(plan) => model.instantiate(&plan),
                },
            };
            let got = outcome_of(&reg.instantiate(&tid(&t), &tid(&new), "h:p"));
            if got.is_ok() {
                stats.instantiated += 1;
            }
            (format!("instantiate {t} as {new}"), got, want)
        } else if roll < 88 {
            let id = pick(&mut rng, &model);
            let cascade = rng.random_bool(0.5);
            let mode = if cascade { DeleteMode::Cascade } else { DeleteMode::Orphan };
            (format!("delete {id} cascade={cascade}"), outcome_of(&reg.delete(&tid(&id), mode)), model.delete(&id, cascade))
        } else if roll < 95 && !model.nodes.is_empty() {
            let id = pick(&mut rng, &model);
            if !model.nodes.contains_key(&id) {
                continue;
            }
            let k = MANAGED_ATTRIBUTES[rng.random_range(0..4)];
            let env = if rng.random_bool(0.5) {
                Envelope::modify(&tid(&id), &format!("/attributes/{k}"), json!("h:x"))
            } else {
                Envelope::modify(&tid(&id), "/attributes", json!({ "note": 1, k: {"h:x": 1} }))
            };
            let got = outcome_of(&reg.update(&tid(&id), &env, "admin"));
            stats.managed_update.insert(k);
            (format!("write {k} on {id}"), got, Err("Managed"))
        } else {
            let id = full(POOL[rng.random_range(0..POOL.len())]);
            let k = MANAGED_ATTRIBUTES[rng.random_range(0..4)];
            let attrs = Map::from_iter([(k.to_string(), json!(true))]);
            let got = outcome_of(&reg.create(Kind::Twin, tid(&id), "h:p", attrs, BTreeMap::new()));
            stats.managed_create.insert(k);
            (format!("create {id} with {k}"), got, Err("Managed"))
        };
        stats.ops += 1;
        if let Err(e) = want {
            *stats.errors.entry(e).or_insert(0) += 1;
        }
        if got != want {
            return Err(format!("seed {seed} step {step}: {desc}: registry {got:?}, reference {want:?}"));
        }
        check_state(&reg, &model).map_err(|e| format!("seed {seed} step {step} after {desc}: {e}"))?;
    }
    Ok(())
}

fn c1_hierarchy() -> Outcome {
    let started = Instant::now();
    let mut stats = C1Stats::default();
    for seed in 0..SEQUENCES as u64 {
        run_sequence(seed, &mut stats)?;
    }
    let elapsed = started.elapsed().as_secs_f64();
    ensure!(stats.managed_update.len() == 4, "managed updates covered {:?}", stats.managed_update);
    ensure!(stats.managed_create.len() == 4, "managed creates covered {:?}", stats.managed_create);
    ensure!(elapsed < 60.0, "took {elapsed:.1}s, limit 60s");
    Ok(format!(
        "{SEQUENCES} sequences, {} ops, {} instantiations, rejections {:?}",
        stats.ops, stats.instantiated, stats.errors
    ))
}

// ---------------------------------------------------------------------------
// 2. core flow

fn c2_core_flow() -> Outcome {
    let started = Instant::now();
    let cfg = ScenarioConfig { sensors: 27, clients: 27, messages: 100, repetitions: 1, ..Default::default() };
    let bed = Testbed::new(&cfg).map_err(|e| e.to_string())?;
    let start = Timestamp::now();
    let (samples, _) = drive(&bed, &cfg, None);
    wait_for_drain(&bed, &cfg, samples.len());
    let rep = measure(&bed, &cfg, &samples, Path::Core, start);
    let acc = rep.core.unwrap_or_default();
    let all = bed.platform.ts.query(&Query { feature: Some("value".into()), ..Default::default() }).map_err(|e| e.to_string())?;
    let tagged = all.iter().filter(|p| p.originator() == GATEWAY_SUBJECT).count();
    // independent count by (sensor, key)
    let keys: BTreeSet<(String, i64)> = all.iter().map(|p| (p.thing_id.to_string(), p.timestamp.0)).collect();
    let elapsed = started.elapsed().as_secs_f64();
    ensure!(samples.len() == 2700, "sent {}", samples.len());
    ensure!(all.len() == 2700 && keys.len() == 2700, "stored {} points, {} distinct", all.len(), keys.len());
    ensure!(acc.lost == 0 && acc.duplicates == 0 && acc.unexpected == 0, "{acc:?}");
    ensure!(tagged == all.len(), "{} points not tagged gateway", all.len() - tagged);
    ensure!(elapsed < 120.0, "took {elapsed:.1}s, limit 120s");
    Ok(format!("stored {}, lost 0, duplicates 0, mean latency {:.4}s", all.len(), rep.latency.mean_s))
}

// ---------------------------------------------------------------------------
// 3. watchdog

const BASE_S: i64 = 1_704_067_200;

fn at_ms(ms: i64) -> Timestamp {
    Timestamp(BASE_S * 1_000_000_000 + ms * 1_000_000)
}

struct Trace {
    times_ms: Vec<i64>,
    values: Vec<f64>,
    end_ms: i64,
}

fn gen_trace(rng: &mut StdRng) -> Trace {
    let n = rng.random_range(4..14);
    let outage_at = rng.random_range(2..n);
    let mut t = 0;
    let mut times_ms = Vec::new();
    for i in 0..n {
        if i > 0 {
            t += if i == outage_at || rng.random_bool(0.15) {
                rng.random_range(5_000..20_000)
            } else {
                rng.random_range(150..4_000)
            };
        }
        times_ms.push(t);
    }
    let values = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
    Trace { times_ms, values, end_ms: t + rng.random_range(0..15_000) }
}

/// Expected behaviour in integer milliseconds: dispatches `(at, value)` and
/// the interval in force after each message.
struct Expected {
    dispatches: Vec<(i64, f64)>,
    intervals: Vec<Option<i64>>,
    resumed_after_silence: Vec<bool>,
}

fn simulate(tr: &Trace) -> Expected {
    let mut out = Expected { dispatches: Vec::new(), intervals: Vec::new(), resumed_after_silence: Vec::new() };
    let mut interval: Option<i64> = None;
    let mut last: Option<(i64, f64)> = None;
    let mut fired_since_last = false;
    let fire_until = |until: i64, interval: Option<i64>, last: Option<(i64, f64)>, fired: &mut bool, out: &mut Expected| {
        let (Some(iv), Some((t0, v))) = (interval, last) else { return };
        let first = t0 + iv;
        if first > until {
            return;
        }
        let mut k = 0;
        // fires at t0 + iv, t0 + 2 iv, ... while not after `until`
        while t0 + (k + 1) * iv <= until {
            out.dispatches.push((t0 + (k + 1) * iv, v));
            k += 1;
        }
        *fired = true;
    };
    for (&t, &v) in tr.times_ms.iter().zip(&tr.values) {
        fire_until(t, interval, last, &mut fired_since_last, &mut out);
        out.resumed_after_silence.push(fired_since_last);
        if let (Some((t0, _)), false) = (last, fired_since_last) {
            let secs = ((t - t0) + 999) / 1000;
            interval = Some(secs.max(1) * 1000 + 200);
        }
        last = Some((t, v));
        fired_since_last = false;
        out.intervals.push(interval);
    }
    fire_until(tr.end_ms, interval, last, &mut fired_since_last, &mut out);
    out
}

fn telemetry(device: &str, v: f64) -> (Headers, Vec<u8>, Vec<FeatureLeaf>) {
    let env = Envelope::modify(&tid(device), "/features/temperature/properties/value", json!(v));
    let leaves = feature_leaves(&ResourcePath::parse(&env.path).unwrap(), &env.value);
    (Headers::from([(DEVICE_HEADER.to_string(), device.to_string())]), env.to_bytes(), leaves)
}

fn device_config(device: &str, topic: &str) -> WatchdogDeviceConfig {
    WatchdogDeviceConfig {
        device_id: device.into(),
        active: true,
        ml_input_topic: topic.into(),
        required_values: vec![ValueSpec::new(Format::Float64, "temperature")],
        learned_interval_s: None,
        timer: None,
    }
}

fn wait_until(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let start = Instant::now();
    while start.elapsed() < limit {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(1));
    }
    f()
}

fn run_trace(k: usize, tr: &Trace, want: &Expected) -> Result<usize, String> {
    let device = "wd:sensor";
    let ml_topic = "wd/ml-in";
    // replay on virtual time
    let msgs: Vec<(Timestamp, Vec<FeatureLeaf>)> =
        tr.times_ms.iter().zip(&tr.values).map(|(t, v)| (at_ms(*t), telemetry(device, *v).2)).collect();
    let replayed: Vec<(Timestamp, Vec<u8>)> = replay(device_config(device, ml_topic), &msgs, at_ms(tr.end_ms), &Metrics::default())
        .into_iter()
        .map(|d| (d.at, d.bytes))
        .collect();
    let expected: Vec<(Timestamp, Vec<u8>)> =
        want.dispatches.iter().map(|(t, v)| (at_ms(*t), v.to_le_bytes().to_vec())).collect();
    ensure!(replayed == expected, "trace {k}: replay {:?} != reference {:?}", times(&replayed), times(&expected));

    // live service on a manual clock
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bus = Bus::open(dir.path().join("bus"), BusOptions::default()).map_err(|e| e.to_string())?;
    let clock = ManualClock::new(at_ms(0));
    let wd = Watchdog::open(dir.path().join("wd.kv"), SyncPolicy::Os, bus.clone(), clock.clone(), Arc::new(Metrics::default()))
        .map_err(|e| e.to_string())?;
    wd.create_tenant(WatchdogTenantConfig { tenant_id: "wd".into(), active: true, devices: vec![device_config(device, ml_topic)] })
        .map_err(|e| e.to_string())?;
    wd.start();
    let mut retained = 0;
    for (i, (&t, &v)) in tr.times_ms.iter().zip(&tr.values).enumerate() {
        clock.set(at_ms(t));
        let (h, payload, _) = telemetry(device, v);
        let mut h = h;
        h.insert(TIMESTAMP_HEADER.into(), at_ms(t).to_rfc3339());
        bus.publish(&telemetry_topic("wd"), &h, &payload).map_err(|e| e.to_string())?;
        let seen = wait_until(Duration::from_secs(5), || {
            wd.get_device("wd", device).ok().and_then(|d| d.timer).and_then(|t| t.last_message) == Some(at_ms(t))
        });
        ensure!(seen, "trace {k}: message {i} not processed");
        let view = wd.get_device("wd", device).map_err(|e| e.to_string())?;
        let got = view.learned_interval_s;
        let exp = want.intervals[i].map(|ms| ms as f64 / 1000.0);
        let same = match (got, exp) {
            (Some(a), Some(b)) => (a - b).abs() < 1e-9,
            (None, None) => true,
            _ => false,
        };
        ensure!(same, "trace {k}: interval after message {i} is {got:?}, expected {exp:?}");
        if i > 0 && want.resumed_after_silence[i] {
            ensure!(want.intervals[i] == want.intervals[i - 1], "trace {k}: reference changed interval after silence");
            retained += 1;
        }
    }
    clock.set(at_ms(tr.end_ms));
    let end = at_ms(tr.end_ms);
    let settled = wait_until(Duration::from_secs(5), || {
        let deadline_passed = wd
            .get_device("wd", device)
            .ok()
            .and_then(|d| d.timer)
            .is_some_and(|t| t.deadline.is_none_or(|d| d > end));
        deadline_passed && bus.end_offset(ml_topic).unwrap_or(0) as usize >= expected.len()
    });
    ensure!(settled, "trace {k}: live dispatches did not settle");
    let mut live = Vec::new();
    for off in 0..bus.end_offset(ml_topic).map_err(|e| e.to_string())? {
        let rec = bus.read(ml_topic, off).map_err(|e| e.to_string())?.ok_or("missing record")?;
        let ts = rec.headers.get(TIMESTAMP_HEADER).ok_or("dispatch without x-ts")?;
        live.push((Timestamp::parse(ts).map_err(|e| e.to_string())?, rec.payload));
    }
    ensure!(live == expected, "trace {k}: live {:?} != reference {:?}", times(&live), times(&expected));
    wd.shutdown();
    Ok(retained)
}

fn times(d: &[(Timestamp, Vec<u8>)]) -> Vec<i64> {
    d.iter().map(|(t, _)| (t.0 - at_ms(0).0) / 1_000_000).collect()
}

fn c3_watchdog() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let (mut dispatches, mut retained, mut intervals) = (0, 0, 0);
    for k in 0..100 {
        let tr = gen_trace(&mut rng);
        let want = simulate(&tr);
        // independent check of the interval formula on every learned interval
        for (i, iv) in want.intervals.iter().enumerate().skip(1) {
            if !want.resumed_after_silence[i] {
                let gap_s = (tr.times_ms[i] - tr.times_ms[i - 1]) as f64 / 1000.0;
                let formula = gap_s.ceil().max(1.0) + 0.2;
                ensure!(iv.map(|ms| ms as f64 / 1000.0) == Some(formula), "trace {k}: interval {iv:?} vs {formula}");
                intervals += 1;
            }
        }
        retained += run_trace(k, &tr, &want)?;
        dispatches += want.dispatches.len();
    }
    ensure!(retained >= 100, "only {retained} resumptions after silence");
    Ok(format!("100 traces, {dispatches} dispatches matched, {intervals} intervals checked, {retained} retained across silence"))
}

// ---------------------------------------------------------------------------
// 4. model round trip

fn c4_mode(mode: RouteMode) -> Result<String, String> {
    let cfg = ScenarioConfig {
        sensors: 1,
        clients: 1,
        messages: 50,
        repetitions: 1,
        pipeline: Pipeline::Ml,
        route_mode: mode,
        model_weight: 2.0,
        ..Default::default()
    };
    let bed = Testbed::new(&cfg).map_err(|e| e.to_string())?;
    let reg = &bed.platform.registry;
    let source = model_twin();
    let before = reg.get(&source).map_err(|e| e.to_string())?;
    let start = Timestamp::now();
    let (samples, _) = drive(&bed, &cfg, None);
    wait_for_drain(&bed, &cfg, samples.len());
    let rep = measure(&bed, &cfg, &samples, Path::Ml, start);
    let acc = rep.ml.unwrap_or_default();
    ensure!(samples.len() == 50, "sent {}", samples.len());
    ensure!(acc.lost == 0 && acc.duplicates == 0 && acc.unexpected == 0, "{mode:?}: {acc:?}");
    let by_key: HashMap<i64, f64> = samples.iter().map(|s| (s.sent_at.0, s.x)).collect();
    let points = bed
        .platform
        .ts
        .query(&Query { thing: Some(bed.prediction_twin.clone()), feature: Some(PREDICTION_FEATURE.into()), ..Default::default() })
        .map_err(|e| e.to_string())?;
    ensure!(points.len() == 50, "{mode:?}: {} prediction points", points.len());
    let mut worst: f64 = 0.0;
    for p in &points {
        ensure!(p.originator() == ROUTE_SUBJECT && p.originator() != GATEWAY_SUBJECT, "originator {}", p.originator());
        let x = by_key.get(&p.timestamp.0).ok_or("prediction for unknown input")?;
        let y = p.value.as_f64().ok_or("non-numeric prediction")?;
        worst = worst.max((y - 2.0 * x).abs());
    }
    ensure!(worst <= 1e-12, "{mode:?}: error {worst:e}");
    let latest = samples.iter().max_by_key(|s| s.sent_at).unwrap();
    let twin = reg.get(&bed.prediction_twin).map_err(|e| e.to_string())?;
    let current = twin.property(PREDICTION_FEATURE, "value").and_then(|v| v.as_f64());
    ensure!(current.is_some_and(|y| (y - 2.0 * latest.x).abs() <= 1e-12), "{mode:?}: twin holds {current:?}");
    if mode == RouteMode::FutureCopy {
        let after = reg.get(&source).map_err(|e| e.to_string())?;
        ensure!(after == before, "source twin changed");
        let copies: Vec<String> = reg
            .list_twins()
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|r| r.thing_id.to_string())
            .filter(|id| id.ends_with("_predicted"))
            .collect();
        ensure!(copies == vec![bed.prediction_twin.to_string()], "predicted twins {copies:?}");
    }
    Ok(format!("{mode:?} max error {worst:e}"))
}

fn c4_model_round_trip() -> Outcome {
    let a = c4_mode(RouteMode::Update)?;
    let b = c4_mode(RouteMode::FutureCopy)?;
    Ok(format!("{a}; {b}; one predicted twin, source unchanged"))
}

// ---------------------------------------------------------------------------
// 5. templates

fn sensor_template() -> Value {
    json!({
        "topic": "test/DHT22/things/twin/commands/modify",
        "path": "/features",
        "value": {
            "temperature": { "properties": { "value": "{0}" } },
            "humidity": { "properties": { "value": "{1}" } }
        }
    })
}

/// Every object key path in a JSON value.
fn key_paths(v: &Value, prefix: &str, out: &mut BTreeSet<String>) {
    match v {
        Value::Object(m) => {
            for (k, c) in m {
                let p = format!("{prefix}/{k}");
                out.insert(p.clone());
                key_paths(c, &p, out);
            }
        }
        Value::Array(a) => {
            for (i, c) in a.iter().enumerate() {
                key_paths(c, &format!("{prefix}[{i}]"), out);
            }
        }
        _ => {}
    }
}

fn template_strategy() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(json!("{0}")),
        Just(json!("{1}")),
        Just(json!("{2}")),
        "[a-z ]{0,6}".prop_map(Value::from),
        "x\\{[0-2]\\}y".prop_map(Value::from),
        any::<i32>().prop_map(Value::from),
        any::<bool>().prop_map(Value::from),
        Just(Value::Null),
    ];
    leaf.prop_recursive(4, 40, 5, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            prop::collection::btree_map("[a-z{}0-9]{1,5}", inner, 0..5).prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

fn c5_templates() -> Outcome {
    let mut rng = StdRng::seed_from_u64(13);
    let tpl = sensor_template();
    for _ in 0..100 {
        let a: f64 = rng.random_range(-1e6..1e6);
        let b: f64 = rng.random_range(0.0..100.0);
        let env = substitute(&tpl, &[a, b]).map_err(|e| e.to_string())?;
        validate_envelope(&env).map_err(|e| e.to_string())?;
        let t = &env.value["temperature"]["properties"]["value"];
        let h = &env.value["humidity"]["properties"]["value"];
        ensure!(t.is_number() && t.as_f64() == Some(a), "temperature {t} for {a}");
        ensure!(h.is_number() && h.as_f64() == Some(b), "humidity {h} for {b}");
        ensure!(env.topic == "test/DHT22/things/twin/commands/modify" && env.path == "/features", "topic/path changed");
    }
    let mut runner = TestRunner::new(PtConfig { cases: 1000, failure_persistence: None, ..PtConfig::default() });
    let outputs = [1.5, -2.25, 1e300];
    let result = runner.run(&template_strategy(), |tpl| {
        let value = twinforge_core::bridges::substitute_value(&tpl, &outputs).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let (mut before, mut after) = (BTreeSet::new(), BTreeSet::new());
        key_paths(&tpl, "", &mut before);
        key_paths(&value, "", &mut after);
        prop_assert_eq!(before, after);
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok("100 sensor template substitutions numeric and valid; key sets preserved over 1000 templates".into())
}

// ---------------------------------------------------------------------------
// 6. faults

fn c6_faults() -> Outcome {
    let cfg = ScenarioConfig {
        sensors: 1,
        clients: 1,
        messages: 10,
        period_s: 0.5,
        repetitions: 5,
        faults: all_service_faults(1.0, 1.5),
        drain_timeout_s: 30.0,
        ..Default::default()
    };
    let r = run_fault_injection(&cfg).map_err(|e| e.to_string())?;
    ensure!(r.recovery.len() == Service::ALL.len(), "{} services reported", r.recovery.len());
    let mut lines = Vec::new();
    let mut bad = Vec::new();
    for rec in &r.recovery {
        ensure!(rec.runs == 5, "{}: {} runs", rec.service, rec.runs);
        let lost = rec.core.lost + rec.ml.lost;
        lines.push(format!(
            "{} recovery {:.2}s (max {:.2}s) lost {}",
            rec.service, rec.recovery_time_s, rec.recovery_time_max_s, lost
        ));
        let durable = ["bus", "timeseries-sink", "route-consumer"].contains(&rec.service.as_str());
        if durable && lost > 0 {
            bad.push(rec.service.clone());
        }
    }
    ensure!(bad.is_empty(), "loss on durable services {bad:?}: {}", lines.join("; "));
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------------------
// 7. trend

fn c7_trend() -> Outcome {
    let cfg = ScenarioConfig {
        sensors: 27,
        messages: 20,
        repetitions: 5,
        client_sweep: vec![1, 5, 10, 17, 20, 27],
        ..Default::default()
    };
    let r = twinforge_bench::run_core_flow(&cfg).map_err(|e| e.to_string())?;
    let trend = r.trend.clone().ok_or("no trend")?;
    let points: Vec<String> = r
        .sweep
        .iter()
        .map(|p| format!("{}:{:.4}s/{:.0}msg/s", p.clients, p.latency.mean_s, p.throughput_msg_s))
        .collect();
    let detail = format!("spearman {:.3}, steps {:?}, points {}", trend.spearman_clients_latency, trend.throughput_non_increasing, points.join(" "));
    ensure!(r.lost() == 0 && r.duplicates() == 0, "lost {} duplicates {}", r.lost(), r.duplicates());
    ensure!(trend.spearman_clients_latency >= 0.8, "{detail}");
    ensure!(trend.throughput_non_increasing.iter().all(|b| *b), "{detail}");
    Ok(detail)
}
