//! Shared domain types and the canonical wire format.
//!
//! Everything here is a plain value: identifiers, thing records, command and
//! event envelopes, policies and timestamps. Operations are pure functions so
//! they can be called from any service thread.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

/// Attributes owned by the registry. They never change through generic writes.
pub const MANAGED_ATTRIBUTES: [&str; 4] = ["isType", "type", "parent", "children"];

/// Header naming the principal that produced a message.
pub const ORIGINATOR_HEADER: &str = "ditto-originator";
/// Header carrying the event time as an RFC 3339 string.
pub const TIMESTAMP_HEADER: &str = "x-ts";
/// Header carrying the authenticated device on telemetry topics.
pub const DEVICE_HEADER: &str = "device-id";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("malformed id `{0}`: expected `namespace:name`")]
    MalformedId(String),
    #[error("bad topic: {0}")]
    BadTopic(String),
    #[error("bad path: {0}")]
    BadPath(String),
    #[error("bad value: {0}")]
    BadValue(String),
    #[error("path not applicable: {0}")]
    PathNotApplicable(String),
    #[error("managed attribute `{0}` cannot be written directly")]
    ManagedAttributeViolation(String),
    #[error("envelope addresses `{envelope}` but the record is `{record}`")]
    TargetMismatch { envelope: String, record: String },
    #[error("action `{0}` cannot be applied to a record")]
    UnsupportedAction(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// ThingId

/// `namespace:name` identifier shared by twins, types, devices and policies.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ThingId {
    rendered: String,
    colon: usize,
}

impl ThingId {
    pub fn new(namespace: &str, name: &str) -> Result<Self> {
        parse_thing_id(&format!("{namespace}:{name}"))
    }

    pub fn namespace(&self) -> &str {
        &self.rendered[..self.colon]
    }

    pub fn name(&self) -> &str {
        &self.rendered[self.colon + 1..]
    }

    pub fn as_str(&self) -> &str {
        &self.rendered
    }

    /// Same namespace, name with `suffix` appended.
    pub fn with_suffix(&self, suffix: &str) -> Result<Self> {
        ThingId::new(self.namespace(), &format!("{}{}", self.name(), suffix))
    }
}

fn valid_id_part(part: &str) -> bool {
    !part.is_empty() && !part.chars().any(|c| c.is_whitespace() || c == ':' || c == '/')
}

/// Parses `namespace:name`. Both parts must be non-empty and free of
/// whitespace, colons and slashes (slashes would break topic rendering).
pub fn parse_thing_id(text: &str) -> Result<ThingId> {
    let mut parts = text.split(':');
    let (Some(namespace), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(ModelError::MalformedId(text.to_string()));
    };
    if !valid_id_part(namespace) || !valid_id_part(name) {
        return Err(ModelError::MalformedId(text.to_string()));
    }
    Ok(ThingId { rendered: text.to_string(), colon: namespace.len() })
}

impl FromStr for ThingId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        parse_thing_id(s)
    }
}

impl fmt::Display for ThingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rendered)
    }
}

impl fmt::Debug for ThingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ThingId({})", self.rendered)
    }
}

impl Serialize for ThingId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.rendered)
    }
}

impl<'de> Deserialize<'de> for ThingId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_thing_id(&s).map_err(D::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Timestamp

/// UTC instant with nanosecond resolution. Stored as an integer, rendered as
/// RFC 3339 on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const NANOS_PER_SEC: i64 = 1_000_000_000;

    pub fn now() -> Self {
        Timestamp(Utc::now().timestamp_nanos_opt().unwrap_or(i64::MAX))
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs * 1e9).round() as i64)
    }

    pub fn as_nanos(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn add_nanos(self, nanos: i64) -> Self {
        Timestamp(self.0.saturating_add(nanos))
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        Utc.timestamp_nanos(self.0)
    }

    pub fn to_rfc3339(self) -> String {
        self.to_datetime().to_rfc3339_opts(SecondsFormat::Nanos, true)
    }

    /// Accepts RFC 3339 text or a bare integer of nanoseconds.
    pub fn parse(text: &str) -> Result<Self> {
        if let Ok(n) = text.trim().parse::<i64>() {
            return Ok(Timestamp(n));
        }
        let dt = DateTime::parse_from_rfc3339(text.trim())
            .map_err(|e| ModelError::BadValue(format!("timestamp `{text}`: {e}")))?;
        dt.timestamp_nanos_opt()
            .map(Timestamp)
            .ok_or_else(|| ModelError::BadValue(format!("timestamp `{text}` out of range")))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Timestamp::parse(&s).map_err(D::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Twin records

/// Feature property value: null, number, string or boolean.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scalar(Value);

impl Scalar {
    pub fn new(value: Value) -> Result<Self> {
        match value {
            Value::Array(_) | Value::Object(_) => {
                Err(ModelError::BadValue(format!("property values must be scalar, got {value}")))
            }
            v => Ok(Scalar(v)),
        }
    }

    pub fn null() -> Self {
        Scalar(Value::Null)
    }

    pub fn number(n: f64) -> Self {
        Scalar(serde_json::Number::from_f64(n).map(Value::Number).unwrap_or(Value::Null))
    }

    pub fn value(&self) -> &Value {
        &self.0
    }

    pub fn into_value(self) -> Value {
        self.0
    }

    pub fn is_null(&self) -> bool {
        self.0.is_null()
    }

    pub fn as_f64(&self) -> Option<f64> {
        match &self.0 {
            Value::Number(n) => n.as_f64(),
            Value::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
            _ => None,
        }
    }
}

impl Serialize for Scalar {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Scalar {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Scalar::new(Value::deserialize(d)?).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureState {
    #[serde(default)]
    pub properties: BTreeMap<String, Scalar>,
}

/// A thing as seen on the wire: identity, policy, static attributes and
/// dynamic features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TwinRecord {
    pub thing_id: ThingId,
    pub policy_id: String,
    #[serde(default)]
    pub attributes: Map<String, Value>,
    #[serde(default)]
    pub features: BTreeMap<String, FeatureState>,
}

impl TwinRecord {
    pub fn new(thing_id: ThingId, policy_id: impl Into<String>) -> Self {
        TwinRecord {
            thing_id,
            policy_id: policy_id.into(),
            attributes: Map::new(),
            features: BTreeMap::new(),
        }
    }

    pub fn property(&self, feature: &str, property: &str) -> Option<&Scalar> {
        self.features.get(feature)?.properties.get(property)
    }
}

// ---------------------------------------------------------------------------
// Policies

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Permission {
    #[serde(default)]
    pub read: bool,
    #[serde(default)]
    pub write: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Policy {
    pub policy_id: String,
    pub entries: BTreeMap<String, Permission>,
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        parse_thing_id(&self.policy_id)?;
        if !self.entries.values().any(|p| p.write) {
            return Err(ModelError::BadValue(format!(
                "policy `{}` needs at least one subject with write permission",
                self.policy_id
            )));
        }
        Ok(())
    }

    pub fn can_write(&self, subject: &str) -> bool {
        self.entries.get(subject).is_some_and(|p| p.write)
    }

    pub fn can_read(&self, subject: &str) -> bool {
        self.entries.get(subject).is_some_and(|p| p.read || p.write)
    }
}

// ---------------------------------------------------------------------------
// Envelopes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Commands,
    Events,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Create,
    Modify,
    Delete,
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Commands => "commands",
            Criterion::Events => "events",
        }
    }
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Create => "create",
            Action::Modify => "modify",
            Action::Delete => "delete",
        }
    }
}

/// Parsed `<namespace>/<name>/things/twin/<criterion>/<action>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicPath {
    pub thing: ThingId,
    pub criterion: Criterion,
    pub action: Action,
}

impl TopicPath {
    pub fn parse(topic: &str) -> Result<Self> {
        let parts: Vec<&str> = topic.split('/').collect();
        if parts.len() != 6 {
            return Err(ModelError::BadTopic(format!(
                "`{topic}` must have 6 segments `<namespace>/<name>/things/twin/<criterion>/<action>`"
            )));
        }
        let thing = ThingId::new(parts[0], parts[1])
            .map_err(|_| ModelError::BadTopic(format!("`{topic}` has an invalid thing id")))?;
        if parts[2] != "things" || parts[3] != "twin" {
            return Err(ModelError::BadTopic(format!("`{topic}` must address `things/twin`")));
        }
        let criterion = match parts[4] {
            "commands" => Criterion::Commands,
            "events" => Criterion::Events,
            other => return Err(ModelError::BadTopic(format!("unsupported criterion `{other}`"))),
        };
        let action = match parts[5] {
            "create" => Action::Create,
            "modify" => Action::Modify,
            "delete" => Action::Delete,
            other => return Err(ModelError::BadTopic(format!("unsupported action `{other}`"))),
        };
        Ok(TopicPath { thing, criterion, action })
    }

    pub fn render(&self) -> String {
        format!(
            "{}/{}/things/twin/{}/{}",
            self.thing.namespace(),
            self.thing.name(),
            self.criterion.as_str(),
            self.action.as_str()
        )
    }
}

/// A resource pointer inside a thing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResourcePath {
    Root,
    Attributes(Vec<String>),
    Features,
    Feature(String),
    Properties(String),
    Property(String, String),
}

impl ResourcePath {
    pub fn parse(path: &str) -> Result<Self> {
        if path.is_empty() {
            return Err(ModelError::BadPath("path is empty".into()));
        }
        if !path.starts_with('/') {
            return Err(ModelError::BadPath(format!("`{path}` must start with `/`")));
        }
        if path == "/" {
            return Ok(ResourcePath::Root);
        }
        let segs: Vec<&str> = path[1..].split('/').collect();
        if segs.iter().any(|s| s.is_empty()) {
            return Err(ModelError::BadPath(format!("`{path}` has an empty segment")));
        }
        let owned = |s: &str| s.to_string();
        match segs.as_slice() {
            ["attributes", rest @ ..] => Ok(ResourcePath::Attributes(rest.iter().map(|s| owned(s)).collect())),
            ["features"] => Ok(ResourcePath::Features),
            ["features", f] => Ok(ResourcePath::Feature(owned(f))),
            ["features", f, "properties"] => Ok(ResourcePath::Properties(owned(f))),
            ["features", f, "properties", p] => Ok(ResourcePath::Property(owned(f), owned(p))),
            _ => Err(ModelError::BadPath(format!("`{path}` is not an attributes or features pointer"))),
        }
    }

    pub fn segments(&self) -> Vec<String> {
        match self {
            ResourcePath::Root => vec![],
            ResourcePath::Attributes(rest) => {
                let mut v = vec!["attributes".to_string()];
                v.extend(rest.iter().cloned());
                v
            }
            ResourcePath::Features => vec!["features".into()],
            ResourcePath::Feature(f) => vec!["features".into(), f.clone()],
            ResourcePath::Properties(f) => vec!["features".into(), f.clone(), "properties".into()],
            ResourcePath::Property(f, p) => {
                vec!["features".into(), f.clone(), "properties".into(), p.clone()]
            }
        }
    }

    pub fn render(&self) -> String {
        format!("/{}", self.segments().join("/"))
    }
}

/// Protocol message: topic, resource path, value and string headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub topic: String,
    pub path: String,
    #[serde(default)]
    pub value: Value,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub headers: BTreeMap<String, String>,
}

impl Envelope {
    pub fn new(thing: &ThingId, criterion: Criterion, action: Action, path: &str, value: Value) -> Self {
        Envelope {
            topic: TopicPath { thing: thing.clone(), criterion, action }.render(),
            path: path.to_string(),
            value,
            headers: BTreeMap::new(),
        }
    }

    pub fn modify(thing: &ThingId, path: &str, value: Value) -> Self {
        Envelope::new(thing, Criterion::Commands, Action::Modify, path, value)
    }

    pub fn with_header(mut self, key: &str, value: impl Into<String>) -> Self {
        self.headers.insert(key.to_string(), value.into());
        self
    }

    pub fn topic_path(&self) -> Result<TopicPath> {
        TopicPath::parse(&self.topic)
    }

    pub fn resource_path(&self) -> Result<ResourcePath> {
        ResourcePath::parse(&self.path)
    }

    pub fn originator(&self) -> Option<&str> {
        self.headers.get(ORIGINATOR_HEADER).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("envelope serialization is infallible")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| ModelError::BadValue(format!("envelope json: {e}")))
    }
}

fn check_properties(v: &Value, at: &str) -> Result<()> {
    let obj = v
        .as_object()
        .ok_or_else(|| ModelError::BadValue(format!("{at}: properties must be an object")))?;
    for (k, p) in obj {
        if p.is_array() || p.is_object() {
            return Err(ModelError::BadValue(format!("{at}/{k}: property values must be scalar")));
        }
    }
    Ok(())
}

fn check_feature(v: &Value, at: &str) -> Result<()> {
    let obj = v
        .as_object()
        .ok_or_else(|| ModelError::BadValue(format!("{at}: feature must be an object")))?;
    for (k, inner) in obj {
        if k != "properties" {
            return Err(ModelError::BadValue(format!("{at}: unsupported feature key `{k}`")));
        }
        check_properties(inner, &format!("{at}/properties"))?;
    }
    Ok(())
}

fn check_features(v: &Value, at: &str) -> Result<()> {
    let obj = v
        .as_object()
        .ok_or_else(|| ModelError::BadValue(format!("{at}: features must be an object")))?;
    for (name, f) in obj {
        check_feature(f, &format!("{at}/{name}"))?;
    }
    Ok(())
}

fn check_thing_body(v: &Value, allow_identity: bool) -> Result<()> {
    let obj = v
        .as_object()
        .ok_or_else(|| ModelError::BadValue("value must be an object".into()))?;
    for (k, inner) in obj {
        match k.as_str() {
            "attributes" if inner.is_object() => {}
            "attributes" => return Err(ModelError::BadValue("attributes must be an object".into())),
            "features" => check_features(inner, "/features")?,
            "thingId" | "policyId" if allow_identity && inner.is_string() => {}
            other => return Err(ModelError::BadValue(format!("unsupported key `{other}`"))),
        }
    }
    Ok(())
}

/// Accepts iff topic grammar, path grammar and value shape for the action hold.
pub fn validate_envelope(e: &Envelope) -> Result<()> {
    let topic = e.topic_path()?;
    let path = e.resource_path()?;
    match topic.action {
        Action::Create => {
            if path != ResourcePath::Root {
                return Err(ModelError::BadPath("create must address `/`".into()));
            }
            check_thing_body(&e.value, true)?;
            if let Some(id) = e.value.get("thingId").and_then(Value::as_str) {
                if id != topic.thing.as_str() {
                    return Err(ModelError::BadValue(format!(
                        "thingId `{id}` does not match topic thing `{}`",
                        topic.thing
                    )));
                }
            }
        }
        Action::Delete => {
            if path != ResourcePath::Root {
                return Err(ModelError::BadPath("delete must address `/`".into()));
            }
            let empty = e.value.is_null() || e.value.as_object().is_some_and(Map::is_empty);
            if !empty {
                return Err(ModelError::BadValue("delete carries no value".into()));
            }
        }
        Action::Modify => match &path {
            ResourcePath::Root => check_thing_body(&e.value, false)?,
            ResourcePath::Attributes(rest) if rest.is_empty() => {
                if !e.value.is_object() {
                    return Err(ModelError::BadValue("attributes must be an object".into()));
                }
            }
            ResourcePath::Attributes(_) => {}
            ResourcePath::Features => check_features(&e.value, "/features")?,
            ResourcePath::Feature(f) => check_feature(&e.value, &format!("/features/{f}"))?,
            ResourcePath::Properties(f) => {
                check_properties(&e.value, &format!("/features/{f}/properties"))?
            }
            ResourcePath::Property(_, _) => {
                if e.value.is_array() || e.value.is_object() {
                    return Err(ModelError::BadValue("property values must be scalar".into()));
                }
            }
        },
    }
    Ok(())
}

/// Returns the managed attribute a modify envelope would touch, if any.
pub fn managed_attribute_touched(path: &ResourcePath, value: &Value) -> Option<String> {
    let hit = |obj: &Map<String, Value>| {
        MANAGED_ATTRIBUTES.iter().find(|k| obj.contains_key(**k)).map(|k| k.to_string())
    };
    match path {
        ResourcePath::Attributes(rest) => match rest.first() {
            Some(first) => MANAGED_ATTRIBUTES.contains(&first.as_str()).then(|| first.clone()),
            None => value.as_object().and_then(hit),
        },
        ResourcePath::Root => value.get("attributes").and_then(Value::as_object).and_then(hit),
        _ => None,
    }
}

fn merge_into(target: &mut Value, value: Value) {
    match (target, value) {
        (Value::Object(t), Value::Object(v)) => {
            for (k, inner) in v {
                merge_into(t.entry(k).or_insert(Value::Null), inner);
            }
        }
        (t, v) => *t = v,
    }
}

fn merge_at(root: &mut Value, segments: &[String], value: Value, path: &str) -> Result<()> {
    let Some((head, rest)) = segments.split_first() else {
        if value.is_object() && !(root.is_object() || root.is_null()) {
            return Err(ModelError::PathNotApplicable(format!("`{path}` addresses a non-object")));
        }
        merge_into(root, value);
        return Ok(());
    };
    if root.is_null() {
        *root = Value::Object(Map::new());
    }
    let obj = root
        .as_object_mut()
        .ok_or_else(|| ModelError::PathNotApplicable(format!("`{path}` descends through a non-object")))?;
    let child = obj.entry(head.clone()).or_insert(Value::Null);
    merge_at(child, rest, value, path)
}

/// Applies a validated modify envelope to a record.
///
/// Objects are merged recursively, arrays and scalars are replaced. Fields the
/// envelope does not address are preserved.
pub fn apply_envelope(t: &TwinRecord, e: &Envelope) -> Result<TwinRecord> {
    validate_envelope(e)?;
    let topic = e.topic_path()?;
    if topic.thing != t.thing_id {
        return Err(ModelError::TargetMismatch {
            envelope: topic.thing.to_string(),
            record: t.thing_id.to_string(),
        });
    }
    if topic.action != Action::Modify {
        return Err(ModelError::UnsupportedAction(topic.action.as_str().into()));
    }
    let path = e.resource_path()?;
    if let Some(key) = managed_attribute_touched(&path, &e.value) {
        return Err(ModelError::ManagedAttributeViolation(key));
    }

    let mut doc = serde_json::json!({
        "attributes": Value::Object(t.attributes.clone()),
        "features": serde_json::to_value(&t.features).expect("features serialize"),
    });
    merge_at(&mut doc, &path.segments(), e.value.clone(), &e.path)?;

    let attributes = match doc.get_mut("attributes").map(Value::take) {
        Some(Value::Object(m)) => m,
        Some(Value::Null) | None => Map::new(),
        Some(_) => return Err(ModelError::PathNotApplicable("attributes must stay an object".into())),
    };
    let mut features = BTreeMap::new();
    if let Some(Value::Object(fs)) = doc.get_mut("features").map(Value::take) {
        for (name, f) in fs {
            let state = match f {
                Value::Null => FeatureState::default(),
                other => serde_json::from_value::<FeatureState>(other)
                    .map_err(|err| ModelError::BadValue(format!("feature `{name}`: {err}")))?,
            };
            features.insert(name, state);
        }
    }
    Ok(TwinRecord { thing_id: t.thing_id.clone(), policy_id: t.policy_id.clone(), attributes, features })
}

/// One `(feature, property)` leaf carried by an envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLeaf {
    pub feature: String,
    pub property: String,
    pub value: Value,
}

/// Decomposes the value of an envelope into feature property leaves,
/// resolving the value relative to the envelope path. Attribute paths carry
/// no leaves.
pub fn feature_leaves(path: &ResourcePath, value: &Value) -> Vec<FeatureLeaf> {
    let mut out = Vec::new();
    let props = |f: &str, v: &Value, out: &mut Vec<FeatureLeaf>| {
        if let Some(obj) = v.as_object() {
            for (p, pv) in obj {
                out.push(FeatureLeaf { feature: f.to_string(), property: p.clone(), value: pv.clone() });
            }
        }
    };
    let feature = |f: &str, v: &Value, out: &mut Vec<FeatureLeaf>| {
        if let Some(p) = v.get("properties") {
            props(f, p, out);
        }
    };
    let features = |v: &Value, out: &mut Vec<FeatureLeaf>| {
        if let Some(obj) = v.as_object() {
            for (f, fv) in obj {
                feature(f, fv, out);
            }
        }
    };
    match path {
        ResourcePath::Root => {
            if let Some(fs) = value.get("features") {
                features(fs, &mut out);
            }
        }
        ResourcePath::Attributes(_) => {}
        ResourcePath::Features => features(value, &mut out),
        ResourcePath::Feature(f) => feature(f, value, &mut out),
        ResourcePath::Properties(f) => props(f, value, &mut out),
        ResourcePath::Property(f, p) => out.push(FeatureLeaf {
            feature: f.clone(),
            property: p.clone(),
            value: value.clone(),
        }),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sensor_template() -> Envelope {
        serde_json::from_value(json!({
            "topic": "test/DHT22/things/twin/commands/modify",
            "path": "/features",
            "value": {
                "temperature": {"properties": {"value": 21.5}},
                "humidity": {"properties": {"value": 40.0}}
            }
        }))
        .unwrap()
    }

    #[test]
    fn parses_ids() {
        let id = parse_thing_id("cepsa:LSRC3002.PF").unwrap();
        assert_eq!(id.namespace(), "cepsa");
        assert_eq!(id.name(), "LSRC3002.PF");
        let id = parse_thing_id("test:humidity_1").unwrap();
        assert_eq!((id.namespace(), id.name()), ("test", "humidity_1"));
        assert!(matches!(parse_thing_id("no_colon"), Err(ModelError::MalformedId(_))));
        for bad in ["a:b:c", ":b", "a:", "a b:c", "a:b c", ""] {
            assert!(parse_thing_id(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn id_ordering_is_lexicographic_on_rendered_form() {
        let a = parse_thing_id("a.b:c").unwrap();
        let b = parse_thing_id("a:z").unwrap();
        assert!(a < b);
    }

    #[test]
    fn validates_envelopes() {
        validate_envelope(&sensor_template()).unwrap();

        let mut e = Envelope::modify(&parse_thing_id("a:b").unwrap(), "", json!({}));
        assert!(matches!(validate_envelope(&e), Err(ModelError::BadPath(_))));

        e.topic = "a/things/twin/commands/modify".into();
        e.path = "/features".into();
        assert!(matches!(validate_envelope(&e), Err(ModelError::BadTopic(_))));

        let e = Envelope::modify(&parse_thing_id("a:b").unwrap(), "/features/x/properties/v", json!([1]));
        assert!(matches!(validate_envelope(&e), Err(ModelError::BadValue(_))));

        let e = Envelope::modify(&parse_thing_id("a:b").unwrap(), "/features/x/definition", json!(1));
        assert!(matches!(validate_envelope(&e), Err(ModelError::BadPath(_))));
    }

    #[test]
    fn apply_leaf_replace() {
        let id = parse_thing_id("test:DHT22").unwrap();
        let mut t = TwinRecord::new(id.clone(), "test:p");
        t.features.insert(
            "temperature".into(),
            FeatureState { properties: [("value".to_string(), Scalar::number(1.0))].into() },
        );
        let e = Envelope::modify(&id, "/features/temperature/properties/value", json!(2.0));
        let out = apply_envelope(&t, &e).unwrap();
        assert_eq!(out.property("temperature", "value").unwrap().as_f64(), Some(2.0));
        assert_eq!(apply_envelope(&out, &e).unwrap(), out);
    }

    #[test]
    fn apply_rejects_managed_attributes() {
        let id = parse_thing_id("test:DHT22").unwrap();
        let t = TwinRecord::new(id.clone(), "test:p");
        for (path, value) in [
            ("/attributes/isType", json!(true)),
            ("/attributes/parent", json!("x:y")),
            ("/attributes", json!({"children": {}})),
            ("/", json!({"attributes": {"type": "x:y"}})),
        ] {
            let e = Envelope::modify(&id, path, value);
            assert!(
                matches!(apply_envelope(&t, &e), Err(ModelError::ManagedAttributeViolation(_))),
                "{path}"
            );
        }
    }

    #[test]
    fn apply_path_not_applicable() {
        let id = parse_thing_id("a:b").unwrap();
        let mut t = TwinRecord::new(id.clone(), "a:p");
        t.attributes.insert("name".into(), json!("x"));
        let e = Envelope::modify(&id, "/attributes/name", json!({"a": 1}));
        assert!(matches!(apply_envelope(&t, &e), Err(ModelError::PathNotApplicable(_))));
        let e = Envelope::modify(&id, "/attributes/name/inner", json!(1));
        assert!(matches!(apply_envelope(&t, &e), Err(ModelError::PathNotApplicable(_))));
    }

    #[test]
    fn apply_checks_target() {
        let t = TwinRecord::new(parse_thing_id("a:b").unwrap(), "a:p");
        let e = Envelope::modify(&parse_thing_id("a:c").unwrap(), "/attributes/x", json!(1));
        assert!(matches!(apply_envelope(&t, &e), Err(ModelError::TargetMismatch { .. })));
    }

    #[test]
    fn leaves_follow_the_path() {
        let e = sensor_template();
        let leaves = feature_leaves(&e.resource_path().unwrap(), &e.value);
        assert_eq!(leaves.len(), 2);
        let p = ResourcePath::parse("/features/last_measured/properties").unwrap();
        let leaves = feature_leaves(&p, &json!({"value": 1, "time": "t"}));
        assert_eq!(leaves.len(), 2);
        assert!(leaves.iter().all(|l| l.feature == "last_measured"));
        assert!(feature_leaves(&ResourcePath::parse("/attributes/a").unwrap(), &json!(1)).is_empty());
    }

    #[test]
    fn timestamps_round_trip_through_rfc3339() {
        let t = Timestamp(1_704_153_600_123_456_789);
        assert_eq!(Timestamp::parse(&t.to_rfc3339()).unwrap(), t);
        assert_eq!(Timestamp::parse("42").unwrap(), Timestamp(42));
    }

    #[test]
    fn policy_needs_a_writer() {
        let mut p = Policy { policy_id: "cepsa:basic_policy".into(), entries: BTreeMap::new() };
        p.entries.insert("reader".into(), Permission { read: true, write: false });
        assert!(p.validate().is_err());
        p.entries.insert("admin".into(), Permission { read: true, write: true });
        p.validate().unwrap();
    }
}
