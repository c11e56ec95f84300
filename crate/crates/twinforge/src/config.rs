//! Platform configuration file: JSON with `${VAR}` / `${VAR:-default}`
//! interpolation from the environment.
//!
//! Provisioning is idempotent, so the same file can be applied on every
//! start against an existing data directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use twinforge_core::bridges::{BridgeError, ForwarderConfig, PredictionRoute};
use twinforge_core::connection::{ConnectionConfig, ConnectionError};
use twinforge_core::frame::SyncPolicy;
use twinforge_core::gateway::{Credentials, GatewayError, PayloadMapper, Tenant};
use twinforge_core::mlrt::{MlError, ModelDeployment};
use twinforge_core::model::{FeatureState, Policy, ThingId};
use twinforge_core::platform::{Platform, PlatformError};
use twinforge_core::registry::{Kind, RegistryError};
use twinforge_core::watchdog::{WatchdogError, WatchdogTenantConfig};

use crate::generator::GeneratorConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}, column {column}: {message}")]
    At { line: usize, column: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("provisioning failed: {0}")]
    Apply(#[from] PlatformError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ThingSpec {
    pub thing_id: ThingId,
    pub policy_id: String,
    #[serde(default)]
    pub attributes: Map<String, Value>,
    #[serde(default)]
    pub features: BTreeMap<String, FeatureState>,
}

/// A parent/child edge. For types, `multiplicity` is the number of child
/// instances each parent instance gets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub parent: ThingId,
    pub child: ThingId,
    #[serde(default = "one")]
    pub multiplicity: u64,
}

fn one() -> u64 {
    1
}

/// A twin built from a type with all its child twins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct InstanceSpec {
    pub type_id: ThingId,
    pub thing_id: ThingId,
    pub policy_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DeviceSpec {
    pub device_id: String,
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TenantSpec {
    pub tenant_id: String,
    #[serde(default)]
    pub mapper: PayloadMapper,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
    /// Device socket (length-prefixed JSON frames).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tcp_listen: Option<String>,
    #[serde(default)]
    pub sync: SyncPolicy,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub policies: Vec<Policy>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub types: Vec<ThingSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub twins: Vec<ThingSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instances: Vec<InstanceSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tenants: Vec<TenantSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub connections: Vec<ConnectionConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub watchdog: Vec<WatchdogTenantConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<ModelDeployment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub forwarders: Vec<ForwarderConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub routes: Vec<PredictionRoute>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
}

/// Replaces `${NAME}` and `${NAME:-default}` using `lookup`. `$$` is a
/// literal dollar sign.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let (mut line, mut column) = (1, 1);
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        let (at_line, at_col) = (line, column);
        column += 1;
        if c == '\n' {
            line += 1;
            column = 1;
        }
        if c != '$' {
            out.push(c);
            continue;
        }
        match chars.peek() {
            Some('$') => {
                chars.next();
                column += 1;
                out.push('$');
            }
            Some('{') => {
                chars.next();
                column += 1;
                let mut body = String::new();
                loop {
                    match chars.next() {
                        Some('}') => {
                            column += 1;
                            break;
                        }
                        Some('\n') | None => {
                            return Err(ConfigError::At {
                                line: at_line,
                                column: at_col,
                                message: "unterminated `${`".into(),
                            })
                        }
                        Some(ch) => {
                            column += 1;
                            body.push(ch);
                        }
                    }
                }
                let (name, default) = match body.split_once(":-") {
                    Some((n, d)) => (n, Some(d)),
                    None => (body.as_str(), None),
                };
                let valid = !name.is_empty() && name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_');
                if !valid {
                    return Err(ConfigError::At {
                        line: at_line,
                        column: at_col,
                        message: format!("bad variable name `{name}`"),
                    });
                }
                match lookup(name).or_else(|| default.map(str::to_string)) {
                    Some(v) => out.push_str(&v),
                    None => {
                        return Err(ConfigError::At {
                            line: at_line,
                            column: at_col,
                            message: format!("environment variable `{name}` is not set"),
                        })
                    }
                }
            }
            _ => out.push('$'),
        }
    }
    Ok(out)
}

/// 1-based line of the first occurrence of `needle`, for pointing at an
/// entry that fails validation.
fn line_of(text: &str, needle: &str) -> Option<usize> {
    let at = text.find(needle)?;
    Some(text[..at].matches('\n').count() + 1)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with(text, |k| std::env::var(k).ok())
    }

    pub fn parse_with(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let text = interpolate(text, lookup)?;
        let cfg: Config = serde_json::from_str(&text)
            .map_err(|e| ConfigError::At { line: e.line(), column: e.column(), message: e.to_string() })?;
        cfg.validate(&text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    fn validate(&self, text: &str) -> Result<(), ConfigError> {
        let fail = |key: &str, message: String| match line_of(text, &format!("\"{key}\"")) {
            Some(line) => ConfigError::At { line, column: 1, message },
            None => ConfigError::Invalid(message),
        };
        for p in &self.policies {
            p.validate().map_err(|e| fail(&p.policy_id, e.to_string()))?;
        }
        for m in &self.models {
            m.validate().map_err(|e| fail(&m.model_id, e.to_string()))?;
        }
        for f in &self.forwarders {
            f.validate().map_err(|e| fail(&f.tenant_id, e.to_string()))?;
        }
        for r in &self.routes {
            r.validate().map_err(|e| fail(&r.route_id, e.to_string()))?;
        }
        for l in &self.links {
            if l.multiplicity == 0 {
                return Err(fail(l.child.as_str(), "link multiplicity must be at least 1".into()));
            }
        }
        if let Some(g) = &self.generator {
            g.validate().map_err(|m| fail("generator", m))?;
        }
        Ok(())
    }

    /// Creates everything the file describes that does not exist yet.
    pub fn apply(&self, p: &Platform) -> Result<(), ConfigError> {
        let reg = &p.registry;
        for pol in &self.policies {
            match reg.create_policy(pol.clone()) {
                Err(RegistryError::DuplicatePolicy(_)) => {
                    reg.put_policy(pol.clone()).map_err(PlatformError::from)?;
                }
                r => {
                    r.map_err(PlatformError::from)?;
                }
            }
        }
        for (kind, specs) in [(Kind::Type, &self.types), (Kind::Twin, &self.twins)] {
            for t in specs {
                let r = reg.create(kind, t.thing_id.clone(), &t.policy_id, t.attributes.clone(), t.features.clone());
                ignore(r, |e| matches!(e, RegistryError::DuplicateId(_)))?;
            }
        }
        for l in &self.links {
            self.apply_link(p, l)?;
        }
        for i in &self.instances {
            if reg.get(&i.thing_id).is_err() {
                reg.instantiate(&i.type_id, &i.thing_id, &i.policy_id).map_err(PlatformError::from)?;
            }
        }
        for t in &self.tenants {
            let tenant = Tenant { tenant_id: t.tenant_id.clone(), mapper: t.mapper.clone() };
            match p.gateway.create_tenant(tenant) {
                Err(GatewayError::DuplicateTenant(_)) => {
                    p.gateway.set_mapper(&t.tenant_id, t.mapper.clone()).map_err(PlatformError::from)?;
                }
                r => {
                    r.map_err(PlatformError::from)?;
                }
            }
            for d in &t.devices {
                let creds = Credentials { username: d.username.clone(), password: d.password.clone() };
                let r = p.gateway.register_device(&t.tenant_id, &d.device_id, &creds);
                ignore(r, |e| matches!(e, GatewayError::DuplicateDevice(..)))?;
            }
        }
        for c in &self.connections {
            ignore(p.connections.create(c.clone()), |e| matches!(e, ConnectionError::Duplicate(_)))?;
        }
        for w in &self.watchdog {
            ignore(p.watchdog.create_tenant(w.clone()), |e| matches!(e, WatchdogError::DuplicateTenant(_)))?;
        }
        for m in &self.models {
            ignore(p.ml.deploy(m.clone()), |e| matches!(e, MlError::DuplicateModel(_)))?;
        }
        for f in &self.forwarders {
            match p.bridges.create_forwarder(f.clone()) {
                Err(BridgeError::Duplicate(_)) => {
                    p.bridges.put_forwarder(f.clone()).map_err(PlatformError::from)?;
                }
                r => {
                    r.map_err(PlatformError::from)?;
                }
            }
        }
        for r in &self.routes {
            match p.bridges.create_route(r.clone()) {
                Err(BridgeError::Duplicate(_)) => {
                    p.bridges.put_route(r.clone()).map_err(PlatformError::from)?;
                }
                res => {
                    res.map_err(PlatformError::from)?;
                }
            }
        }
        Ok(())
    }

    fn apply_link(&self, p: &Platform, l: &LinkSpec) -> Result<(), ConfigError> {
        let reg = &p.registry;
        let have = reg.children_with_multiplicity(&l.parent).map_err(PlatformError::from)?;
        let existing = have.get(&l.child).copied().unwrap_or(0);
        for _ in existing..l.multiplicity {
            reg.link(&l.parent, &l.child).map_err(PlatformError::from)?;
            if reg.kind(&l.parent).map_err(PlatformError::from)? == Kind::Twin {
                break;
            }
        }
        Ok(())
    }
}

fn ignore<T, E>(r: Result<T, E>, benign: impl Fn(&E) -> bool) -> Result<(), ConfigError>
where
    PlatformError: From<E>,
{
    match r {
        Ok(_) => Ok(()),
        Err(e) if benign(&e) => Ok(()),
        Err(e) => Err(ConfigError::Apply(e.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(k: &str) -> Option<String> {
        match k {
            "HOST" => Some("0.0.0.0".into()),
            "PORT" => Some("9000".into()),
            _ => None,
        }
    }

    #[test]
    fn interpolates_with_defaults_and_escapes() {
        let s = interpolate("${HOST}:${PORT} ${MISSING:-x} $$HOME $x", env).unwrap();
        assert_eq!(s, "0.0.0.0:9000 x $HOME $x");
    }

    #[test]
    fn missing_variable_reports_line() {
        let err = interpolate("{\n  \"listen\": \"${NOPE}\"\n}", env).unwrap_err();
        match err {
            ConfigError::At { line, column, .. } => assert_eq!((line, column), (2, 14)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn parse_errors_carry_lines() {
        let err = Config::parse_with("{\n\"listen\": \"a\",\n\"bogus\": 1\n}", env).unwrap_err();
        assert!(matches!(err, ConfigError::At { line: 3, .. }), "{err}");
        let err = Config::parse_with("{\n\"policies\": [\n{\"policyId\": \"p:x\", \"entries\": {}}\n]}", env).unwrap_err();
        assert!(matches!(err, ConfigError::At { line: 3, .. }), "{err}");
    }

    #[test]
    fn empty_object_is_a_valid_config() {
        let c = Config::parse_with("{}", env).unwrap();
        assert_eq!(c, Config::default());
    }
}
