//! `twinforge ctl`: one subcommand per HTTP endpoint.

use std::io::Write;
use std::path::PathBuf;

use base64::Engine;
use clap::{Args, Subcommand};
use percent_encoding::{utf8_percent_encode, AsciiSet, CONTROLS};
use serde_json::Value;

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8080";

#[derive(Debug, Args)]
pub struct CtlArgs {
    /// Base URL of a running server.
    #[arg(long, env = "TWINFORGE_SERVER", default_value = DEFAULT_SERVER)]
    pub server: String,
    #[command(subcommand)]
    pub command: CtlCommand,
}

// A JSON request body, inline or from a file.
#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct BodyArgs {
    /// Inline JSON body.
    #[arg(long)]
    pub data: Option<String>,
    /// File holding the JSON body; `-` reads stdin.
    #[arg(long)]
    pub file: Option<PathBuf>,
}

impl BodyArgs {
    fn read(&self) -> Result<String, CtlError> {
        if let Some(d) = &self.data {
            return Ok(d.clone());
        }
        let path = self.file.as_ref().expect("clap group");
        if path.as_os_str() == "-" {
            return std::io::read_to_string(std::io::stdin()).map_err(|e| CtlError::Io("stdin".into(), e));
        }
        std::fs::read_to_string(path).map_err(|e| CtlError::Io(path.display().to_string(), e))
    }
}

#[derive(Debug, Subcommand)]
pub enum CtlCommand {
    /// Service liveness.
    Health,
    /// Metrics in text exposition format.
    Metrics,
    /// Service status, kill and restart.
    #[command(subcommand)]
    Services(ServicesCmd),
    /// Access policies.
    #[command(subcommand)]
    Policies(PoliciesCmd),
    /// Twins and their hierarchy.
    #[command(subcommand)]
    Things(ThingsCmd),
    /// Twin types.
    #[command(subcommand)]
    Types(TypesCmd),
    /// Gateway tenants, mappers and devices.
    #[command(subcommand)]
    Tenants(TenantsCmd),
    /// Send one device message through the HTTP gateway.
    Ingest {
        tenant: String,
        device: String,
        #[arg(long)]
        username: String,
        #[arg(long)]
        password: String,
        #[command(flatten)]
        body: BodyArgs,
    },
    /// Topics, queues and raw records.
    #[command(subcommand)]
    Bus(BusCmd),
    /// Stored time series.
    #[command(subcommand)]
    Ts(TsCmd),
    /// Silent device detection.
    #[command(subcommand)]
    Watchdog(WatchdogCmd),
    /// Model deployments.
    #[command(subcommand)]
    Models(ModelsCmd),
    /// Telemetry to model input forwarding.
    #[command(subcommand)]
    Forwarders(ForwardersCmd),
    /// Model output to twin routes.
    #[command(subcommand)]
    Routes(RoutesCmd),
    /// Telemetry to twin connections.
    #[command(subcommand)]
    Connections(ConnectionsCmd),
}

#[derive(Debug, Subcommand)]
pub enum ServicesCmd {
    List,
    Kill { service: String },
    Restart { service: String },
}

#[derive(Debug, Subcommand)]
pub enum PoliciesCmd {
    List,
    Create(BodyArgs),
    Get { id: String },
    Put {
        id: String,
        #[command(flatten)]
        body: BodyArgs,
    },
    Delete { id: String },
}

#[derive(Debug, Subcommand)]
pub enum ThingsCmd {
    List {
        /// Only things without a parent.
        #[arg(long)]
        roots: bool,
    },
    Create(BodyArgs),
    Get { id: String },
    /// Set the value at a resource path, e.g. `/features/temp/properties/value`.
    Modify {
        id: String,
        #[arg(long)]
        path: String,
        /// JSON value; text that is not JSON is sent as a string.
        #[arg(long)]
        value: String,
        /// Acting subject (defaults to the server's admin subject).
        #[arg(long)]
        subject: Option<String>,
    },
    Delete {
        id: String,
        #[arg(long, value_parser = ["orphan", "cascade"])]
        mode: Option<String>,
    },
    Children { id: String },
    Parents { id: String },
    Link { id: String, child: String },
    Unlink { id: String, child: String },
}

#[derive(Debug, Subcommand)]
pub enum TypesCmd {
    #[command(flatten)]
    Common(ThingsCmd),
    /// Create a twin and its child twins from a type.
    Instantiate {
        id: String,
        #[arg(long)]
        thing_id: String,
        #[arg(long)]
        policy: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum TenantsCmd {
    List,
    Create(BodyArgs),
    Get { tenant: String },
    Delete { tenant: String },
    /// Replace the payload mapper.
    Mapper {
        tenant: String,
        #[command(flatten)]
        body: BodyArgs,
    },
    Devices { tenant: String },
    AddDevice {
        tenant: String,
        #[arg(long)]
        device: String,
        #[arg(long)]
        username: String,
        #[arg(long)]
        password: String,
    },
    RemoveDevice { tenant: String, device: String },
}

#[derive(Debug, Subcommand)]
pub enum BusCmd {
    Topics,
    Queues,
    Records {
        #[arg(long)]
        topic: String,
        #[arg(long, default_value_t = 0)]
        offset: u64,
        #[arg(long, default_value_t = 100)]
        limit: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum TsCmd {
    Query {
        #[arg(long)]
        thing: Option<String>,
        #[arg(long)]
        feature: Option<String>,
        #[arg(long)]
        property: Option<String>,
        /// RFC 3339 lower bound, inclusive.
        #[arg(long)]
        from: Option<String>,
        /// RFC 3339 upper bound, exclusive.
        #[arg(long)]
        to: Option<String>,
        #[arg(long)]
        originator: Option<String>,
        #[arg(long, default_value = "csv", value_parser = ["csv", "jsonl", "json"])]
        format: String,
    },
    Series,
}

#[derive(Debug, Subcommand)]
pub enum WatchdogCmd {
    List,
    Create(BodyArgs),
    Get { tenant: String },
    Delete { tenant: String },
    Activate { tenant: String },
    Deactivate { tenant: String },
    Devices { tenant: String },
    AddDevice {
        tenant: String,
        #[command(flatten)]
        body: BodyArgs,
    },
    Device { tenant: String, device: String },
    RemoveDevice { tenant: String, device: String },
    ActivateDevice { tenant: String, device: String },
    DeactivateDevice { tenant: String, device: String },
}

#[derive(Debug, Subcommand)]
pub enum ModelsCmd {
    List,
    Deploy(BodyArgs),
    Get { id: String },
    Undeploy { id: String },
}

#[derive(Debug, Subcommand)]
pub enum ForwardersCmd {
    List,
    Create(BodyArgs),
    Get { tenant: String },
    Put {
        tenant: String,
        #[command(flatten)]
        body: BodyArgs,
    },
    Delete { tenant: String },
    Activate { tenant: String },
    Deactivate { tenant: String },
}

#[derive(Debug, Subcommand)]
pub enum RoutesCmd {
    List,
    Create(BodyArgs),
    Get { id: String },
    Put {
        id: String,
        #[command(flatten)]
        body: BodyArgs,
    },
    Delete { id: String },
    Activate { id: String },
    Deactivate { id: String },
}

#[derive(Debug, Subcommand)]
pub enum ConnectionsCmd {
    List,
    Create(BodyArgs),
    Get { tenant: String },
    Delete { tenant: String },
    Activate { tenant: String },
    Deactivate { tenant: String },
}

#[derive(Debug, thiserror::Error)]
pub enum CtlError {
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("request body is not valid JSON: {0}")]
    Body(serde_json::Error),
    #[error("{0}")]
    Http(#[from] ureq::Error),
    #[error("server answered {status}: {body}")]
    Status { status: u16, body: String },
}

/// An HTTP request built from a command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub method: &'static str,
    pub path: String,
    pub query: Vec<(String, String)>,
    pub body: Option<String>,
    pub headers: Vec<(String, String)>,
}

impl Request {
    fn new(method: &'static str, path: String) -> Self {
        Request { method, path, query: Vec::new(), body: None, headers: Vec::new() }
    }

    fn get(path: String) -> Self {
        Self::new("GET", path)
    }

    fn post(path: String) -> Self {
        Self::new("POST", path)
    }

    fn delete(path: String) -> Self {
        Self::new("DELETE", path)
    }

    fn json(mut self, body: String) -> Self {
        self.body = Some(body);
        self
    }

    fn with_body(self, body: &BodyArgs) -> Result<Self, CtlError> {
        let text = body.read()?;
        serde_json::from_str::<Value>(&text).map_err(CtlError::Body)?;
        Ok(self.json(text))
    }

    fn query(mut self, key: &str, value: Option<impl ToString>) -> Self {
        if let Some(v) = value {
            self.query.push((key.to_string(), v.to_string()));
        }
        self
    }
}

const SEGMENT: &AsciiSet = &CONTROLS.add(b' ').add(b'"').add(b'#').add(b'%').add(b'/').add(b'<').add(b'>').add(b'?').add(b'`').add(b'{').add(b'}');

fn seg(s: &str) -> String {
    utf8_percent_encode(s, SEGMENT).to_string()
}

fn path(parts: &[&str]) -> String {
    let mut out = String::new();
    for (i, p) in parts.iter().enumerate() {
        out.push('/');
        // Even positions are literal, odd positions are user values.
        if i % 2 == 0 {
            out.push_str(p);
        } else {
            out.push_str(&seg(p));
        }
    }
    out
}

fn things(base: &str, cmd: &ThingsCmd) -> Result<Request, CtlError> {
    let api = format!("api/{base}");
    Ok(match cmd {
        ThingsCmd::List { roots } => Request::get(format!("/{api}")).query("roots", roots.then_some("true")),
        ThingsCmd::Create(b) => Request::post(format!("/{api}")).with_body(b)?,
        ThingsCmd::Get { id } => Request::get(path(&[&api, id])),
        ThingsCmd::Modify { id, path: p, value, subject } => {
            let value = serde_json::from_str::<Value>(value).unwrap_or_else(|_| Value::String(value.clone()));
            let mut r = Request::new("PATCH", path(&[&api, id]))
                .json(serde_json::json!({ "path": p, "value": value }).to_string());
            if let Some(s) = subject {
                r.headers.push((crate::api::SUBJECT_HEADER.to_string(), s.clone()));
            }
            r
        }
        ThingsCmd::Delete { id, mode } => Request::delete(path(&[&api, id])).query("mode", mode.as_ref()),
        ThingsCmd::Children { id } => Request::get(path(&[&api, id, "children"])),
        ThingsCmd::Parents { id } => Request::get(path(&[&api, id, "parents"])),
        ThingsCmd::Link { id, child } => Request::new("PUT", path(&[&api, id, "children", child])),
        ThingsCmd::Unlink { id, child } => Request::delete(path(&[&api, id, "children", child])),
    })
}

/// Maps a command to the request it sends.
pub fn request(cmd: &CtlCommand) -> Result<Request, CtlError> {
    use CtlCommand as C;
    Ok(match cmd {
        C::Health => Request::get("/health".into()),
        C::Metrics => Request::get("/metrics".into()),
        C::Services(c) => match c {
            ServicesCmd::List => Request::get("/api/services".into()),
            ServicesCmd::Kill { service } => Request::post(path(&["api/services", service, "kill"])),
            ServicesCmd::Restart { service } => Request::post(path(&["api/services", service, "restart"])),
        },
        C::Policies(c) => match c {
            PoliciesCmd::List => Request::get("/api/policies".into()),
            PoliciesCmd::Create(b) => Request::post("/api/policies".into()).with_body(b)?,
            PoliciesCmd::Get { id } => Request::get(path(&["api/policies", id])),
            PoliciesCmd::Put { id, body } => Request::new("PUT", path(&["api/policies", id])).with_body(body)?,
            PoliciesCmd::Delete { id } => Request::delete(path(&["api/policies", id])),
        },
        C::Things(c) => things("things", c)?,
        C::Types(TypesCmd::Common(c)) => things("types", c)?,
        C::Types(TypesCmd::Instantiate { id, thing_id, policy }) => Request::post(path(&["api/types", id, "instantiate"]))
            .json(serde_json::json!({ "thingId": thing_id, "policyId": policy }).to_string()),
        C::Tenants(c) => match c {
            TenantsCmd::List => Request::get("/api/tenants".into()),
            TenantsCmd::Create(b) => Request::post("/api/tenants".into()).with_body(b)?,
            TenantsCmd::Get { tenant } => Request::get(path(&["api/tenants", tenant])),
            TenantsCmd::Delete { tenant } => Request::delete(path(&["api/tenants", tenant])),
            TenantsCmd::Mapper { tenant, body } => {
                Request::new("PUT", path(&["api/tenants", tenant, "mapper"])).with_body(body)?
            }
            TenantsCmd::Devices { tenant } => Request::get(path(&["api/tenants", tenant, "devices"])),
            TenantsCmd::AddDevice { tenant, device, username, password } => {
                Request::post(path(&["api/tenants", tenant, "devices"])).json(
                    serde_json::json!({ "deviceId": device, "username": username, "password": password }).to_string(),
                )
            }
            TenantsCmd::RemoveDevice { tenant, device } => {
                Request::delete(path(&["api/tenants", tenant, "devices", device]))
            }
        },
        C::Ingest { tenant, device, username, password, body } => {
            // The gateway maps raw payloads, so the body is sent as is.
            let mut r = Request::post(path(&["ingest", tenant, device]));
            r.body = Some(body.read()?);
            let token = base64::engine::general_purpose::STANDARD.encode(format!("{username}:{password}"));
            r.headers.push(("authorization".into(), format!("Basic {token}")));
            r
        }
        C::Bus(c) => match c {
            BusCmd::Topics => Request::get("/api/bus/topics".into()),
            BusCmd::Queues => Request::get("/api/bus/queues".into()),
            BusCmd::Records { topic, offset, limit } => Request::get("/api/bus/records".into())
                .query("topic", Some(topic))
                .query("offset", Some(offset))
                .query("limit", Some(limit)),
        },
        C::Ts(c) => match c {
            TsCmd::Query { thing, feature, property, from, to, originator, format } => Request::get("/api/ts".into())
                .query("thing", thing.as_ref())
                .query("feature", feature.as_ref())
                .query("property", property.as_ref())
                .query("from", from.as_ref())
                .query("to", to.as_ref())
                .query("originator", originator.as_ref())
                .query("format", Some(format)),
            TsCmd::Series => Request::get("/api/ts/series".into()),
        },
        C::Watchdog(c) => {
            let t = "api/watchdog/tenants";
            match c {
                WatchdogCmd::List => Request::get(format!("/{t}")),
                WatchdogCmd::Create(b) => Request::post(format!("/{t}")).with_body(b)?,
                WatchdogCmd::Get { tenant } => Request::get(path(&[t, tenant])),
                WatchdogCmd::Delete { tenant } => Request::delete(path(&[t, tenant])),
                WatchdogCmd::Activate { tenant } => Request::post(path(&[t, tenant, "activate"])),
                WatchdogCmd::Deactivate { tenant } => Request::post(path(&[t, tenant, "deactivate"])),
                WatchdogCmd::Devices { tenant } => Request::get(path(&[t, tenant, "devices"])),
                WatchdogCmd::AddDevice { tenant, body } => Request::post(path(&[t, tenant, "devices"])).with_body(body)?,
                WatchdogCmd::Device { tenant, device } => Request::get(path(&[t, tenant, "devices", device])),
                WatchdogCmd::RemoveDevice { tenant, device } => Request::delete(path(&[t, tenant, "devices", device])),
                WatchdogCmd::ActivateDevice { tenant, device } => {
                    Request::post(path(&[t, tenant, "devices", device, "activate"]))
                }
                WatchdogCmd::DeactivateDevice { tenant, device } => {
                    Request::post(path(&[t, tenant, "devices", device, "deactivate"]))
                }
            }
        }
        C::Models(c) => match c {
            ModelsCmd::List => Request::get("/api/ml/models".into()),
            ModelsCmd::Deploy(b) => Request::post("/api/ml/models".into()).with_body(b)?,
            ModelsCmd::Get { id } => Request::get(path(&["api/ml/models", id])),
            ModelsCmd::Undeploy { id } => Request::delete(path(&["api/ml/models", id])),
        },
        C::Forwarders(c) => {
            let f = "api/bridges/forwarders";
            match c {
                ForwardersCmd::List => Request::get(format!("/{f}")),
                ForwardersCmd::Create(b) => Request::post(format!("/{f}")).with_body(b)?,
                ForwardersCmd::Get { tenant } => Request::get(path(&[f, tenant])),
                ForwardersCmd::Put { tenant, body } => Request::new("PUT", path(&[f, tenant])).with_body(body)?,
                ForwardersCmd::Delete { tenant } => Request::delete(path(&[f, tenant])),
                ForwardersCmd::Activate { tenant } => Request::post(path(&[f, tenant, "activate"])),
                ForwardersCmd::Deactivate { tenant } => Request::post(path(&[f, tenant, "deactivate"])),
            }
        }
        C::Routes(c) => {
            let r = "api/bridges/routes";
            match c {
                RoutesCmd::List => Request::get(format!("/{r}")),
                RoutesCmd::Create(b) => Request::post(format!("/{r}")).with_body(b)?,
                RoutesCmd::Get { id } => Request::get(path(&[r, id])),
                RoutesCmd::Put { id, body } => Request::new("PUT", path(&[r, id])).with_body(body)?,
                RoutesCmd::Delete { id } => Request::delete(path(&[r, id])),
                RoutesCmd::Activate { id } => Request::post(path(&[r, id, "activate"])),
                RoutesCmd::Deactivate { id } => Request::post(path(&[r, id, "deactivate"])),
            }
        }
        C::Connections(c) => {
            let k = "api/connections";
            match c {
                ConnectionsCmd::List => Request::get(format!("/{k}")),
                ConnectionsCmd::Create(b) => Request::post(format!("/{k}")).with_body(b)?,
                ConnectionsCmd::Get { tenant } => Request::get(path(&[k, tenant])),
                ConnectionsCmd::Delete { tenant } => Request::delete(path(&[k, tenant])),
                ConnectionsCmd::Activate { tenant } => Request::post(path(&[k, tenant, "activate"])),
                ConnectionsCmd::Deactivate { tenant } => Request::post(path(&[k, tenant, "deactivate"])),
            }
        }
    })
}

/// Response status and body text.
#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub body: String,
}

impl Reply {
    pub fn ok(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// The body, pretty-printed when it is JSON.
    pub fn display(&self) -> String {
        match serde_json::from_str::<Value>(&self.body) {
            Ok(v) => serde_json::to_string_pretty(&v).unwrap_or_else(|_| self.body.clone()),
            Err(_) => self.body.clone(),
        }
    }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

pub fn send(agent: &ureq::Agent, server: &str, req: &Request) -> Result<Reply, CtlError> {
    let url = format!("{}{}", server.trim_end_matches('/'), req.path);
    let mut resp = match req.method {
        "GET" | "DELETE" => {
            let mut b = if req.method == "GET" { agent.get(&url) } else { agent.delete(&url) };
            for (k, v) in &req.query {
                b = b.query(k, v);
            }
            for (k, v) in &req.headers {
                b = b.header(k, v);
            }
            b.call()?
        }
        method => {
            let mut b = match method {
                "POST" => agent.post(&url),
                "PUT" => agent.put(&url),
                _ => agent.patch(&url),
            };
            for (k, v) in &req.query {
                b = b.query(k, v);
            }
            for (k, v) in &req.headers {
                b = b.header(k, v);
            }
            match &req.body {
                Some(body) => b.content_type("application/json").send(body.as_str())?,
                None => b.send_empty()?,
            }
        }
    };
    let status = resp.status().as_u16();
    let body = resp.body_mut().read_to_string()?;
    Ok(Reply { status, body })
}

/// Runs one command and prints the reply. Non-2xx answers are errors.
pub fn run(args: &CtlArgs) -> Result<(), CtlError> {
    let req = request(&args.command)?;
    let reply = send(&agent(), &args.server, &req)?;
    if !reply.ok() {
        return Err(CtlError::Status { status: reply.status, body: reply.display() });
    }
    let text = reply.display();
    if !text.is_empty() {
        let mut out = std::io::stdout().lock();
        match writeln!(out, "{}", text.trim_end()) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(CtlError::Io("stdout".into(), e)),
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_encodes_values_only() {
        assert_eq!(path(&["api/things", "ns:a b", "children", "x/y"]), "/api/things/ns:a%20b/children/x%2Fy");
    }

    #[test]
    fn non_json_body_is_rejected() {
        let cmd = CtlCommand::Policies(PoliciesCmd::Create(BodyArgs { data: Some("{".into()), file: None }));
        assert!(matches!(request(&cmd), Err(CtlError::Body(_))));
    }
}
