//! HTTP API over one [`Platform`]. Paths are listed in [`crate::routes`].

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{MatchedPath, Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use twinforge_core::bridges::{BridgeError, ForwarderConfig, PredictionRoute};
use twinforge_core::bus::BusError;
use twinforge_core::connection::{ConnectionConfig, ConnectionError};
use twinforge_core::gateway::{Credentials, GatewayError, PayloadMapper, Tenant};
use twinforge_core::mlrt::{MlError, ModelDeployment};
use twinforge_core::model::{parse_thing_id, Envelope, FeatureState, ModelError, Policy, ThingId, Timestamp};
use twinforge_core::platform::{Platform, PlatformError, Service};
use twinforge_core::registry::{DeleteMode, Kind, RegistryError};
use twinforge_core::timeseries::{self, TsError};
use twinforge_core::watchdog::{WatchdogDeviceConfig, WatchdogError, WatchdogTenantConfig};

type St = State<Arc<Platform>>;

/// Subject used for modify commands when the request names none.
pub const DEFAULT_SUBJECT: &str = "admin";
pub const SUBJECT_HEADER: &str = "x-subject";
/// Set on the 404 returned for paths no route matches.
pub const NO_ROUTE_HEADER: &str = "x-no-route";

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        use RegistryError::*;
        let (status, code) = match &e {
            NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            DuplicateId(_) | DuplicatePolicy(_) => (StatusCode::CONFLICT, "duplicate"),
            UnknownPolicy(_) => (StatusCode::BAD_REQUEST, "unknown_policy"),
            PolicyInUse(..) => (StatusCode::CONFLICT, "policy_in_use"),
            ManagedAttributeViolation(_) | Model(ModelError::ManagedAttributeViolation(_)) => {
                (StatusCode::BAD_REQUEST, "managed_attribute")
            }
            KindMismatch { .. } => (StatusCode::CONFLICT, "kind_mismatch"),
            TwinAlreadyHasParent { .. } => (StatusCode::CONFLICT, "twin_already_has_parent"),
            CycleCreated { .. } => (StatusCode::CONFLICT, "cycle_created"),
            NotLinked { .. } => (StatusCode::NOT_FOUND, "not_linked"),
            NotAType(_) => (StatusCode::BAD_REQUEST, "not_a_type"),
            CascadeOnType => (StatusCode::BAD_REQUEST, "cascade_on_type"),
            Forbidden { .. } => (StatusCode::FORBIDDEN, "forbidden"),
            Model(_) => (StatusCode::BAD_REQUEST, "invalid"),
            Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid", e.to_string())
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        use GatewayError::*;
        let (status, code) = match &e {
            UnknownTenant(_) | UnknownDevice(..) => (StatusCode::NOT_FOUND, "not_found"),
            DuplicateTenant(_) | DuplicateDevice(..) | DuplicateUsername(_) => (StatusCode::CONFLICT, "duplicate"),
            AuthFailed => (StatusCode::UNAUTHORIZED, "auth_failed"),
            MappingFailed(_) => (StatusCode::BAD_REQUEST, "mapping_failed"),
            Invalid(_) => (StatusCode::BAD_REQUEST, "invalid"),
            Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<WatchdogError> for ApiError {
    fn from(e: WatchdogError) -> Self {
        use WatchdogError::*;
        let (status, code) = match &e {
            UnknownTenant(_) | UnknownDevice(..) => (StatusCode::NOT_FOUND, "not_found"),
            DuplicateTenant(_) | DuplicateDevice(..) => (StatusCode::CONFLICT, "duplicate"),
            Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
            _ => (StatusCode::BAD_REQUEST, "invalid"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<MlError> for ApiError {
    fn from(e: MlError) -> Self {
        let (status, code) = match &e {
            MlError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            MlError::DuplicateModel(_) => (StatusCode::CONFLICT, "duplicate"),
            MlError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
            _ => (StatusCode::BAD_REQUEST, "invalid"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<BridgeError> for ApiError {
    fn from(e: BridgeError) -> Self {
        let (status, code) = match &e {
            BridgeError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            BridgeError::Duplicate(_) => (StatusCode::CONFLICT, "duplicate"),
            BridgeError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
            _ => (StatusCode::BAD_REQUEST, "invalid"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<ConnectionError> for ApiError {
    fn from(e: ConnectionError) -> Self {
        let (status, code) = match &e {
            ConnectionError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ConnectionError::Duplicate(_) => (StatusCode::CONFLICT, "duplicate"),
            ConnectionError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
            ConnectionError::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<TsError> for ApiError {
    fn from(e: TsError) -> Self {
        match &e {
            TsError::InvalidQuery(_) => ApiError::bad_request(e.to_string()),
            TsError::Unavailable(_) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", e.to_string()),
        }
    }
}

impl From<BusError> for ApiError {
    fn from(e: BusError) -> Self {
        match &e {
            BusError::InvalidName(_) => ApiError::bad_request(e.to_string()),
            BusError::Unavailable(_) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", e.to_string()),
        }
    }
}

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        match e {
            PlatformError::UnknownService(s) => ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown service `{s}`")),
            PlatformError::Bus(e) => e.into(),
            PlatformError::Registry(e) => e.into(),
            PlatformError::Gateway(e) => e.into(),
            PlatformError::Timeseries(e) => e.into(),
            PlatformError::Watchdog(e) => e.into(),
            PlatformError::Ml(e) => e.into(),
            PlatformError::Bridge(e) => e.into(),
            PlatformError::Connection(e) => e.into(),
        }
    }
}

fn thing_id(s: &str) -> ApiResult<ThingId> {
    Ok(parse_thing_id(s)?)
}

fn body<T: for<'de> Deserialize<'de>>(bytes: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("request body: {e}")))
}

// ---------------------------------------------------------------------------
// Router

pub fn router(platform: Arc<Platform>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/metrics", get(metrics))
        .route("/api/services", get(services))
        .route("/api/services/{service}/kill", post(kill_service))
        .route("/api/services/{service}/restart", post(restart_service))
        .route("/api/policies", get(list_policies).post(create_policy))
        .route("/api/policies/{id}", get(get_policy).put(put_policy).delete(delete_policy))
        .route("/api/things", get(list_things).post(create_thing))
        .route("/api/things/{id}", get(get_thing).patch(modify_thing).delete(delete_thing))
        .route("/api/things/{id}/children", get(children))
        .route("/api/things/{id}/parents", get(parents))
        .route("/api/things/{id}/children/{child}", put(link).delete(unlink))
        .route("/api/types", get(list_things).post(create_thing))
        .route("/api/types/{id}", get(get_thing).patch(modify_thing).delete(delete_thing))
        .route("/api/types/{id}/children", get(children))
        .route("/api/types/{id}/parents", get(parents))
        .route("/api/types/{id}/children/{child}", put(link).delete(unlink))
        .route("/api/types/{id}/instantiate", post(instantiate))
        .route("/api/tenants", get(list_tenants).post(create_tenant))
        .route("/api/tenants/{tenant}", get(get_tenant).delete(delete_tenant))
        .route("/api/tenants/{tenant}/mapper", put(set_mapper))
        .route("/api/tenants/{tenant}/devices", get(list_devices).post(add_device))
        .route("/api/tenants/{tenant}/devices/{device}", axum::routing::delete(remove_device))
        .route("/ingest/{tenant}/{device}", post(ingest))
        .route("/api/bus/topics", get(bus_topics))
        .route("/api/bus/queues", get(bus_queues))
        .route("/api/bus/records", get(bus_records))
        .route("/api/ts", get(ts_query))
        .route("/api/ts/series", get(ts_series))
        .route("/api/watchdog/tenants", get(wd_list).post(wd_create))
        .route("/api/watchdog/tenants/{tenant}", get(wd_get).delete(wd_delete))
        .route("/api/watchdog/tenants/{tenant}/activate", post(wd_activate))
        .route("/api/watchdog/tenants/{tenant}/deactivate", post(wd_deactivate))
        .route("/api/watchdog/tenants/{tenant}/devices", get(wd_devices).post(wd_add_device))
        .route("/api/watchdog/tenants/{tenant}/devices/{device}", get(wd_device).delete(wd_remove_device))
        .route("/api/watchdog/tenants/{tenant}/devices/{device}/activate", post(wd_activate_device))
        .route("/api/watchdog/tenants/{tenant}/devices/{device}/deactivate", post(wd_deactivate_device))
        .route("/api/ml/models", get(list_models).post(deploy_model))
        .route("/api/ml/models/{id}", get(get_model).delete(undeploy_model))
        .route("/api/bridges/forwarders", get(list_forwarders).post(create_forwarder))
        .route("/api/bridges/forwarders/{tenant}", get(get_forwarder).put(put_forwarder).delete(delete_forwarder))
        .route("/api/bridges/forwarders/{tenant}/activate", post(activate_forwarder))
        .route("/api/bridges/forwarders/{tenant}/deactivate", post(deactivate_forwarder))
        .route("/api/bridges/routes", get(list_routes).post(create_route))
        .route("/api/bridges/routes/{id}", get(get_route).put(put_route).delete(delete_route))
        .route("/api/bridges/routes/{id}/activate", post(activate_route))
        .route("/api/bridges/routes/{id}/deactivate", post(deactivate_route))
        .route("/api/connections", get(list_connections).post(create_connection))
        .route("/api/connections/{tenant}", get(get_connection).delete(delete_connection))
        .route("/api/connections/{tenant}/activate", post(activate_connection))
        .route("/api/connections/{tenant}/deactivate", post(deactivate_connection))
        .fallback(no_route)
        .layer(axum::middleware::from_fn(read_whole_body))
        .with_state(platform)
}

/// Largest accepted request body.
pub const BODY_LIMIT: usize = 2 * 1024 * 1024;

/// Reads every request body before routing. A handler that ignores its body
/// would otherwise leave unread bytes and the connection would be dropped
/// instead of kept alive.
async fn read_whole_body(req: axum::extract::Request, next: axum::middleware::Next) -> Response {
    let (parts, body) = req.into_parts();
    match axum::body::to_bytes(body, BODY_LIMIT).await {
        Ok(bytes) => next.run(axum::extract::Request::from_parts(parts, axum::body::Body::from(bytes))).await,
        Err(e) => ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "body_too_large", e.to_string()).into_response(),
    }
}

async fn no_route() -> Response {
    let mut r = ApiError::new(StatusCode::NOT_FOUND, "no_route", "no such endpoint").into_response();
    r.headers_mut().insert(NO_ROUTE_HEADER, HeaderValue::from_static("1"));
    r
}

// ---------------------------------------------------------------------------
// Operations

async fn health(State(p): St) -> Response {
    let h = p.health();
    let ok = h.values().all(|v| *v);
    let status = if ok { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
    (status, Json(json!({ "status": if ok { "ok" } else { "degraded" }, "services": h }))).into_response()
}

async fn metrics(State(p): St) -> Response {
    ([(header::CONTENT_TYPE, "text/plain; version=0.0.4")], p.metrics.render()).into_response()
}

async fn services(State(p): St) -> Json<BTreeMap<&'static str, bool>> {
    Json(p.health())
}

async fn kill_service(State(p): St, Path(name): Path<String>) -> ApiResult<Json<Value>> {
    let s: Service = name.parse()?;
    p.kill(s);
    Ok(Json(json!({ "service": s.as_str(), "up": false })))
}

async fn restart_service(State(p): St, Path(name): Path<String>) -> ApiResult<Json<Value>> {
    let s: Service = name.parse()?;
    p.restart(s)?;
    Ok(Json(json!({ "service": s.as_str(), "up": true })))
}

// ---------------------------------------------------------------------------
// Policies

async fn list_policies(State(p): St) -> ApiResult<Json<Vec<Policy>>> {
    Ok(Json(p.registry.list_policies()?))
}

async fn create_policy(State(p): St, b: Bytes) -> ApiResult<(StatusCode, Json<Policy>)> {
    Ok((StatusCode::CREATED, Json(p.registry.create_policy(body(&b)?)?)))
}

/// An unknown policy named in the path is a missing resource.
fn policy_not_found(e: RegistryError) -> ApiError {
    match e {
        RegistryError::UnknownPolicy(id) => {
            ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown policy `{id}`"))
        }
        e => e.into(),
    }
}

async fn get_policy(State(p): St, Path(id): Path<String>) -> ApiResult<Json<Policy>> {
    Ok(Json(p.registry.get_policy(&id).map_err(policy_not_found)?))
}

async fn put_policy(State(p): St, Path(id): Path<String>, b: Bytes) -> ApiResult<Json<Policy>> {
    let mut pol: Policy = body(&b)?;
    pol.policy_id = id;
    Ok(Json(p.registry.put_policy(pol)?))
}

async fn delete_policy(State(p): St, Path(id): Path<String>) -> ApiResult<StatusCode> {
    p.registry.delete_policy(&id).map_err(policy_not_found)?;
    Ok(StatusCode::NO_CONTENT)
}

// ---------------------------------------------------------------------------
// Things and types

fn kind_of(path: &MatchedPath) -> Kind {
    if path.as_str().starts_with("/api/types") {
        Kind::Type
    } else {
        Kind::Twin
    }
}

/// 404 unless `id` exists with the kind the path addresses.
fn expect_kind(p: &Platform, id: &ThingId, kind: Kind) -> ApiResult<()> {
    if p.registry.kind(id)? != kind {
        let what = if kind == Kind::Type { "type" } else { "twin" };
        return Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("`{id}` is not a {what}")));
    }
    Ok(())
}

#[derive(Deserialize)]
struct ListParams {
    /// Only things without parents.
    #[serde(default)]
    roots: bool,
}

async fn list_things(State(p): St, mp: MatchedPath, Query(q): Query<ListParams>) -> ApiResult<Response> {
    let all = match kind_of(&mp) {
        Kind::Twin => p.registry.list_twins()?,
        Kind::Type => p.registry.list_types()?,
    };
    let out: Vec<_> = if q.roots {
        let mut keep = Vec::new();
        for r in all {
            if p.registry.list_parents(&r.thing_id)?.is_empty() {
                keep.push(r);
            }
        }
        keep
    } else {
        all
    };
    Ok(Json(out).into_response())
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct NewThing {
    thing_id: ThingId,
    policy_id: String,
    #[serde(default)]
    attributes: Map<String, Value>,
    #[serde(default)]
    features: BTreeMap<String, FeatureState>,
}

async fn create_thing(State(p): St, mp: MatchedPath, b: Bytes) -> ApiResult<Response> {
    let t: NewThing = body(&b)?;
    let r = p.registry.create(kind_of(&mp), t.thing_id, &t.policy_id, t.attributes, t.features)?;
    Ok((StatusCode::CREATED, Json(r)).into_response())
}

async fn get_thing(State(p): St, mp: MatchedPath, Path(id): Path<String>) -> ApiResult<Response> {
    let id = thing_id(&id)?;
    expect_kind(&p, &id, kind_of(&mp))?;
    Ok(Json(p.registry.get(&id)?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Modify {
    path: String,
    #[serde(default)]
    value: Value,
}

async fn modify_thing(
    State(p): St,
    mp: MatchedPath,
    Path(id): Path<String>,
    headers: HeaderMap,
    b: Bytes,
) -> ApiResult<Response> {
    let id = thing_id(&id)?;
    expect_kind(&p, &id, kind_of(&mp))?;
    let m: Modify = body(&b)?;
    let subject = headers.get(SUBJECT_HEADER).and_then(|v| v.to_str().ok()).unwrap_or(DEFAULT_SUBJECT);
    let env = Envelope::modify(&id, &m.path, m.value);
    Ok(Json(p.registry.update(&id, &env, subject)?).into_response())
}

#[derive(Deserialize)]
struct DeleteParams {
    #[serde(default)]
    mode: Option<String>,
}

async fn delete_thing(
    State(p): St,
    mp: MatchedPath,
    Path(id): Path<String>,
    Query(q): Query<DeleteParams>,
) -> ApiResult<Response> {
    let id = thing_id(&id)?;
    expect_kind(&p, &id, kind_of(&mp))?;
    let mode = match q.mode.as_deref() {
        None | Some("orphan") => DeleteMode::Orphan,
        Some("cascade") => DeleteMode::Cascade,
        Some(other) => return Err(ApiError::bad_request(format!("unknown delete mode `{other}`"))),
    };
    let removed = p.registry.delete(&id, mode)?;
    Ok(Json(json!({ "deleted": removed })).into_response())
}

async fn children(State(p): St, mp: MatchedPath, Path(id): Path<String>) -> ApiResult<Response> {
    let id = thing_id(&id)?;
    expect_kind(&p, &id, kind_of(&mp))?;
    Ok(match kind_of(&mp) {
        Kind::Twin => Json(json!(p.registry.list_children(&id)?)).into_response(),
        Kind::Type => Json(json!(p.registry.children_with_multiplicity(&id)?)).into_response(),
    })
}

async fn parents(State(p): St, mp: MatchedPath, Path(id): Path<String>) -> ApiResult<Response> {
    let id = thing_id(&id)?;
    expect_kind(&p, &id, kind_of(&mp))?;
    Ok(Json(p.registry.list_parents(&id)?).into_response())
}

async fn link(State(p): St, mp: MatchedPath, Path((id, child)): Path<(String, String)>) -> ApiResult<Response> {
    let (id, child) = (thing_id(&id)?, thing_id(&child)?);
    expect_kind(&p, &id, kind_of(&mp))?;
    p.registry.link(&id, &child)?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn unlink(State(p): St, mp: MatchedPath, Path((id, child)): Path<(String, String)>) -> ApiResult<Response> {
    let (id, child) = (thing_id(&id)?, thing_id(&child)?);
    expect_kind(&p, &id, kind_of(&mp))?;
    p.registry.unlink(&id, &child)?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct Instantiate {
    thing_id: ThingId,
    policy_id: String,
}

async fn instantiate(State(p): St, Path(id): Path<String>, b: Bytes) -> ApiResult<Response> {
    let id = thing_id(&id)?;
    let req: Instantiate = body(&b)?;
    let created = p.registry.instantiate(&id, &req.thing_id, &req.policy_id)?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

// ---------------------------------------------------------------------------
// Gateway

async fn list_tenants(State(p): St) -> ApiResult<Json<Vec<Tenant>>> {
    Ok(Json(p.gateway.list_tenants()?))
}

async fn create_tenant(State(p): St, b: Bytes) -> ApiResult<(StatusCode, Json<Tenant>)> {
    Ok((StatusCode::CREATED, Json(p.gateway.create_tenant(body(&b)?)?)))
}

async fn get_tenant(State(p): St, Path(t): Path<String>) -> ApiResult<Json<Tenant>> {
    Ok(Json(p.gateway.get_tenant(&t)?))
}

async fn delete_tenant(State(p): St, Path(t): Path<String>) -> ApiResult<StatusCode> {
    p.gateway.delete_tenant(&t)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn set_mapper(State(p): St, Path(t): Path<String>, b: Bytes) -> ApiResult<Json<Tenant>> {
    let m: PayloadMapper = body(&b)?;
    Ok(Json(p.gateway.set_mapper(&t, m)?))
}

async fn list_devices(State(p): St, Path(t): Path<String>) -> ApiResult<Response> {
    Ok(Json(p.gateway.list_devices(&t)?).into_response())
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct NewDevice {
    device_id: String,
    username: String,
    password: String,
}

async fn add_device(State(p): St, Path(t): Path<String>, b: Bytes) -> ApiResult<Response> {
    let d: NewDevice = body(&b)?;
    let creds = Credentials { username: d.username, password: d.password };
    Ok((StatusCode::CREATED, Json(p.gateway.register_device(&t, &d.device_id, &creds)?)).into_response())
}

async fn remove_device(State(p): St, Path((t, d)): Path<(String, String)>) -> ApiResult<StatusCode> {
    p.gateway.delete_device(&t, &d)?;
    Ok(StatusCode::NO_CONTENT)
}

fn basic_auth(headers: &HeaderMap) -> Option<Credentials> {
    let v = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let encoded = v.strip_prefix("Basic ")?;
    let decoded = base64::engine::general_purpose::STANDARD.decode(encoded.trim()).ok()?;
    let text = String::from_utf8(decoded).ok()?;
    let (username, password) = text.split_once(':')?;
    Some(Credentials { username: username.to_string(), password: password.to_string() })
}

async fn ingest(
    State(p): St,
    Path((tenant, device)): Path<(String, String)>,
    headers: HeaderMap,
    b: Bytes,
) -> ApiResult<Response> {
    let Some(creds) = basic_auth(&headers) else {
        let mut r = ApiError::new(StatusCode::UNAUTHORIZED, "auth_required", "basic credentials required").into_response();
        r.headers_mut().insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Basic realm=\"twinforge\""));
        return Ok(r);
    };
    let offset = p.gateway.ingest(&tenant, &device, &creds, &b)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "ok": true, "offset": offset }))).into_response())
}

// ---------------------------------------------------------------------------
// Bus

async fn bus_topics(State(p): St) -> ApiResult<Response> {
    Ok(Json(p.bus.list_topics()?).into_response())
}

async fn bus_queues(State(p): St) -> ApiResult<Response> {
    Ok(Json(p.bus.list_queues()?).into_response())
}

#[derive(Deserialize)]
struct RecordParams {
    topic: String,
    #[serde(default)]
    offset: u64,
    #[serde(default = "default_limit")]
    limit: u64,
}

fn default_limit() -> u64 {
    100
}

#[derive(Serialize)]
struct RecordView {
    offset: u64,
    timestamp: Timestamp,
    headers: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    json: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    base64: Option<String>,
}

async fn bus_records(State(p): St, Query(q): Query<RecordParams>) -> ApiResult<Response> {
    if q.topic.is_empty() {
        return Err(ApiError::bad_request("topic is required"));
    }
    // reading would create the topic
    if !p.bus.list_topics()?.iter().any(|t| t.name == q.topic) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no topic `{}`", q.topic)));
    }
    let end = p.bus.end_offset(&q.topic)?;
    let mut out = Vec::new();
    let stop = end.min(q.offset.saturating_add(q.limit.min(1000)));
    for off in q.offset..stop {
        if let Some(r) = p.bus.read(&q.topic, off)? {
            let json = serde_json::from_slice::<Value>(&r.payload).ok();
            let base64 = json.is_none().then(|| base64::engine::general_purpose::STANDARD.encode(&r.payload));
            out.push(RecordView { offset: r.offset, timestamp: r.timestamp, headers: r.headers, json, base64 });
        }
    }
    Ok(Json(json!({ "topic": q.topic, "endOffset": end, "records": out })).into_response())
}

// ---------------------------------------------------------------------------
// Time series

#[derive(Deserialize)]
struct TsParams {
    thing: Option<String>,
    feature: Option<String>,
    property: Option<String>,
    from: Option<String>,
    to: Option<String>,
    originator: Option<String>,
    format: Option<String>,
}

fn time_param(v: &Option<String>) -> ApiResult<Option<Timestamp>> {
    v.as_deref().filter(|s| !s.is_empty()).map(Timestamp::parse).transpose().map_err(ApiError::from)
}

async fn ts_query(State(p): St, Query(q): Query<TsParams>) -> ApiResult<Response> {
    let query = timeseries::Query {
        thing: q.thing.as_deref().filter(|s| !s.is_empty()).map(thing_id).transpose()?,
        feature: q.feature.filter(|s| !s.is_empty()),
        property: q.property.filter(|s| !s.is_empty()),
        from: time_param(&q.from)?,
        to: time_param(&q.to)?,
        originator: q.originator.filter(|s| !s.is_empty()),
    };
    let points = p.ts.query(&query)?;
    Ok(match q.format.as_deref().unwrap_or("json") {
        "json" => Json(points).into_response(),
        "jsonl" => ([(header::CONTENT_TYPE, "application/x-ndjson")], timeseries::to_jsonl(&points)).into_response(),
        "csv" => ([(header::CONTENT_TYPE, "text/csv")], timeseries::to_csv(&points)).into_response(),
        other => return Err(ApiError::bad_request(format!("unknown format `{other}`"))),
    })
}

async fn ts_series(State(p): St) -> ApiResult<Response> {
    Ok(Json(p.ts.series()?).into_response())
}

// ---------------------------------------------------------------------------
// Watchdog

async fn wd_list(State(p): St) -> Json<Vec<WatchdogTenantConfig>> {
    Json(p.watchdog.list_tenants())
}

async fn wd_create(State(p): St, b: Bytes) -> ApiResult<Response> {
    Ok((StatusCode::CREATED, Json(p.watchdog.create_tenant(body(&b)?)?)).into_response())
}

async fn wd_get(State(p): St, Path(t): Path<String>) -> ApiResult<Json<WatchdogTenantConfig>> {
    Ok(Json(p.watchdog.get_tenant(&t)?))
}

async fn wd_delete(State(p): St, Path(t): Path<String>) -> ApiResult<StatusCode> {
    p.watchdog.delete_tenant(&t)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn wd_activate(State(p): St, Path(t): Path<String>) -> ApiResult<Json<WatchdogTenantConfig>> {
    Ok(Json(p.watchdog.set_tenant_active(&t, true)?))
}

async fn wd_deactivate(State(p): St, Path(t): Path<String>) -> ApiResult<Json<WatchdogTenantConfig>> {
    Ok(Json(p.watchdog.set_tenant_active(&t, false)?))
}

async fn wd_devices(State(p): St, Path(t): Path<String>) -> ApiResult<Json<Vec<WatchdogDeviceConfig>>> {
    Ok(Json(p.watchdog.list_devices(&t)?))
}

async fn wd_add_device(State(p): St, Path(t): Path<String>, b: Bytes) -> ApiResult<Response> {
    Ok((StatusCode::CREATED, Json(p.watchdog.add_device(&t, body(&b)?)?)).into_response())
}

async fn wd_device(State(p): St, Path((t, d)): Path<(String, String)>) -> ApiResult<Json<WatchdogDeviceConfig>> {
    Ok(Json(p.watchdog.get_device(&t, &d)?))
}

async fn wd_remove_device(State(p): St, Path((t, d)): Path<(String, String)>) -> ApiResult<StatusCode> {
    p.watchdog.delete_device(&t, &d)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn wd_activate_device(State(p): St, Path((t, d)): Path<(String, String)>) -> ApiResult<Json<WatchdogDeviceConfig>> {
    Ok(Json(p.watchdog.set_device_active(&t, &d, true)?))
}

async fn wd_deactivate_device(
    State(p): St,
    Path((t, d)): Path<(String, String)>,
) -> ApiResult<Json<WatchdogDeviceConfig>> {
    Ok(Json(p.watchdog.set_device_active(&t, &d, false)?))
}

// ---------------------------------------------------------------------------
// ML runtime

async fn list_models(State(p): St) -> Json<Vec<ModelDeployment>> {
    Json(p.ml.list())
}

async fn deploy_model(State(p): St, b: Bytes) -> ApiResult<Response> {
    Ok((StatusCode::CREATED, Json(p.ml.deploy(body(&b)?)?)).into_response())
}

async fn get_model(State(p): St, Path(id): Path<String>) -> ApiResult<Json<ModelDeployment>> {
    Ok(Json(p.ml.get(&id)?))
}

async fn undeploy_model(State(p): St, Path(id): Path<String>) -> ApiResult<StatusCode> {
    p.ml.undeploy(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

// ---------------------------------------------------------------------------
// Bridges

async fn list_forwarders(State(p): St) -> Json<Vec<ForwarderConfig>> {
    Json(p.bridges.list_forwarders())
}

async fn create_forwarder(State(p): St, b: Bytes) -> ApiResult<Response> {
    Ok((StatusCode::CREATED, Json(p.bridges.create_forwarder(body(&b)?)?)).into_response())
}

async fn get_forwarder(State(p): St, Path(t): Path<String>) -> ApiResult<Json<ForwarderConfig>> {
    Ok(Json(p.bridges.get_forwarder(&t)?))
}

async fn put_forwarder(State(p): St, Path(t): Path<String>, b: Bytes) -> ApiResult<Json<ForwarderConfig>> {
    let mut f: ForwarderConfig = body(&b)?;
    f.tenant_id = t;
    Ok(Json(p.bridges.put_forwarder(f)?))
}

async fn delete_forwarder(State(p): St, Path(t): Path<String>) -> ApiResult<StatusCode> {
    p.bridges.delete_forwarder(&t)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn activate_forwarder(State(p): St, Path(t): Path<String>) -> ApiResult<Json<ForwarderConfig>> {
    Ok(Json(p.bridges.set_forwarder_active(&t, true)?))
}

async fn deactivate_forwarder(State(p): St, Path(t): Path<String>) -> ApiResult<Json<ForwarderConfig>> {
    Ok(Json(p.bridges.set_forwarder_active(&t, false)?))
}

async fn list_routes(State(p): St) -> Json<Vec<PredictionRoute>> {
    Json(p.bridges.list_routes())
}

async fn create_route(State(p): St, b: Bytes) -> ApiResult<Response> {
    Ok((StatusCode::CREATED, Json(p.bridges.create_route(body(&b)?)?)).into_response())
}

async fn get_route(State(p): St, Path(id): Path<String>) -> ApiResult<Json<PredictionRoute>> {
    Ok(Json(p.bridges.get_route(&id)?))
}

async fn put_route(State(p): St, Path(id): Path<String>, b: Bytes) -> ApiResult<Json<PredictionRoute>> {
    let mut r: PredictionRoute = body(&b)?;
    r.route_id = id;
    Ok(Json(p.bridges.put_route(r)?))
}

async fn delete_route(State(p): St, Path(id): Path<String>) -> ApiResult<StatusCode> {
    p.bridges.delete_route(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn activate_route(State(p): St, Path(id): Path<String>) -> ApiResult<Json<PredictionRoute>> {
    Ok(Json(p.bridges.set_route_active(&id, true)?))
}

async fn deactivate_route(State(p): St, Path(id): Path<String>) -> ApiResult<Json<PredictionRoute>> {
    Ok(Json(p.bridges.set_route_active(&id, false)?))
}

// ---------------------------------------------------------------------------
// Connections

async fn list_connections(State(p): St) -> Json<Vec<ConnectionConfig>> {
    Json(p.connections.list())
}

async fn create_connection(State(p): St, b: Bytes) -> ApiResult<Response> {
    Ok((StatusCode::CREATED, Json(p.connections.create(body(&b)?)?)).into_response())
}

async fn get_connection(State(p): St, Path(t): Path<String>) -> ApiResult<Json<ConnectionConfig>> {
    Ok(Json(p.connections.get(&t)?))
}

async fn delete_connection(State(p): St, Path(t): Path<String>) -> ApiResult<StatusCode> {
    p.connections.delete(&t)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn activate_connection(State(p): St, Path(t): Path<String>) -> ApiResult<Json<ConnectionConfig>> {
    Ok(Json(p.connections.set_active(&t, true)?))
}

async fn deactivate_connection(State(p): St, Path(t): Path<String>) -> ApiResult<Json<ConnectionConfig>> {
    Ok(Json(p.connections.set_active(&t, false)?))
}
