//! Every HTTP endpoint with the `ctl` invocation that reaches it.
//!
//! In `ctl` templates, `{name}` stands for the path parameter of the same
//! name and `{body}` for a JSON document.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoint {
    pub method: &'static str,
    pub path: &'static str,
    pub ctl: &'static str,
}

const fn ep(method: &'static str, path: &'static str, ctl: &'static str) -> Endpoint {
    Endpoint { method, path, ctl }
}

pub const ENDPOINTS: &[Endpoint] = &[
    ep("GET", "/health", "health"),
    ep("GET", "/metrics", "metrics"),
    ep("GET", "/api/services", "services list"),
    ep("POST", "/api/services/{service}/kill", "services kill {service}"),
    ep("POST", "/api/services/{service}/restart", "services restart {service}"),
    // registry
    ep("GET", "/api/policies", "policies list"),
    ep("POST", "/api/policies", "policies create --data {body}"),
    ep("GET", "/api/policies/{id}", "policies get {id}"),
    ep("PUT", "/api/policies/{id}", "policies put {id} --data {body}"),
    ep("DELETE", "/api/policies/{id}", "policies delete {id}"),
    ep("GET", "/api/things", "things list"),
    ep("POST", "/api/things", "things create --data {body}"),
    ep("GET", "/api/things/{id}", "things get {id}"),
    ep("PATCH", "/api/things/{id}", "things modify {id} --path /attributes/note --value 1"),
    ep("DELETE", "/api/things/{id}", "things delete {id} --mode cascade"),
    ep("GET", "/api/things/{id}/children", "things children {id}"),
    ep("GET", "/api/things/{id}/parents", "things parents {id}"),
    ep("PUT", "/api/things/{id}/children/{child}", "things link {id} {child}"),
    ep("DELETE", "/api/things/{id}/children/{child}", "things unlink {id} {child}"),
    ep("GET", "/api/types", "types list"),
    ep("POST", "/api/types", "types create --data {body}"),
    ep("GET", "/api/types/{id}", "types get {id}"),
    ep("PATCH", "/api/types/{id}", "types modify {id} --path /attributes/note --value 1"),
    ep("DELETE", "/api/types/{id}", "types delete {id}"),
    ep("GET", "/api/types/{id}/children", "types children {id}"),
    ep("GET", "/api/types/{id}/parents", "types parents {id}"),
    ep("PUT", "/api/types/{id}/children/{child}", "types link {id} {child}"),
    ep("DELETE", "/api/types/{id}/children/{child}", "types unlink {id} {child}"),
    ep("POST", "/api/types/{id}/instantiate", "types instantiate {id} --thing-id ns:new --policy ns:policy"),
    // gateway
    ep("GET", "/api/tenants", "tenants list"),
    ep("POST", "/api/tenants", "tenants create --data {body}"),
    ep("GET", "/api/tenants/{tenant}", "tenants get {tenant}"),
    ep("DELETE", "/api/tenants/{tenant}", "tenants delete {tenant}"),
    ep("PUT", "/api/tenants/{tenant}/mapper", "tenants mapper {tenant} --data {body}"),
    ep("GET", "/api/tenants/{tenant}/devices", "tenants devices {tenant}"),
    ep("POST", "/api/tenants/{tenant}/devices", "tenants add-device {tenant} --device ns:dev --username u --password p"),
    ep("DELETE", "/api/tenants/{tenant}/devices/{device}", "tenants remove-device {tenant} {device}"),
    ep("POST", "/ingest/{tenant}/{device}", "ingest {tenant} {device} --username u --password p --data {body}"),
    // bus
    ep("GET", "/api/bus/topics", "bus topics"),
    ep("GET", "/api/bus/queues", "bus queues"),
    ep("GET", "/api/bus/records", "bus records --topic telemetry/t"),
    // time series
    ep("GET", "/api/ts", "ts query"),
    ep("GET", "/api/ts/series", "ts series"),
    // watchdog
    ep("GET", "/api/watchdog/tenants", "watchdog list"),
    ep("POST", "/api/watchdog/tenants", "watchdog create --data {body}"),
    ep("GET", "/api/watchdog/tenants/{tenant}", "watchdog get {tenant}"),
    ep("DELETE", "/api/watchdog/tenants/{tenant}", "watchdog delete {tenant}"),
    ep("POST", "/api/watchdog/tenants/{tenant}/activate", "watchdog activate {tenant}"),
    ep("POST", "/api/watchdog/tenants/{tenant}/deactivate", "watchdog deactivate {tenant}"),
    ep("GET", "/api/watchdog/tenants/{tenant}/devices", "watchdog devices {tenant}"),
    ep("POST", "/api/watchdog/tenants/{tenant}/devices", "watchdog add-device {tenant} --data {body}"),
    ep("GET", "/api/watchdog/tenants/{tenant}/devices/{device}", "watchdog device {tenant} {device}"),
    ep("DELETE", "/api/watchdog/tenants/{tenant}/devices/{device}", "watchdog remove-device {tenant} {device}"),
    ep("POST", "/api/watchdog/tenants/{tenant}/devices/{device}/activate", "watchdog activate-device {tenant} {device}"),
    ep(
        "POST",
        "/api/watchdog/tenants/{tenant}/devices/{device}/deactivate",
        "watchdog deactivate-device {tenant} {device}",
    ),
    // ml runtime
    ep("GET", "/api/ml/models", "models list"),
    ep("POST", "/api/ml/models", "models deploy --data {body}"),
    ep("GET", "/api/ml/models/{id}", "models get {id}"),
    ep("DELETE", "/api/ml/models/{id}", "models undeploy {id}"),
    // bridges
    ep("GET", "/api/bridges/forwarders", "forwarders list"),
    ep("POST", "/api/bridges/forwarders", "forwarders create --data {body}"),
    ep("GET", "/api/bridges/forwarders/{tenant}", "forwarders get {tenant}"),
    ep("PUT", "/api/bridges/forwarders/{tenant}", "forwarders put {tenant} --data {body}"),
    ep("DELETE", "/api/bridges/forwarders/{tenant}", "forwarders delete {tenant}"),
    ep("POST", "/api/bridges/forwarders/{tenant}/activate", "forwarders activate {tenant}"),
    ep("POST", "/api/bridges/forwarders/{tenant}/deactivate", "forwarders deactivate {tenant}"),
    ep("GET", "/api/bridges/routes", "routes list"),
    ep("POST", "/api/bridges/routes", "routes create --data {body}"),
    ep("GET", "/api/bridges/routes/{id}", "routes get {id}"),
    ep("PUT", "/api/bridges/routes/{id}", "routes put {id} --data {body}"),
    ep("DELETE", "/api/bridges/routes/{id}", "routes delete {id}"),
    ep("POST", "/api/bridges/routes/{id}/activate", "routes activate {id}"),
    ep("POST", "/api/bridges/routes/{id}/deactivate", "routes deactivate {id}"),
    // connections
    ep("GET", "/api/connections", "connections list"),
    ep("POST", "/api/connections", "connections create --data {body}"),
    ep("GET", "/api/connections/{tenant}", "connections get {tenant}"),
    ep("DELETE", "/api/connections/{tenant}", "connections delete {tenant}"),
    ep("POST", "/api/connections/{tenant}/activate", "connections activate {tenant}"),
    ep("POST", "/api/connections/{tenant}/deactivate", "connections deactivate {tenant}"),
];

/// Replaces `{name}` segments of `path` using `value`.
pub fn fill(path: &str, value: impl Fn(&str) -> String) -> String {
    path.split('/')
        .map(|seg| match seg.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
            Some(name) => value(name),
            None => seg.to_string(),
        })
        .collect::<Vec<_>>()
        .join("/")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn endpoints_are_unique() {
        let set: BTreeSet<(&str, &str)> = ENDPOINTS.iter().map(|e| (e.method, e.path)).collect();
        assert_eq!(set.len(), ENDPOINTS.len());
    }

    #[test]
    fn fill_substitutes_segments() {
        assert_eq!(fill("/api/things/{id}/children/{child}", |n| n.to_uppercase()), "/api/things/ID/children/CHILD");
    }
}
