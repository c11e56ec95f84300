//! Bundled example configurations.
//!
//! `petrochemical`: a lubricant dewaxing unit with 26 sensor twins under one
//! unit twin, synthetic telemetry for every sensor, and a linear freezing
//! point model fed by the filter outlet temperature.

use serde_json::{json, Value};

/// Sensor tag, description, units, typical value, wave amplitude.
const SENSORS: [(&str, &str, &str, f64, f64); 26] = [
    ("LSRC3002.PF", "Unit load", "m3/d", 480.0, 25.0),
    ("FI3001.PV", "Feed flow", "m3/h", 20.0, 1.5),
    ("FI3003.PV", "Solvent flow", "m3/h", 62.0, 3.0),
    ("FI3010.PV", "Wash solvent flow", "m3/h", 14.0, 1.0),
    ("FI3021.PV", "Filtrate flow", "m3/h", 70.0, 3.5),
    ("FI3030.PV", "Wax flow", "m3/h", 4.2, 0.4),
    ("TI3001.PV", "Feed temperature", "degC", 65.0, 2.0),
    ("TI3004.PV", "Chiller inlet temperature", "degC", 35.0, 1.5),
    ("TI3005.PV", "Filter outlet temperature", "degC", -18.0, 1.2),
    ("TI3006.PV", "Chiller outlet temperature", "degC", -22.0, 1.0),
    ("TI3012.PV", "Wash solvent temperature", "degC", -24.0, 0.8),
    ("TI3020.PV", "Filtrate temperature", "degC", -20.0, 1.0),
    ("TI3040.PV", "Solvent recovery temperature", "degC", 180.0, 4.0),
    ("PI3002.PV", "Filter A pressure", "bar", 0.45, 0.05),
    ("PI3003.PV", "Filter B pressure", "bar", 0.47, 0.05),
    ("PI3008.PV", "Filter vacuum", "bar", -0.6, 0.04),
    ("PI3015.PV", "Inert gas pressure", "bar", 0.12, 0.01),
    ("PDI3002.PV", "Filter A differential pressure", "bar", 0.3, 0.06),
    ("PDI3003.PV", "Filter B differential pressure", "bar", 0.32, 0.06),
    ("LI3001.PV", "Feed drum level", "%", 55.0, 6.0),
    ("LI3020.PV", "Filtrate drum level", "%", 48.0, 5.0),
    ("SI3002.PV", "Filter A drum speed", "rpm", 0.35, 0.02),
    ("SI3003.PV", "Filter B drum speed", "rpm", 0.36, 0.02),
    ("AI3001.PV", "Feed viscosity", "cSt", 11.5, 0.3),
    ("AI3002.PV", "Solvent to oil ratio", "v/v", 3.1, 0.1),
    ("AI3020.PV", "Filtrate oil content", "%wt", 24.0, 1.0),
];

const NS: &str = "cepsa";
const TENANT: &str = "cepsa";
const UNIT: &str = "LSRC3000.UNIT";
const MODEL_INPUT: &str = "ml/freezing-point/in";
const MODEL_OUTPUT: &str = "ml/freezing-point/out";
/// Sensor the freezing point model reads.
pub const MODEL_SENSOR: &str = "TI3005.PV";

fn sensor_type(tag: &str) -> &'static str {
    match tag.split(|c: char| c.is_ascii_digit()).next().unwrap_or("") {
        "FI" => "flow_sensor",
        "TI" => "temperature_sensor",
        "PI" | "PDI" => "pressure_sensor",
        "LI" => "level_sensor",
        "SI" => "speed_sensor",
        "AI" => "analyzer",
        _ => "unit_meter",
    }
}

fn measured() -> Value {
    json!({ "last_measured": { "properties": { "value": null, "time": null } } })
}

fn username(tag: &str) -> String {
    tag.to_ascii_lowercase().replace('.', "-")
}

const PASSWORD: &str = "${CEPSA_DEVICE_PASSWORD:-cepsa-demo}";

/// The petrochemical example as config text, with environment placeholders.
pub fn petrochemical() -> Value {
    let id = |name: &str| format!("{NS}:{name}");
    let policy = id("basic_policy");

    let mut type_names: Vec<&str> = SENSORS.iter().map(|s| sensor_type(s.0)).collect();
    type_names.sort_unstable();
    type_names.dedup();
    let mut types: Vec<Value> = type_names
        .iter()
        .map(|t| {
            json!({
                "thingId": id(t),
                "policyId": policy,
                "attributes": { "name": t, "description": "", "units": "" },
                "features": measured(),
            })
        })
        .collect();
    types.push(json!({
        "thingId": id("dewaxing_unit"),
        "policyId": policy,
        "attributes": { "name": "dewaxing_unit", "description": "Lubricant dewaxing unit" },
        "features": { "freezing_point": { "properties": { "value": null, "time": null } } },
    }));

    let mut twins = vec![json!({
        "thingId": id(UNIT),
        "policyId": policy,
        "attributes": {
            "name": UNIT,
            "description": "Lubricant dewaxing unit, San Roque",
            "units": "degC",
        },
        "features": { "freezing_point": { "properties": { "value": null, "time": null } } },
    })];
    twins.extend(SENSORS.iter().map(|(tag, description, units, ..)| {
        json!({
            "thingId": id(tag),
            "policyId": policy,
            "attributes": { "name": tag, "description": description, "units": units },
            "features": measured(),
        })
    }));
    let links: Vec<Value> = SENSORS.iter().map(|s| json!({ "parent": id(UNIT), "child": id(s.0) })).collect();

    let devices: Vec<Value> = SENSORS
        .iter()
        .map(|s| json!({ "deviceId": id(s.0), "username": username(s.0), "password": PASSWORD }))
        .collect();
    let signals: Vec<Value> = SENSORS
        .iter()
        .map(|(tag, _, _, mean, amplitude)| {
            json!({
                "device": id(tag),
                "username": username(tag),
                "password": PASSWORD,
                "mean": mean,
                "amplitude": amplitude,
                "wave_s": 900.0,
                "noise": amplitude / 10.0,
            })
        })
        .collect();

    let model_inputs = json!([
        { "format": "float64", "name": "$hour" },
        { "format": "float64", "name": "last_measured" },
    ]);

    json!({
        "data_dir": "${TWINFORGE_DATA_DIR:-./twinforge-data}",
        "listen": "${TWINFORGE_LISTEN:-127.0.0.1:8080}",
        "policies": [{
            "policyId": policy,
            "entries": {
                "admin": { "read": true, "write": true },
                "gateway": { "read": true, "write": true },
                "ml-bridge": { "read": true, "write": true },
                "console": { "read": true, "write": false },
            },
        }],
        "types": types,
        "twins": twins,
        "links": links,
        "tenants": [{
            "tenantId": TENANT,
            "mapper": { "rules": [
                { "source": "/value", "target": "/features/last_measured/properties/value" },
                { "source": "/time", "target": "/features/last_measured/properties/time" },
            ]},
            "devices": devices,
        }],
        "connections": [{ "tenant_id": TENANT }],
        "models": [{
            "model_id": "freezing-point",
            "input_topic": MODEL_INPUT,
            "output_topic": MODEL_OUTPUT,
            "input_schema": ["float64", "float64"],
            "function": { "kind": "linear", "weights": [0.0, 0.85], "bias": -6.5 },
        }],
        "forwarders": [{
            "tenant_id": TENANT,
            "devices": [{
                "device_id": id(MODEL_SENSOR),
                "ml_input_topic": MODEL_INPUT,
                "required_values": model_inputs.clone(),
            }],
        }],
        "watchdog": [{
            "tenant_id": TENANT,
            "devices": [{
                "device_id": id(MODEL_SENSOR),
                "ml_input_topic": MODEL_INPUT,
                "required_values": [
                    { "format": "float64", "name": "$hour" },
                    { "format": "float64", "name": "last_measured", "last_value": -18.0 },
                ],
            }],
        }],
        "routes": [{
            "route_id": "freezing-point",
            "source_topic": MODEL_OUTPUT,
            "target_queue": "ml/freezing-point/commands",
            "ditto_message": {
                "topic": format!("{NS}/{UNIT}/things/twin/commands/modify"),
                "path": "/features/freezing_point/properties/value",
                "value": "{0}",
            },
            "mode": "update",
        }],
        "generator": {
            "tenant": TENANT,
            "period_s": 5.0,
            "seed": 7,
            "signals": signals,
        },
    })
}

/// Smallest useful config: one policy, one twin.
pub fn minimal() -> Value {
    json!({
        "policies": [{
            "policyId": "demo:policy",
            "entries": { "admin": { "read": true, "write": true }, "gateway": { "read": true, "write": true } },
        }],
        "twins": [{
            "thingId": "demo:sensor",
            "policyId": "demo:policy",
            "features": { "last_measured": { "properties": { "value": null, "time": null } } },
        }],
    })
}

pub const NAMES: [&str; 2] = ["petrochemical", "minimal"];

pub fn by_name(name: &str) -> Option<Value> {
    match name {
        "petrochemical" => Some(petrochemical()),
        "minimal" => Some(minimal()),
        _ => None,
    }
}

/// Pretty JSON with a trailing newline, as written to `configs/`.
pub fn render(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    s
}
