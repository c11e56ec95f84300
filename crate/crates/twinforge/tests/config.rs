use std::path::PathBuf;

use twinforge::config::{Config, ConfigError};
use twinforge::example;
use twinforge_core::platform::{Platform, PlatformOptions};

fn repo_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn bundled_config_files_match_the_generator() {
    for name in example::NAMES {
        let on_disk = std::fs::read_to_string(repo_file(&format!("configs/{name}.json"))).expect("config file");
        assert_eq!(on_disk, example::render(&example::by_name(name).unwrap()), "configs/{name}.json is stale");
    }
}

#[test]
fn petrochemical_example_provisions_27_twins_one_model_one_route() {
    let cfg = Config::load(&repo_file("configs/petrochemical.json")).expect("loads");
    let dir = tempfile::tempdir().unwrap();
    let p = Platform::open(dir.path(), PlatformOptions::default()).unwrap();
    cfg.apply(&p).expect("applies");
    // applying again changes nothing
    cfg.apply(&p).expect("re-applies");

    let twins = p.registry.list_twins().unwrap();
    assert_eq!(twins.len(), 27);
    assert_eq!(p.ml.list().len(), 1);
    assert_eq!(p.bridges.list_routes().len(), 1);
    let sensor = twins.iter().find(|t| t.thing_id.as_str() == "cepsa:LSRC3002.PF").expect("sensor twin");
    assert_eq!(sensor.policy_id, "cepsa:basic_policy");
    assert_eq!(sensor.attributes["description"], "Unit load");
    assert_eq!(sensor.attributes["units"], "m3/d");
    assert!(sensor.features.contains_key("last_measured"));
    let roots: Vec<_> = twins.iter().filter(|t| p.registry.list_parents(&t.thing_id).unwrap().is_empty()).collect();
    assert_eq!(roots.len(), 1);
    assert_eq!(p.registry.list_children(&roots[0].thing_id).unwrap().len(), 26);
    assert_eq!(p.gateway.list_devices("cepsa").unwrap().len(), 26);
    p.shutdown();
}

#[test]
fn environment_overrides_defaults_in_config() {
    let text = std::fs::read_to_string(repo_file("configs/petrochemical.json")).unwrap();
    let cfg = Config::parse_with(&text, |k| (k == "CEPSA_DEVICE_PASSWORD").then(|| "s3cret".to_string())).unwrap();
    assert_eq!(cfg.tenants[0].devices[0].password, "s3cret");
    assert_eq!(cfg.data_dir, Some(PathBuf::from("./twinforge-data")));
}

#[test]
fn invalid_config_reports_a_line() {
    let text = "{\n  \"policies\": [],\n  \"twins\": [\n    { \"thingId\": \"no-colon\", \"policyId\": \"p\" }\n  ]\n}\n";
    match Config::parse(text) {
        Err(ConfigError::At { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a located error, got {other:?}"),
    }
    match Config::parse("{\n  \"unknown_key\": 1\n}") {
        Err(ConfigError::At { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a located error, got {other:?}"),
    }
}
