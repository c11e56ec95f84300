use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_twinforge");

struct Serve {
    child: Child,
    url: String,
    _dir: tempfile::TempDir,
}

impl Drop for Serve {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn serve(config: Option<&str>) -> Serve {
    let dir = tempfile::tempdir().unwrap();
    let addr = format!("127.0.0.1:{}", free_port());
    let mut cmd = Command::new(BIN);
    cmd.arg("serve").arg("--listen").arg(&addr).env("TWINFORGE_DATA_DIR", dir.path()).env("TWINFORGE_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    let child = cmd.stdout(Stdio::null()).stderr(Stdio::null()).spawn().expect("spawn serve");
    let s = Serve { child, url: format!("http://{addr}"), _dir: dir };
    let end = Instant::now() + Duration::from_secs(30);
    while ctl(&s, &["health"]).0 != Some(0) {
        assert!(Instant::now() < end, "server did not come up");
        std::thread::sleep(Duration::from_millis(100));
    }
    s
}

fn ctl(s: &Serve, args: &[&str]) -> (Option<i32>, String, String) {
    let out = Command::new(BIN).arg("ctl").arg("--server").arg(&s.url).args(args).output().expect("run ctl");
    (out.status.code(), String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn ctl_against_a_served_platform() {
    let s = serve(None);
    let (code, out, _) = ctl(&s, &["things", "list"]);
    assert_eq!(code, Some(0));
    assert_eq!(out.trim(), "[]");

    let policy = r#"{"policyId":"ns:p","entries":{"admin":{"read":true,"write":true}}}"#;
    assert_eq!(ctl(&s, &["policies", "create", "--data", policy]).0, Some(0));
    for id in ["ns:a", "ns:b", "ns:c"] {
        let body = format!(r#"{{"thingId":"{id}","policyId":"ns:p"}}"#);
        assert_eq!(ctl(&s, &["things", "create", "--data", &body]).0, Some(0));
    }
    assert_eq!(ctl(&s, &["things", "link", "ns:a", "ns:b"]).0, Some(0));
    assert_eq!(ctl(&s, &["things", "link", "ns:b", "ns:c"]).0, Some(0));
    let (code, _, err) = ctl(&s, &["things", "link", "ns:c", "ns:a"]);
    assert_eq!(code, Some(1));
    assert!(err.contains("409"), "{err}");

    let (code, out, _) = ctl(&s, &["things", "delete", "ns:a", "--mode", "cascade"]);
    assert_eq!(code, Some(0));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["deleted"].as_array().unwrap().len(), 3);
    assert_eq!(ctl(&s, &["things", "list"]).1.trim(), "[]");

    let (code, out, _) = ctl(&s, &["ts", "query"]);
    assert_eq!(code, Some(0));
    assert_eq!(out.trim(), "thing_id,feature,property,timestamp,value,originator");
    let (_, out, _) = ctl(&s, &["metrics"]);
    assert!(out.contains("twinforge_ingested_total 0"));
}

#[test]
fn serve_loads_minimal_config() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/minimal.json");
    let s = serve(Some(path));
    let (_, out, _) = ctl(&s, &["things", "get", "demo:sensor"]);
    assert!(out.contains("demo:sensor"), "{out}");
}

#[test]
fn serve_rejects_invalid_config_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"twins\": [\n    { \"thingId\": 5 }\n  ]\n}\n").unwrap();
    let out = Command::new(BIN)
        .args(["serve", "--listen", "127.0.0.1:0", "--config"])
        .arg(&path)
        .env("TWINFORGE_DATA_DIR", dir.path().join("data"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn example_command_prints_the_bundled_file() {
    let out = Command::new(BIN).args(["example", "petrochemical"]).output().unwrap();
    assert!(out.status.success());
    let on_disk = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/petrochemical.json")).unwrap();
    assert_eq!(out.stdout, on_disk);
}
