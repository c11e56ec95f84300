#![allow(dead_code)]

use serde_json::Value;
use tempfile::TempDir;

use twinforge::config::Config;
use twinforge::server::Background;

pub struct Server {
    pub bg: Background,
    pub agent: ureq::Agent,
    _dir: TempDir,
}

pub struct Resp {
    pub status: u16,
    pub text: String,
    pub no_route: bool,
}

impl Resp {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.text).unwrap_or_else(|e| panic!("not JSON ({e}): {}", self.text))
    }
}

impl Server {
    pub fn start(config: Config) -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let bg = Background::start(config, dir.path().to_path_buf()).expect("server starts");
        let agent = twinforge::ctl::agent();
        Server { bg, agent, _dir: dir }
    }

    pub fn empty() -> Self {
        Self::start(Config::default())
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.bg.url(), path)
    }

    pub fn call(&self, method: &str, path: &str, body: Option<&Value>, headers: &[(&str, &str)]) -> Resp {
        let url = self.url(path);
        let mut resp = match method {
            "GET" | "DELETE" => {
                let mut b = if method == "GET" { self.agent.get(&url) } else { self.agent.delete(&url) };
                for (k, v) in headers {
                    b = b.header(*k, *v);
                }
                b.call()
            }
            _ => {
                let mut b = match method {
                    "POST" => self.agent.post(&url),
                    "PUT" => self.agent.put(&url),
                    "PATCH" => self.agent.patch(&url),
                    m => panic!("method {m}"),
                };
                for (k, v) in headers {
                    b = b.header(*k, *v);
                }
                match body {
                    Some(v) => b.content_type("application/json").send(v.to_string().as_str()),
                    None => b.send_empty(),
                }
            }
        }
        .expect("http");
        let no_route = resp.headers().contains_key(twinforge::api::NO_ROUTE_HEADER);
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().expect("body");
        Resp { status, text, no_route }
    }

    pub fn get(&self, path: &str) -> Resp {
        self.call("GET", path, None, &[])
    }

    pub fn post(&self, path: &str, body: &Value) -> Resp {
        self.call("POST", path, Some(body), &[])
    }

    pub fn put(&self, path: &str, body: Option<&Value>) -> Resp {
        self.call("PUT", path, body, &[])
    }

    pub fn delete(&self, path: &str) -> Resp {
        self.call("DELETE", path, None, &[])
    }
}

/// Polls `f` until it returns `Some` or the deadline passes.
pub fn eventually<T>(secs: f64, mut f: impl FnMut() -> Option<T>) -> Option<T> {
    let end = std::time::Instant::now() + std::time::Duration::from_secs_f64(secs);
    loop {
        if let Some(v) = f() {
            return Some(v);
        }
        if std::time::Instant::now() > end {
            return None;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
}
