//! `twinforge serve`: platform, HTTP API, optional TCP ingest and generator.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use tokio::net::TcpListener;

use twinforge_core::gateway::TcpIngest;
use twinforge_core::platform::{Platform, PlatformOptions};
use twinforge_core::worker::Worker;

use crate::config::{Config, ConfigError};
use crate::{api, generator};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_DATA_DIR: &str = "./twinforge-data";

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("opening platform: {0}")]
    Platform(#[from] twinforge_core::platform::PlatformError),
    #[error("{what} {addr}: {source}")]
    Bind { what: &'static str, addr: String, source: std::io::Error },
    #[error("http server: {0}")]
    Http(std::io::Error),
}

/// A running platform with its listeners.
pub struct Running {
    pub platform: Arc<Platform>,
    pub http_addr: SocketAddr,
    pub tcp_addr: Option<SocketAddr>,
    listener: Option<TcpListener>,
    tcp: Option<TcpIngest>,
    generator: Option<Worker>,
}

/// Opens the data directory, applies `config` and binds the listeners.
/// `data_dir` and `listen` override the values in `config`.
pub async fn prepare(config: &Config, data_dir: Option<PathBuf>, listen: Option<String>) -> Result<Running, ServeError> {
    let dir = data_dir.or_else(|| config.data_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
    let opts = PlatformOptions { sync: config.sync, ..PlatformOptions::default() };
    let platform = Platform::open(&dir, opts)?;
    config.apply(&platform)?;
    platform.start();

    let addr = listen.or_else(|| config.listen.clone()).unwrap_or_else(|| DEFAULT_LISTEN.to_string());
    let listener =
        TcpListener::bind(&addr).await.map_err(|source| ServeError::Bind { what: "http listen", addr: addr.clone(), source })?;
    let http_addr = listener.local_addr().map_err(ServeError::Http)?;

    let tcp = match &config.tcp_listen {
        Some(a) => Some(
            TcpIngest::start(platform.gateway.clone(), a)
                .map_err(|source| ServeError::Bind { what: "tcp ingest", addr: a.clone(), source })?,
        ),
        None => None,
    };
    let tcp_addr = tcp.as_ref().map(TcpIngest::local_addr);
    let generator = config.generator.clone().map(|g| generator::start(g, platform.gateway.clone()));
    tracing::info!(data_dir = %dir.display(), http = %http_addr, tcp = ?tcp_addr, "twinforge ready");
    Ok(Running { platform, http_addr, tcp_addr, listener: Some(listener), tcp, generator })
}

impl Running {
    /// Serves HTTP until `shutdown` completes, then stops every service.
    pub async fn serve(mut self, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> Result<(), ServeError> {
        let listener = self.listener.take().expect("listener");
        let app = api::router(self.platform.clone());
        let res = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
        self.stop();
        res.map_err(ServeError::Http)
    }

    fn stop(&mut self) {
        self.generator.take();
        if let Some(mut t) = self.tcp.take() {
            t.stop();
        }
        self.platform.shutdown();
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        if self.listener.is_some() {
            self.stop();
        }
    }
}

/// Waits for ctrl-c or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    tracing::info!("shutting down");
}

/// A server on its own runtime thread, for tests and embedding.
pub struct Background {
    pub platform: Arc<Platform>,
    pub http_addr: SocketAddr,
    pub tcp_addr: Option<SocketAddr>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<Result<(), ServeError>>>,
}

impl Background {
    pub fn start(config: Config, data_dir: PathBuf) -> Result<Self, ServeError> {
        let (ready_tx, ready_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .map_err(ServeError::Http)?;
            rt.block_on(async move {
                let running = match prepare(&config, Some(data_dir), Some("127.0.0.1:0".into())).await {
                    Ok(r) => r,
                    Err(e) => {
                        let _ = ready_tx.send(Err(e));
                        return Ok(());
                    }
                };
                let _ = ready_tx.send(Ok((running.platform.clone(), running.http_addr, running.tcp_addr)));
                running
                    .serve(async {
                        let _ = stop_rx.await;
                    })
                    .await
            })
        });
        match ready_rx.recv().expect("server thread") {
            Ok((platform, http_addr, tcp_addr)) => {
                Ok(Background { platform, http_addr, tcp_addr, stop: Some(stop_tx), thread: Some(thread) })
            }
            Err(e) => {
                let _ = thread.join();
                Err(e)
            }
        }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    pub fn stop(mut self) -> Result<(), ServeError> {
        self.halt()
    }

    fn halt(&mut self) -> Result<(), ServeError> {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().expect("server thread"),
            None => Ok(()),
        }
    }
}

impl Drop for Background {
    fn drop(&mut self) {
        let _ = self.halt();
    }
}
