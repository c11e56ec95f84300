//! Background threads with cooperative stop.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Default)]
pub struct StopFlag(Arc<AtomicBool>);

impl StopFlag {
    pub fn new() -> Self {
        StopFlag::default()
    }

    pub fn is_set(&self) -> bool {
        self.0.load(Ordering::Relaxed)
    }

    pub fn set(&self) {
        self.0.store(true, Ordering::Relaxed);
    }

    /// Sleeps up to `d`, waking early on stop. Returns `true` if stopped.
    pub fn sleep(&self, d: Duration) -> bool {
        let end = Instant::now() + d;
        loop {
            if self.is_set() {
                return true;
            }
            let now = Instant::now();
            if now >= end {
                return false;
            }
            std::thread::sleep((end - now).min(Duration::from_millis(10)));
        }
    }
}

/// A named thread that runs until its [`StopFlag`] is set.
#[derive(Debug)]
pub struct Worker {
    name: String,
    stop: StopFlag,
    handle: Option<JoinHandle<()>>,
}

impl Worker {
    pub fn spawn(name: impl Into<String>, f: impl FnOnce(StopFlag) + Send + 'static) -> Self {
        let name = name.into();
        let stop = StopFlag::new();
        let flag = stop.clone();
        let handle = std::thread::Builder::new()
            .name(name.clone())
            .spawn(move || f(flag))
            .expect("spawn worker thread");
        Worker { name, stop, handle: Some(handle) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_running(&self) -> bool {
        self.handle.as_ref().is_some_and(|h| !h.is_finished())
    }

    /// Signals stop and waits for the thread to exit.
    pub fn stop(&mut self) {
        self.stop.set();
        if let Some(h) = self.handle.take() {
            if h.join().is_err() {
                tracing::error!(worker = %self.name, "worker panicked");
            }
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.stop();
    }
}
