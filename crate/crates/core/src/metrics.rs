//! Process-wide operational counters with a plain text exposition.

use std::fmt::Write;
use std::sync::atomic::{AtomicU64, Ordering};

macro_rules! counters {
    ($($name:ident),* $(,)?) => {
        /// Monotonic counters shared by every service in the process.
        #[derive(Debug, Default)]
        pub struct Metrics {
            $(pub $name: AtomicU64,)*
        }

        impl Metrics {
            pub fn snapshot(&self) -> Vec<(&'static str, u64)> {
                vec![$((stringify!($name), self.$name.load(Ordering::Relaxed)),)*]
            }
        }
    };
}

counters!(
    ingested,
    auth_failed,
    stored,
    malformed_events,
    dispatched,
    watchdog_missing_values,
    forwarded,
    inferences,
    route_enqueued,
    route_applied,
    dead_lettered,
    recovery_events,
);

impl Metrics {
    pub fn inc(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self, name: &str) -> Option<u64> {
        self.snapshot().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }

    /// `twinforge_<name>_total <value>` per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, value) in self.snapshot() {
            let _ = writeln!(out, "# TYPE twinforge_{name}_total counter");
            let _ = writeln!(out, "twinforge_{name}_total {value}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_metrics_are_zero() {
        let m = Metrics::default();
        assert!(m.snapshot().iter().all(|(_, v)| *v == 0));
        assert!(m.render().contains("twinforge_ingested_total 0"));
    }

    #[test]
    fn counts() {
        let m = Metrics::default();
        for _ in 0..10 {
            Metrics::inc(&m.ingested);
        }
        assert_eq!(m.get("ingested"), Some(10));
        assert!(m.render().contains("twinforge_ingested_total 10"));
    }
}
