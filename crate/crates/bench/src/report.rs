//! Run report written by `twinforge bench ... --out report.json`.

use serde::{Deserialize, Serialize};

use crate::scenario::ScenarioConfig;
use crate::stats::{mean, percentile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Core,
    Ml,
    Faults,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
}

impl LatencyStats {
    pub fn of(samples: &[f64]) -> Self {
        LatencyStats {
            samples: samples.len(),
            mean_s: mean(samples),
            p50_s: percentile(samples, 0.5),
            p95_s: percentile(samples, 0.95),
        }
    }
}

/// Message accounting along one path. `lost = sent - stored` counted by
/// unique message key; every stored copy beyond the first is a duplicate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub sent: u64,
    pub stored: u64,
    pub lost: u64,
    pub duplicates: u64,
    /// Stored points whose key was never sent or whose value is wrong.
    pub unexpected: u64,
}

impl Accounting {
    pub fn add(&mut self, o: &Accounting) {
        self.sent += o.sent;
        self.stored += o.stored;
        self.lost += o.lost;
        self.duplicates += o.duplicates;
        self.unexpected += o.unexpected;
    }
}

/// One repetition of a scenario.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    /// Messages that needed more than one send attempt.
    pub retried: u64,
    /// Gateway path (points tagged with the gateway originator).
    pub core: Option<Accounting>,
    /// Model path (points tagged with the route originator).
    pub ml: Option<Accounting>,
    pub latency: LatencyStats,
    /// Mean over clients of messages / (last stored - first sent).
    pub throughput_msg_s: f64,
    /// All stored messages / (last stored - first sent).
    pub aggregate_throughput_msg_s: f64,
    /// Largest gap between consecutive store times in the fault window.
    pub max_store_gap_s: f64,
    /// Largest `|y - w x|` over model outputs.
    pub max_model_error: Option<f64>,
    #[serde(skip)]
    pub latencies_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub service: String,
    pub runs: usize,
    pub recovery_time_s: f64,
    pub recovery_time_max_s: f64,
    pub core: Accounting,
    pub ml: Accounting,
    pub per_run: Vec<RepetitionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub clients: usize,
    pub latency: LatencyStats,
    pub throughput_msg_s: f64,
    pub throughput_per_repetition: Vec<f64>,
    pub latency_per_repetition: Vec<f64>,
    pub lost: u64,
    pub duplicates: u64,
}

/// Shape checks over a client sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub spearman_clients_latency: f64,
    /// For each step, whether throughput stayed at or below the p95
    /// bootstrap bound of the previous client count.
    pub throughput_non_increasing: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: RunKind,
    pub scenario: ScenarioConfig,
    pub core: Accounting,
    pub ml: Accounting,
    pub latency: LatencyStats,
    pub throughput_msg_s: f64,
    pub aggregate_throughput_msg_s: f64,
    pub repetitions: Vec<RepetitionReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recovery: Vec<RecoveryReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trend: Option<Trend>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub latency_samples_s: Vec<f64>,
}

impl RunReport {
    /// Aggregates repetitions of one scenario.
    pub fn from_repetitions(kind: RunKind, scenario: ScenarioConfig, reps: Vec<RepetitionReport>) -> Self {
        let mut core = Accounting::default();
        let mut ml = Accounting::default();
        let mut samples = Vec::new();
        for r in &reps {
            if let Some(a) = &r.core {
                core.add(a);
            }
            if let Some(a) = &r.ml {
                ml.add(a);
            }
            samples.extend_from_slice(&r.latencies_s);
        }
        let th: Vec<f64> = reps.iter().map(|r| r.throughput_msg_s).collect();
        let agg: Vec<f64> = reps.iter().map(|r| r.aggregate_throughput_msg_s).collect();
        RunReport {
            kind,
            scenario,
            core,
            ml,
            latency: LatencyStats::of(&samples),
            throughput_msg_s: mean(&th),
            aggregate_throughput_msg_s: mean(&agg),
            repetitions: reps,
            recovery: Vec::new(),
            sweep: Vec::new(),
            trend: None,
            latency_samples_s: samples,
        }
    }

    pub fn lost(&self) -> u64 {
        self.core.lost + self.ml.lost
    }

    pub fn duplicates(&self) -> u64 {
        self.core.duplicates + self.ml.duplicates
    }
}
