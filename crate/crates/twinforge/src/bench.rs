//! `twinforge bench core|ml|faults`.

use std::path::Path;

use clap::ValueEnum;

use twinforge_bench::flows::{run_core_flow, run_fault_injection, run_ml_flow};
use twinforge_bench::harness::BenchError;
use twinforge_bench::report::RunReport;
use twinforge_bench::scenario::{ScenarioConfig, ScenarioError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchKind {
    Core,
    Ml,
    Faults,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

pub fn load_scenario(path: Option<&Path>) -> Result<ScenarioConfig, RunError> {
    match path {
        None => Ok(ScenarioConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| RunError::Io(p.display().to_string(), e))?;
            Ok(ScenarioConfig::from_json(&text)?)
        }
    }
}

pub fn run(kind: BenchKind, cfg: &ScenarioConfig) -> Result<RunReport, RunError> {
    Ok(match kind {
        BenchKind::Core => run_core_flow(cfg)?,
        BenchKind::Ml => run_ml_flow(cfg)?,
        BenchKind::Faults => run_fault_injection(cfg)?,
    })
}

/// One line per sweep point or fault target, for the terminal.
pub fn summary(r: &RunReport) -> String {
    let mut out = format!(
        "{:?}: mean latency {:.4} s, throughput {:.1} msg/s, lost {}, duplicates {}\n",
        r.kind,
        r.latency.mean_s,
        r.throughput_msg_s,
        r.lost(),
        r.duplicates()
    );
    for p in &r.sweep {
        out.push_str(&format!(
            "  clients {:>3}: latency {:.4} s, throughput {:.1} msg/s, lost {}\n",
            p.clients, p.latency.mean_s, p.throughput_msg_s, p.lost
        ));
    }
    if let Some(t) = &r.trend {
        out.push_str(&format!("  spearman(clients, latency) = {:.3}\n", t.spearman_clients_latency));
    }
    for rec in &r.recovery {
        out.push_str(&format!(
            "  {:<16} recovery {:.3} s (max {:.3} s), lost {}\n",
            rec.service,
            rec.recovery_time_s,
            rec.recovery_time_max_s,
            rec.core.lost + rec.ml.lost
        ));
    }
    out
}
