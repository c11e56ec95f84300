//! The benchmark runs: core flow, model flow and fault injection.

use twinforge_core::model::Timestamp;

use crate::harness::{drive, measure, wait_for_drain, BenchError, Path, Testbed};
use crate::report::{Accounting, LatencyStats, RecoveryReport, RepetitionReport, RunKind, RunReport, SweepPoint, Trend};
use crate::scenario::{FaultSpec, Pipeline, ScenarioConfig};
use crate::stats::{bootstrap_mean_upper, mean, spearman};
use twinforge_core::platform::Service;

fn repetition(cfg: &ScenarioConfig, path: Path) -> Result<RepetitionReport, BenchError> {
    let bed = Testbed::new(cfg)?;
    let start = Timestamp::now();
    let (samples, _) = drive(&bed, cfg, None);
    wait_for_drain(&bed, cfg, samples.len());
    Ok(measure(&bed, cfg, &samples, path, start))
}

fn run(kind: RunKind, cfg: &ScenarioConfig, path: Path) -> Result<RunReport, BenchError> {
    cfg.validate()?;
    if cfg.client_sweep.is_empty() {
        let reps = (0..cfg.repetitions).map(|_| repetition(cfg, path)).collect::<Result<Vec<_>, _>>()?;
        return Ok(RunReport::from_repetitions(kind, cfg.clone(), reps));
    }
    let mut all = Vec::new();
    let mut sweep = Vec::new();
    for &clients in &cfg.client_sweep {
        let point_cfg = cfg.with_clients(clients);
        let reps = (0..cfg.repetitions).map(|_| repetition(&point_cfg, path)).collect::<Result<Vec<_>, _>>()?;
        let samples: Vec<f64> = reps.iter().flat_map(|r| r.latencies_s.iter().copied()).collect();
        let th: Vec<f64> = reps.iter().map(|r| r.throughput_msg_s).collect();
        let (mut lost, mut duplicates) = (0, 0);
        for r in &reps {
            for a in r.core.iter().chain(r.ml.iter()) {
                lost += a.lost;
                duplicates += a.duplicates;
            }
        }
        sweep.push(SweepPoint {
            clients,
            latency: LatencyStats::of(&samples),
            throughput_msg_s: mean(&th),
            latency_per_repetition: reps.iter().map(|r| r.latency.mean_s).collect(),
            throughput_per_repetition: th,
            lost,
            duplicates,
        });
        all.extend(reps);
    }
    let mut report = RunReport::from_repetitions(kind, cfg.clone(), all);
    report.trend = Some(trend(&sweep));
    report.sweep = sweep;
    Ok(report)
}

/// Rank correlation of client count against mean latency, and whether each
/// step's mean throughput stays within the p95 bootstrap bound of the
/// previous step.
pub fn trend(sweep: &[SweepPoint]) -> Trend {
    let clients: Vec<f64> = sweep.iter().map(|p| p.clients as f64).collect();
    let latency: Vec<f64> = sweep.iter().map(|p| p.latency.mean_s).collect();
    let throughput_non_increasing = sweep
        .windows(2)
        .enumerate()
        .map(|(i, w)| w[1].throughput_msg_s <= bootstrap_mean_upper(&w[0].throughput_per_repetition, 0.95, 2000, i as u64))
        .collect();
    Trend { spearman_clients_latency: spearman(&clients, &latency), throughput_non_increasing }
}

/// gateway -> registry -> bus -> timeseries, timed from send to store.
pub fn run_core_flow(cfg: &ScenarioConfig) -> Result<RunReport, BenchError> {
    let cfg = ScenarioConfig { pipeline: Pipeline::Core, ..cfg.clone() };
    run(RunKind::Core, &cfg, Path::Core)
}

/// gateway -> forwarder -> model -> route -> registry -> timeseries with a
/// known linear model, correlating outputs to inputs by message time.
pub fn run_ml_flow(cfg: &ScenarioConfig) -> Result<RunReport, BenchError> {
    let cfg = ScenarioConfig { pipeline: Pipeline::Ml, ..cfg.clone() };
    run(RunKind::Ml, &cfg, Path::Ml)
}

fn fault_run(cfg: &ScenarioConfig, fault: &FaultSpec) -> Result<RepetitionReport, BenchError> {
    let bed = Testbed::new(cfg)?;
    let start = Timestamp::now();
    let (samples, window) = drive(&bed, cfg, Some(fault));
    wait_for_drain(&bed, cfg, samples.len());
    let path = if fault.target == Some(Service::RouteConsumer) { Path::Ml } else { Path::Core };
    let lead = (2.0 * cfg.period_s * 1e9) as i64;
    let from = window.map(|w| Timestamp(w.killed_at.0 - lead)).unwrap_or(start);
    Ok(measure(&bed, cfg, &samples, path, from))
}

/// Kills and restarts each target while a periodic sender runs through the
/// full pipeline. Targets run side by side on separate platforms; the runs
/// of one target are sequential.
pub fn run_fault_injection(cfg: &ScenarioConfig) -> Result<RunReport, BenchError> {
    cfg.validate()?;
    let cfg = ScenarioConfig { pipeline: Pipeline::Full, ..cfg.clone() };
    let faults = if cfg.faults.is_empty() { vec![FaultSpec::baseline()] } else { cfg.faults.clone() };
    let results: Vec<Result<RecoveryReport, BenchError>> = std::thread::scope(|s| {
        let handles: Vec<_> = faults
            .iter()
            .map(|f| {
                let cfg = &cfg;
                s.spawn(move || {
                    let runs = (0..cfg.repetitions).map(|_| fault_run(cfg, f)).collect::<Result<Vec<_>, _>>()?;
                    let gaps: Vec<f64> = runs.iter().map(|r| r.max_store_gap_s).collect();
                    let (mut core, mut ml) = (Accounting::default(), Accounting::default());
                    for r in &runs {
                        core.add(&r.core.unwrap_or_default());
                        ml.add(&r.ml.unwrap_or_default());
                    }
                    Ok(RecoveryReport {
                        service: f.label().to_string(),
                        runs: runs.len(),
                        recovery_time_s: mean(&gaps),
                        recovery_time_max_s: gaps.iter().copied().fold(0.0, f64::max),
                        core,
                        ml,
                        per_run: runs,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fault worker")).collect()
    });
    let recovery = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let reps: Vec<RepetitionReport> = recovery.iter().flat_map(|r| r.per_run.iter().cloned()).collect();
    let mut report = RunReport::from_repetitions(RunKind::Faults, cfg, reps);
    report.recovery = recovery;
    Ok(report)
}

/// Default fault plan: every killable service once per run.
pub fn all_service_faults(kill_at_s: f64, down_s: f64) -> Vec<FaultSpec> {
    Service::ALL
        .into_iter()
        .map(|t| FaultSpec { target: Some(t), kill_at_s, down_s })
        .collect()
}
