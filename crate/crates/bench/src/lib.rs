//! Scenario simulator and evaluation harness: simulated sensors and
//! concurrent clients driving an in-process platform, send-to-store latency
//! and throughput, and kill/restart fault injection with recovery-time and
//! loss accounting.

pub mod flows;
pub mod harness;
pub mod report;
pub mod scenario;
pub mod stats;

pub use flows::{all_service_faults, run_core_flow, run_fault_injection, run_ml_flow, trend};
pub use report::{RunKind, RunReport};
pub use scenario::{FaultSpec, Pipeline, ScenarioConfig};
