//! Core services of the twinforge digital-twin platform.

pub mod bus;
pub mod clock;
pub mod frame;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod registry;
pub mod codec;
pub mod gateway;
pub mod timeseries;
pub mod worker;
pub mod watchdog;
pub mod mlrt;
pub mod bridges;
pub mod connection;
pub mod platform;
