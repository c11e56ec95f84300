//! The `twinforge` binary: server, operator CLI, bundled examples and the
//! benchmark entrypoint.

pub mod api;
pub mod bench;
pub mod config;
pub mod ctl;
pub mod example;
pub mod generator;
pub mod routes;
pub mod server;
