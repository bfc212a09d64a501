//! Support library for the `sdnr` binary: case-file schema, report
//! serialization, and the hourly run orchestrator.
//!
//! The binary in `main.rs` is a thin argument-parsing layer over these
//! modules; integration tests drive them directly.

pub mod case;
pub mod report;
pub mod runner;
