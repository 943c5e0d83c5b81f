//! HTTP client, simulated crowd driver and demos behind the `ashwin` binary.

pub mod client;
pub mod demo;
