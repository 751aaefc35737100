//! Inference efficiency benchmarking for models that speak a JSON-lines
//! protocol over standard input and output.
//!
//! A run plans batches for one of four serving scenarios, spawns the model,
//! waits for its ready signal, dispatches the plan closed-loop while power
//! and memory samplers run alongside, and assembles a report with
//! throughput, latency, peak memory, energy and CO2, parameter count and
//! accuracy, each present only where the scenario calls for it.

pub mod cli;
pub mod clock;
pub mod metering;
pub mod metrics;
pub mod protocol;
pub mod report;
pub mod rng;
pub mod runner;
pub mod scenario;
pub mod scheduler;
pub mod text;
