//! Whole-machine power metering, energy and CO2 accounting, and peak
//! resident-memory sampling of the model process tree.

mod energy;
mod memory;
mod meter;
mod sampler;

pub use energy::{
    co2_from_energy, integrate_energy, EnergyReport, PowerSample, PowerTrace,
    DEFAULT_METER_ERROR_FRAC,
};
pub use memory::{process_tree_rss, MemoryPeak, MemorySampler};
pub use meter::{
    measure_idle_baseline, open_meter, MeterSpec, PowerMeter, RaplMeter, ReplayMeter,
    SyntheticMeter, MIN_BASELINE_SAMPLES, parse_trace_csv, write_trace_csv,
};
pub use sampler::PowerSampler;

#[derive(Debug, thiserror::Error)]
pub enum MeterError {
    #[error("power meter unavailable: {0}")]
    MeterUnavailable(String),
    #[error("only {got} power samples collected, at least {needed} required")]
    InsufficientSamples { got: usize, needed: usize },
    #[error("power trace gap: {0}")]
    TraceGap(String),
    #[error("invalid power trace: {0}")]
    InvalidTrace(String),
    #[error("process {pid} vanished")]
    ProcessVanished { pid: u32 },
    #[error("memory sampling unsupported on this platform")]
    MemoryUnsupported,
}
