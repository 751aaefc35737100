//! Process-wide monotonic timebase.
//!
//! Every timestamp recorded by the runner and the samplers is expressed as
//! seconds since a single process-local origin, so intervals computed across
//! modules never mix clocks.

use std::sync::OnceLock;
use std::time::Instant;

static ORIGIN: OnceLock<Instant> = OnceLock::new();

/// Monotonic seconds since the process origin.
pub fn now_s() -> f64 {
    let origin = *ORIGIN.get_or_init(Instant::now);
    origin.elapsed().as_secs_f64()
}

/// Converts an `Instant` captured elsewhere into the shared timebase.
pub fn instant_s(at: Instant) -> f64 {
    let origin = *ORIGIN.get_or_init(Instant::now);
    match at.checked_duration_since(origin) {
        Some(d) => d.as_secs_f64(),
        None => -(origin.duration_since(at).as_secs_f64()),
    }
}
