use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::energy::PowerSample;
use super::meter::PowerMeter;
use super::MeterError;
use crate::clock;

type SamplerResult = (Box<dyn PowerMeter>, Result<Vec<PowerSample>, MeterError>);

/// Reads a power meter every `period` on a dedicated thread. Sample times are
/// in the shared process timebase; the meter itself sees seconds since
/// `start`.
pub struct PowerSampler {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<SamplerResult>,
}

impl PowerSampler {
    pub fn start(mut meter: Box<dyn PowerMeter>, period: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = std::thread::Builder::new()
            .name("power-sampler".into())
            .spawn(move || {
                let origin = clock::now_s();
                let mut samples: Vec<PowerSample> = Vec::new();
                let mut take = |meter: &mut Box<dyn PowerMeter>| -> Result<(), MeterError> {
                    let t = clock::now_s();
                    let watts = meter.read_watts(t - origin)?;
                    if samples.last().is_none_or(|s| t > s.t) {
                        samples.push(PowerSample { t, watts });
                    }
                    Ok(())
                };
                let mut outcome = take(&mut meter);
                let mut k = 1u32;
                while outcome.is_ok() && !flag.load(Ordering::Acquire) {
                    let due = origin + period.as_secs_f64() * k as f64;
                    let wait = due - clock::now_s();
                    if wait > 0.0 {
                        std::thread::park_timeout(Duration::from_secs_f64(wait));
                        if clock::now_s() < due && !flag.load(Ordering::Acquire) {
                            continue;
                        }
                    }
                    k += 1;
                    outcome = take(&mut meter);
                }
                // Closing sample so the trace reaches the end of the window.
                if outcome.is_ok() {
                    outcome = take(&mut meter);
                }
                (meter, outcome.map(|_| samples))
            })
            .expect("spawn power sampler");
        Self { stop, handle }
    }

    pub fn stop(self) -> (Box<dyn PowerMeter>, Result<Vec<PowerSample>, MeterError>) {
        self.stop.store(true, Ordering::Release);
        self.handle.thread().unpark();
        self.handle.join().expect("power sampler panicked")
    }
}
