use serde::{Deserialize, Serialize};

use super::MeterError;

/// Manufacturer-stated relative error of the reference whole-machine meter.
pub const DEFAULT_METER_ERROR_FRAC: f64 = 0.012;

/// Gaps wider than this many sampling periods invalidate a trace.
const MAX_GAP_PERIODS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub t: f64,
    pub watts: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerTrace {
    pub samples: Vec<PowerSample>,
    pub idle_watts: f64,
    pub period_s: f64,
    pub meter_error_frac: f64,
}

impl PowerTrace {
    pub fn new(samples: Vec<PowerSample>, idle_watts: f64, period_s: f64) -> Self {
        Self {
            samples,
            idle_watts,
            period_s,
            meter_error_frac: DEFAULT_METER_ERROR_FRAC,
        }
    }

    fn watts_at(&self, t: f64) -> f64 {
        let s = &self.samples;
        let idx = s.partition_point(|p| p.t <= t);
        if idx == 0 {
            return s[0].watts;
        }
        if idx == s.len() {
            return s[s.len() - 1].watts;
        }
        let (a, b) = (s[idx - 1], s[idx]);
        a.watts + (b.watts - a.watts) * (t - a.t) / (b.t - a.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub energy_wh: f64,
    pub co2_g: f64,
    pub intensity_g_per_kwh: f64,
}

impl EnergyReport {
    pub fn new(energy_wh: f64, intensity_g_per_kwh: f64) -> Self {
        Self {
            energy_wh,
            co2_g: co2_from_energy(energy_wh, intensity_g_per_kwh),
            intensity_g_per_kwh,
        }
    }
}

pub fn co2_from_energy(energy_wh: f64, intensity_g_per_kwh: f64) -> f64 {
    energy_wh / 1000.0 * intensity_g_per_kwh
}

/// Net energy in watt-hours over `[run_start, run_end]`.
///
/// Net power is `max(0, watts - idle)` at every point; the integral is
/// trapezoidal over the samples inside the window plus linearly interpolated
/// values at both window edges.
pub fn integrate_energy(trace: &PowerTrace, run_start: f64, run_end: f64) -> Result<f64, MeterError> {
    if run_end.is_nan() || run_start.is_nan() || run_end <= run_start {
        return Err(MeterError::InvalidTrace(format!(
            "empty window [{run_start}, {run_end}]"
        )));
    }
    let s = &trace.samples;
    let (Some(first), Some(last)) = (s.first(), s.last()) else {
        return Err(MeterError::TraceGap("no samples".into()));
    };
    let slack = trace.period_s;
    if first.t > run_start + slack || last.t < run_end - slack {
        return Err(MeterError::TraceGap(format!(
            "samples span [{:.3}, {:.3}] but the run window is [{run_start:.3}, {run_end:.3}]",
            first.t, last.t
        )));
    }
    let limit = MAX_GAP_PERIODS * trace.period_s;
    for w in s.windows(2) {
        let overlaps = w[1].t > run_start && w[0].t < run_end;
        if overlaps && w[1].t - w[0].t > limit {
            return Err(MeterError::TraceGap(format!(
                "{:.3}s between samples at t={:.3} and t={:.3}",
                w[1].t - w[0].t,
                w[0].t,
                w[1].t
            )));
        }
    }

    let net = |w: f64| (w - trace.idle_watts).max(0.0);
    let mut prev_t = run_start;
    let mut prev_p = net(trace.watts_at(run_start));
    let mut joules = 0.0;
    for p in s.iter().filter(|p| p.t > run_start && p.t < run_end) {
        let cur = net(p.watts);
        joules += 0.5 * (prev_p + cur) * (p.t - prev_t);
        prev_t = p.t;
        prev_p = cur;
    }
    let end_p = net(trace.watts_at(run_end));
    joules += 0.5 * (prev_p + end_p) * (run_end - prev_t);
    Ok(joules / 3600.0)
}
