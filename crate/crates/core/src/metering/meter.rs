use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use super::energy::PowerSample;
use super::MeterError;

pub const MIN_BASELINE_SAMPLES: usize = 5;

/// A source of whole-machine power readings.
///
/// Trace-driven meters (`is_realtime() == false`) answer for any requested
/// time offset and need no pacing; a hardware meter ignores `t_s` and reports
/// the power drawn since its previous reading.
pub trait PowerMeter: Send {
    fn describe(&self) -> String;
    fn is_realtime(&self) -> bool;
    /// Power in watts at `t_s` seconds after the meter was started.
    fn read_watts(&mut self, t_s: f64) -> Result<f64, MeterError>;
}

/// Replays a recorded `t_s,watts` CSV trace with linear interpolation,
/// holding the end values outside the recorded span.
#[derive(Debug, Clone)]
pub struct ReplayMeter {
    source: String,
    samples: Vec<PowerSample>,
}

impl ReplayMeter {
    pub fn from_samples(samples: Vec<PowerSample>) -> Result<Self, MeterError> {
        if samples.is_empty() {
            return Err(MeterError::InvalidTrace("trace has no samples".into()));
        }
        for w in samples.windows(2) {
            if w[1].t <= w[0].t {
                return Err(MeterError::InvalidTrace(format!(
                    "timestamps must strictly increase ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        if let Some(bad) = samples.iter().find(|s| !(s.watts >= 0.0 && s.watts.is_finite())) {
            return Err(MeterError::InvalidTrace(format!(
                "invalid wattage {} at t={}",
                bad.watts, bad.t
            )));
        }
        Ok(Self {
            source: "inline".into(),
            samples,
        })
    }

    pub fn from_csv(path: &Path) -> Result<Self, MeterError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| MeterError::MeterUnavailable(format!("{}: {e}", path.display())))?;
        let mut meter = Self::from_samples(parse_trace_csv(&body)?)?;
        meter.source = path.display().to_string();
        Ok(meter)
    }

    pub fn samples(&self) -> &[PowerSample] {
        &self.samples
    }

    pub fn watts_at(&self, t: f64) -> f64 {
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

pub fn parse_trace_csv(body: &str) -> Result<Vec<PowerSample>, MeterError> {
    let mut lines = body.lines().filter(|l| !l.trim().is_empty());
    match lines.next().map(str::trim) {
        Some("t_s,watts") => {}
        other => {
            return Err(MeterError::InvalidTrace(format!(
                "expected header \"t_s,watts\", found {other:?}"
            )))
        }
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || MeterError::InvalidTrace(format!("row {}: {line:?}", n + 1));
            let (t, w) = line.split_once(',').ok_or_else(bad)?;
            Ok(PowerSample {
                t: t.trim().parse().map_err(|_| bad())?,
                watts: w.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_trace_csv(path: &Path, samples: &[PowerSample]) -> std::io::Result<()> {
    let mut out = String::from("t_s,watts\n");
    for s in samples {
        out.push_str(&format!("{},{}\n", s.t, s.watts));
    }
    std::fs::write(path, out)
}

/// Closed-form synthetic power profiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticMeter {
    Constant { watts: f64 },
    /// Linear from `from` to `to` over `over_s` seconds, then held.
    Ramp { from: f64, to: f64, over_s: f64 },
    /// Alternates `low` and `high` every half `period_s`.
    Square { low: f64, high: f64, period_s: f64 },
    /// `mean + amplitude * sin(2 pi t / period_s)`.
    Sine { mean: f64, amplitude: f64, period_s: f64 },
}

impl SyntheticMeter {
    pub fn watts_at(&self, t: f64) -> f64 {
        match *self {
            SyntheticMeter::Constant { watts } => watts,
            SyntheticMeter::Ramp { from, to, over_s } => {
                from + (to - from) * (t / over_s).clamp(0.0, 1.0)
            }
            SyntheticMeter::Square {
                low,
                high,
                period_s,
            } => {
                if (t / period_s).rem_euclid(1.0) < 0.5 {
                    low
                } else {
                    high
                }
            }
            SyntheticMeter::Sine {
                mean,
                amplitude,
                period_s,
            } => (mean + amplitude * (std::f64::consts::TAU * t / period_s).sin()).max(0.0),
        }
    }

    fn parse(body: &str) -> Result<Self, String> {
        let parts: Vec<&str> = body.split(':').collect();
        let nums: Result<Vec<f64>, _> = parts[1..].iter().map(|p| p.parse::<f64>()).collect();
        let nums = nums.map_err(|e| format!("synthetic meter {body:?}: {e}"))?;
        let meter = match (parts[0], nums.as_slice()) {
            ("const", [w]) => SyntheticMeter::Constant { watts: *w },
            ("ramp", [a, b, s]) if *s > 0.0 => SyntheticMeter::Ramp {
                from: *a,
                to: *b,
                over_s: *s,
            },
            ("square", [lo, hi, p]) if *p > 0.0 => SyntheticMeter::Square {
                low: *lo,
                high: *hi,
                period_s: *p,
            },
            ("sine", [m, a, p]) if *p > 0.0 => SyntheticMeter::Sine {
                mean: *m,
                amplitude: *a,
                period_s: *p,
            },
            _ => return Err(format!("unrecognized synthetic meter {body:?}")),
        };
        Ok(meter)
    }
}

impl PowerMeter for ReplayMeter {
    fn describe(&self) -> String {
        format!("replay:{}", self.source)
    }

    fn is_realtime(&self) -> bool {
        false
    }

    fn read_watts(&mut self, t_s: f64) -> Result<f64, MeterError> {
        Ok(self.watts_at(t_s))
    }
}

impl PowerMeter for SyntheticMeter {
    fn describe(&self) -> String {
        format!("synthetic:{self:?}")
    }

    fn is_realtime(&self) -> bool {
        false
    }

    fn read_watts(&mut self, t_s: f64) -> Result<f64, MeterError> {
        Ok(self.watts_at(t_s))
    }
}

/// Host energy counter exposed through the Linux powercap interface
/// (`energy_uj`, microjoules, wrapping at `max_energy_range_uj`). Power is
/// the counter delta divided by the elapsed time between reads.
#[derive(Debug)]
pub struct RaplMeter {
    counter: PathBuf,
    max_uj: u64,
    last_uj: u64,
    last_at: Instant,
    last_watts: f64,
}

impl RaplMeter {
    pub const DEFAULT_ZONE: &'static str = "/sys/class/powercap/intel-rapl:0";

    pub fn open(zone: &Path) -> Result<Self, MeterError> {
        let counter = zone.join("energy_uj");
        let max_uj = read_counter(&zone.join("max_energy_range_uj")).unwrap_or(u64::MAX);
        let last_uj = read_counter(&counter)?;
        Ok(Self {
            counter,
            max_uj,
            last_uj,
            last_at: Instant::now(),
            last_watts: 0.0,
        })
    }
}

fn read_counter(path: &Path) -> Result<u64, MeterError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| MeterError::MeterUnavailable(format!("{}: {e}", path.display())))?;
    raw.trim()
        .parse()
        .map_err(|e| MeterError::MeterUnavailable(format!("{}: {e}", path.display())))
}

impl PowerMeter for RaplMeter {
    fn describe(&self) -> String {
        format!("rapl:{}", self.counter.display())
    }

    fn is_realtime(&self) -> bool {
        true
    }

    fn read_watts(&mut self, _t_s: f64) -> Result<f64, MeterError> {
        let now = Instant::now();
        let dt = now.duration_since(self.last_at).as_secs_f64();
        if dt < 1e-3 {
            return Ok(self.last_watts);
        }
        let uj = read_counter(&self.counter)?;
        let delta = if uj >= self.last_uj {
            uj - self.last_uj
        } else {
            // Counter wrapped.
            self.max_uj - self.last_uj + uj
        };
        self.last_uj = uj;
        self.last_at = now;
        self.last_watts = delta as f64 * 1e-6 / dt;
        Ok(self.last_watts)
    }
}

/// Textual meter selection, as accepted on the command line and in configs:
/// `none`, `replay:<csv>`, `synthetic:<profile>`, `rapl` or `rapl:<zone dir>`.
#[derive(Debug, Clone, PartialEq)]
pub enum MeterSpec {
    None,
    Replay(PathBuf),
    Synthetic(SyntheticMeter),
    Rapl(PathBuf),
}

impl FromStr for MeterSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "none" if rest.is_empty() => Ok(MeterSpec::None),
            "replay" if !rest.is_empty() => Ok(MeterSpec::Replay(rest.into())),
            "synthetic" => SyntheticMeter::parse(rest).map(MeterSpec::Synthetic),
            "rapl" if rest.is_empty() => Ok(MeterSpec::Rapl(RaplMeter::DEFAULT_ZONE.into())),
            "rapl" => Ok(MeterSpec::Rapl(rest.into())),
            _ => Err(format!("unrecognized meter spec {s:?}")),
        }
    }
}

impl fmt::Display for MeterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeterSpec::None => f.write_str("none"),
            MeterSpec::Replay(p) => write!(f, "replay:{}", p.display()),
            MeterSpec::Synthetic(m) => write!(f, "synthetic:{m:?}"),
            MeterSpec::Rapl(p) => write!(f, "rapl:{}", p.display()),
        }
    }
}

/// Opens the configured meter. `Ok(None)` means no meter was configured.
pub fn open_meter(spec: &MeterSpec) -> Result<Option<Box<dyn PowerMeter>>, MeterError> {
    Ok(match spec {
        MeterSpec::None => None,
        MeterSpec::Replay(path) => Some(Box::new(ReplayMeter::from_csv(path)?)),
        MeterSpec::Synthetic(m) => Some(Box::new(*m)),
        MeterSpec::Rapl(zone) => Some(Box::new(RaplMeter::open(zone)?)),
    })
}

/// Mean power over `[0, duration_s]`, sampled every `period_s`. Trace meters
/// are read at the sample offsets directly; real meters are paced.
pub fn measure_idle_baseline(
    meter: &mut dyn PowerMeter,
    duration_s: f64,
    period_s: f64,
) -> Result<f64, MeterError> {
    assert!(period_s > 0.0, "sampling period must be positive");
    let started = Instant::now();
    let mut readings = Vec::new();
    let mut k = 0u64;
    loop {
        let t = k as f64 * period_s;
        if t > duration_s + 1e-9 {
            break;
        }
        if meter.is_realtime() {
            let due = started + Duration::from_secs_f64(t);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        readings.push(meter.read_watts(t)?);
        k += 1;
    }
    if readings.len() < MIN_BASELINE_SAMPLES {
        return Err(MeterError::InsufficientSamples {
            got: readings.len(),
            needed: MIN_BASELINE_SAMPLES,
        });
    }
    Ok(readings.iter().sum::<f64>() / readings.len() as f64)
}
