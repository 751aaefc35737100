use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::MeterError;

/// Resident set size in bytes of `pid` plus all of its descendants.
#[cfg(target_os = "linux")]
pub fn process_tree_rss(pid: u32) -> Result<u64, MeterError> {
    let root = read_status(pid).ok_or(MeterError::ProcessVanished { pid })?;
    if root.zombie {
        return Err(MeterError::ProcessVanished { pid });
    }
    let mut children: HashMap<u32, Vec<u32>> = HashMap::new();
    if let Ok(entries) = std::fs::read_dir("/proc") {
        for entry in entries.flatten() {
            let Some(child) = entry.file_name().to_str().and_then(|n| n.parse::<u32>().ok()) else {
                continue;
            };
            if let Some(ppid) = read_ppid(child) {
                children.entry(ppid).or_default().push(child);
            }
        }
    }
    let mut total = root.rss_bytes;
    let mut stack: Vec<u32> = children.get(&pid).cloned().unwrap_or_default();
    while let Some(p) = stack.pop() {
        if let Some(st) = read_status(p) {
            total += st.rss_bytes;
        }
        if let Some(grand) = children.get(&p) {
            stack.extend(grand);
        }
    }
    Ok(total)
}

#[cfg(not(target_os = "linux"))]
pub fn process_tree_rss(_pid: u32) -> Result<u64, MeterError> {
    Err(MeterError::MemoryUnsupported)
}

#[cfg(target_os = "linux")]
struct Status {
    rss_bytes: u64,
    zombie: bool,
}

#[cfg(target_os = "linux")]
fn read_status(pid: u32) -> Option<Status> {
    let body = std::fs::read_to_string(format!("/proc/{pid}/status")).ok()?;
    let mut rss_kb = 0;
    let mut zombie = false;
    for line in body.lines() {
        if let Some(v) = line.strip_prefix("VmRSS:") {
            rss_kb = v.split_whitespace().next()?.parse().ok()?;
        } else if let Some(v) = line.strip_prefix("State:") {
            zombie = v.trim_start().starts_with('Z') || v.trim_start().starts_with('X');
        }
    }
    Some(Status {
        rss_bytes: rss_kb * 1024,
        zombie,
    })
}

#[cfg(target_os = "linux")]
fn read_ppid(pid: u32) -> Option<u32> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // The command name may contain spaces and parentheses; fields resume
    // after the last ')'.
    let rest = &stat[stat.rfind(')')? + 1..];
    rest.split_whitespace().nth(1)?.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryPeak {
    pub peak_rss_bytes: u64,
    pub samples: usize,
    pub vanished: bool,
}

/// Periodically samples the RSS of a process tree on its own thread and
/// keeps the running maximum.
pub struct MemorySampler {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<MemoryPeak>,
}

impl MemorySampler {
    /// Takes the first sample synchronously; a process that is already gone
    /// is reported as `ProcessVanished`.
    pub fn start(pid: u32, period: Duration) -> Result<Self, MeterError> {
        let first = process_tree_rss(pid)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = std::thread::Builder::new()
            .name("rss-sampler".into())
            .spawn(move || {
                let mut peak = MemoryPeak {
                    peak_rss_bytes: first,
                    samples: 1,
                    vanished: false,
                };
                while !flag.load(Ordering::Acquire) {
                    std::thread::park_timeout(period);
                    match process_tree_rss(pid) {
                        Ok(rss) => {
                            peak.peak_rss_bytes = peak.peak_rss_bytes.max(rss);
                            peak.samples += 1;
                        }
                        Err(_) => {
                            peak.vanished = true;
                            break;
                        }
                    }
                }
                peak
            })
            .expect("spawn rss sampler");
        Ok(Self { stop, handle })
    }

    pub fn stop(self) -> MemoryPeak {
        self.stop.store(true, Ordering::Release);
        self.handle.thread().unpark();
        self.handle.join().expect("rss sampler panicked")
    }
}
