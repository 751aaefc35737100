//! Host-wide single-flight run slot.
//!
//! Layout next to the configured lock path `L`:
//!
//! - `L` slot file. The holder keeps an exclusive OS lock on it and
//!   rewrites `{owner, pid, job_id, heartbeat_unix_ms, state}` every
//!   heartbeat period.
//! - `L.seq` ticket counter, incremented under its own exclusive lock.
//! - `L.queue/` one file per waiting or running ticket, named
//!   `<seq>.<pid>.<token>`. The lowest live sequence number is next in
//!   line, which gives FIFO order across processes.
//!
//! The kernel drops the slot lock when its holder dies, so two holders are
//! impossible. Tickets of dead processes are swept by whoever scans the
//! queue next; a slot file still marked `held` without a fresh heartbeat is
//! reported and reclaimed.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const LOCK_PATH_ENV: &str = "INFERMARK_LOCK";
pub const DEFAULT_HEARTBEAT: Duration = Duration::from_secs(2);
const POLL: Duration = Duration::from_millis(20);

static TOKEN: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, thiserror::Error)]
pub enum SchedulerError {
    #[error("timed out after {0:?} waiting for the run slot")]
    QueueTimeout(Duration),
    #[error("ticket {0} does not hold the run slot")]
    NotHolder(String),
    #[error("scheduler i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SchedulerError + '_ {
    move |source| SchedulerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SlotRecord {
    owner: String,
    pid: u32,
    job_id: String,
    heartbeat_unix_ms: u64,
    state: String,
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[cfg(unix)]
fn pid_alive(pid: u32) -> bool {
    // Signal 0 only checks for existence and permission.
    let rc = unsafe { libc::kill(pid as libc::pid_t, 0) };
    rc == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

#[cfg(not(unix))]
fn pid_alive(_pid: u32) -> bool {
    true
}

pub fn default_lock_path() -> PathBuf {
    std::env::var_os(LOCK_PATH_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("infermark.lock"))
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    lock_path: PathBuf,
    heartbeat: Duration,
    queue_timeout: Option<Duration>,
}

struct Holding {
    file: Arc<Mutex<File>>,
    stop: Arc<AtomicBool>,
    heart: JoinHandle<()>,
}

/// A place in the run queue. Holds the slot while `state == Running`.
pub struct JobTicket {
    pub job_id: String,
    pub enqueued_at: String,
    pub state: TicketState,
    owner: String,
    queue_file: PathBuf,
    holding: Option<Holding>,
    lock_path: PathBuf,
}

impl std::fmt::Debug for JobTicket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JobTicket")
            .field("job_id", &self.job_id)
            .field("owner", &self.owner)
            .field("state", &self.state)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct QueueEntry {
    seq: u64,
    pid: u32,
    path: PathBuf,
}

fn parse_entry(path: PathBuf) -> Option<QueueEntry> {
    let name = path.file_name()?.to_str()?;
    let mut parts = name.split('.');
    let seq = parts.next()?.parse().ok()?;
    let pid = parts.next()?.parse().ok()?;
    Some(QueueEntry { seq, pid, path })
}

impl Scheduler {
    pub fn new(lock_path: impl Into<PathBuf>) -> Self {
        Self {
            lock_path: lock_path.into(),
            heartbeat: DEFAULT_HEARTBEAT,
            queue_timeout: None,
        }
    }

    pub fn with_heartbeat(mut self, period: Duration) -> Self {
        self.heartbeat = period;
        self
    }

    pub fn with_queue_timeout(mut self, timeout: Duration) -> Self {
        self.queue_timeout = Some(timeout);
        self
    }

    pub fn lock_path(&self) -> &Path {
        &self.lock_path
    }

    fn sibling(&self, suffix: &str) -> PathBuf {
        let mut s = self.lock_path.clone().into_os_string();
        s.push(suffix);
        PathBuf::from(s)
    }

    fn queue_dir(&self) -> PathBuf {
        self.sibling(".queue")
    }

    fn next_seq(&self) -> Result<u64, SchedulerError> {
        let path = self.sibling(".seq");
        let mut f = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(io_err(&path))?;
        f.lock().map_err(io_err(&path))?;
        let mut body = String::new();
        f.read_to_string(&mut body).map_err(io_err(&path))?;
        let seq = body.trim().parse::<u64>().unwrap_or(0) + 1;
        f.seek(SeekFrom::Start(0)).map_err(io_err(&path))?;
        f.set_len(0).map_err(io_err(&path))?;
        f.write_all(seq.to_string().as_bytes()).map_err(io_err(&path))?;
        f.unlock().map_err(io_err(&path))?;
        Ok(seq)
    }

    /// Live entries in sequence order. Entries of dead processes are removed.
    fn scan_queue(&self) -> Result<Vec<QueueEntry>, SchedulerError> {
        let dir = self.queue_dir();
        let mut entries = Vec::new();
        for item in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let Ok(item) = item else { continue };
            let Some(entry) = parse_entry(item.path()) else {
                continue;
            };
            if pid_alive(entry.pid) {
                entries.push(entry);
            } else {
                log::warn!(
                    "removing queue ticket {} of dead process {}",
                    entry.seq,
                    entry.pid
                );
                let _ = std::fs::remove_file(&entry.path);
            }
        }
        entries.sort_by_key(|e| e.seq);
        Ok(entries)
    }

    /// Blocks until the caller holds the run slot. Grants are FIFO in
    /// enqueue order across threads and processes.
    pub fn acquire(&self, job_id: &str) -> Result<JobTicket, SchedulerError> {
        if let Some(parent) = self.lock_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let dir = self.queue_dir();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        let pid = std::process::id();
        let token = TOKEN.fetch_add(1, Ordering::Relaxed);
        let seq = self.next_seq()?;
        let queue_file = dir.join(format!("{seq:020}.{pid}.{token}"));
        File::create(&queue_file).map_err(io_err(&queue_file))?;
        let mut ticket = JobTicket {
            job_id: job_id.to_string(),
            enqueued_at: chrono::Utc::now().to_rfc3339(),
            state: TicketState::Queued,
            owner: format!("{pid}.{token}"),
            queue_file,
            holding: None,
            lock_path: self.lock_path.clone(),
        };

        let started = Instant::now();
        loop {
            let queue = self.scan_queue()?;
            let at_head = queue.first().map(|e| &e.path) == Some(&ticket.queue_file);
            if at_head {
                if let Some(file) = self.try_take_slot()? {
                    self.grant(&mut ticket, file)?;
                    return Ok(ticket);
                }
            }
            if let Some(limit) = self.queue_timeout {
                if started.elapsed() >= limit {
                    // Dropping the ticket removes its queue file.
                    return Err(SchedulerError::QueueTimeout(limit));
                }
            }
            std::thread::sleep(POLL);
        }
    }

    fn try_take_slot(&self) -> Result<Option<File>, SchedulerError> {
        let path = &self.lock_path;
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(io_err(path))?;
        match file.try_lock() {
            Ok(()) => Ok(Some(file)),
            Err(std::fs::TryLockError::WouldBlock) => Ok(None),
            Err(std::fs::TryLockError::Error(e)) => Err(io_err(path)(e)),
        }
    }

    fn grant(&self, ticket: &mut JobTicket, mut file: File) -> Result<(), SchedulerError> {
        let path = &self.lock_path;
        let mut body = String::new();
        file.read_to_string(&mut body).map_err(io_err(path))?;
        if !body.trim().is_empty() {
            match serde_json::from_str::<SlotRecord>(&body) {
                Ok(prev) if prev.state == "held" => {
                    let age = unix_ms().saturating_sub(prev.heartbeat_unix_ms);
                    let stale = age > 3 * self.heartbeat.as_millis() as u64;
                    log::warn!(
                        "reclaiming run slot left held by {} (job {}, pid {}, heartbeat {age} ms ago{})",
                        prev.owner,
                        prev.job_id,
                        prev.pid,
                        if stale { ", stale" } else { "" }
                    );
                }
                Ok(_) => {}
                Err(_) => log::warn!("slot file {} was corrupt; reclaimed", path.display()),
            }
        }
        let record = SlotRecord {
            owner: ticket.owner.clone(),
            pid: std::process::id(),
            job_id: ticket.job_id.clone(),
            heartbeat_unix_ms: unix_ms(),
            state: "held".into(),
        };
        write_slot(&mut file, &record).map_err(io_err(path))?;

        let file = Arc::new(Mutex::new(file));
        let stop = Arc::new(AtomicBool::new(false));
        let (hb_file, hb_stop, period) = (Arc::clone(&file), Arc::clone(&stop), self.heartbeat);
        let heart = std::thread::Builder::new()
            .name("slot-heartbeat".into())
            .spawn(move || {
                let mut record = record;
                while !hb_stop.load(Ordering::Acquire) {
                    std::thread::park_timeout(period);
                    if hb_stop.load(Ordering::Acquire) {
                        break;
                    }
                    record.heartbeat_unix_ms = unix_ms();
                    let mut f = hb_file.lock().expect("slot file lock");
                    if let Err(e) = write_slot(&mut f, &record) {
                        log::warn!("heartbeat write failed: {e}");
                    }
                }
            })
            .expect("spawn heartbeat");
        ticket.holding = Some(Holding { file, stop, heart });
        ticket.state = TicketState::Running;
        Ok(())
    }

    /// Frees the slot; the next ticket in FIFO order is granted.
    pub fn release(&self, ticket: &mut JobTicket) -> Result<(), SchedulerError> {
        ticket.finish(TicketState::Done)
    }
}

fn write_slot(file: &mut File, record: &SlotRecord) -> std::io::Result<()> {
    let body = serde_json::to_vec(record).expect("slot record serializes");
    file.seek(SeekFrom::Start(0))?;
    file.set_len(0)?;
    file.write_all(&body)?;
    file.flush()
}

impl JobTicket {
    pub fn owner(&self) -> &str {
        &self.owner
    }

    /// Releases the slot and records the final state (`Done` or `Failed`).
    pub fn finish(&mut self, state: TicketState) -> Result<(), SchedulerError> {
        let Some(holding) = self.holding.take() else {
            return Err(SchedulerError::NotHolder(self.owner.clone()));
        };
        holding.stop.store(true, Ordering::Release);
        holding.heart.thread().unpark();
        let _ = holding.heart.join();
        let file = Arc::try_unwrap(holding.file)
            .expect("heartbeat thread joined")
            .into_inner()
            .expect("slot file lock");
        let mut file = file;
        let record = SlotRecord {
            owner: self.owner.clone(),
            pid: std::process::id(),
            job_id: self.job_id.clone(),
            heartbeat_unix_ms: unix_ms(),
            state: "released".into(),
        };
        let written = write_slot(&mut file, &record);
        let unlocked = file.unlock();
        drop(file);
        let _ = std::fs::remove_file(&self.queue_file);
        self.state = state;
        written
            .and(unlocked)
            .map_err(io_err(&self.lock_path))
    }
}

impl Drop for JobTicket {
    fn drop(&mut self) {
        if self.holding.is_some() {
            let _ = self.finish(TicketState::Failed);
        } else {
            let _ = std::fs::remove_file(&self.queue_file);
        }
    }
}
