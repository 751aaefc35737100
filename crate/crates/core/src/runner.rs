//! Drives a model-under-test process through a batch plan.
//!
//! The model is spawned with piped stdio. A reader thread turns its standard
//! output into timestamped lines so every read can be bounded by a timeout;
//! standard error is drained to the log. Measurement starts at the ready
//! signal: nothing before it is timestamped into the record.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::clock;
use crate::metering::{MemorySampler, MeterError};
use crate::protocol::{
    decode_response, encode_offline_request, encode_request, parse_ready, ProtocolError,
    ReadySignal,
};
use crate::scenario::{BatchPlan, OfflineJob};

const STDERR_TAIL: usize = 20;
pub const DEFAULT_STARTUP_TIMEOUT_S: f64 = 300.0;
pub const DEFAULT_RESPONSE_TIMEOUT_S: f64 = 600.0;
pub const DEFAULT_EXIT_GRACE_S: f64 = 10.0;

fn default_startup() -> f64 {
    DEFAULT_STARTUP_TIMEOUT_S
}
fn default_response() -> f64 {
    DEFAULT_RESPONSE_TIMEOUT_S
}
fn default_grace() -> f64 {
    DEFAULT_EXIT_GRACE_S
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub name: String,
    pub start_command: Vec<String>,
    #[serde(default)]
    pub setup_command: Option<Vec<String>>,
    /// Relative paths resolve against the manifest file's directory.
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub params_override: Option<u64>,
    #[serde(default = "default_startup")]
    pub startup_timeout_s: f64,
    #[serde(default = "default_response")]
    pub response_timeout_s: f64,
    #[serde(default = "default_grace")]
    pub exit_grace_s: f64,
}

impl ModelManifest {
    pub fn new(name: impl Into<String>, start_command: Vec<String>) -> Self {
        Self {
            name: name.into(),
            start_command,
            setup_command: None,
            workdir: None,
            env: BTreeMap::new(),
            params_override: None,
            startup_timeout_s: DEFAULT_STARTUP_TIMEOUT_S,
            response_timeout_s: DEFAULT_RESPONSE_TIMEOUT_S,
            exit_grace_s: DEFAULT_EXIT_GRACE_S,
        }
    }

    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| RunnerError::Manifest(format!("{}: {e}", path.display())))?;
        let mut manifest: ModelManifest = serde_json::from_str(&body)
            .map_err(|e| RunnerError::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        manifest.workdir = Some(match manifest.workdir.take() {
            Some(w) if w.is_relative() => base.join(w),
            Some(w) => w,
            None => base.to_path_buf(),
        });
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.start_command.is_empty() {
            return Err(RunnerError::Manifest("start_command must not be empty".into()));
        }
        if matches!(&self.setup_command, Some(c) if c.is_empty()) {
            return Err(RunnerError::Manifest("setup_command must not be empty".into()));
        }
        for (name, v) in [
            ("startup_timeout_s", self.startup_timeout_s),
            ("response_timeout_s", self.response_timeout_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RunnerError::Manifest(format!("{name} must be positive")));
            }
        }
        if !(self.exit_grace_s >= 0.0 && self.exit_grace_s.is_finite()) {
            return Err(RunnerError::Manifest("exit_grace_s must be non-negative".into()));
        }
        Ok(())
    }

    fn command(&self, argv: &[String]) -> Command {
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..]).envs(&self.env);
        if let Some(dir) = &self.workdir {
            cmd.current_dir(dir);
        }
        cmd
    }

    /// Runs the optional setup command (checkpoint download and the like)
    /// to completion. Not part of any measurement.
    pub fn run_setup(&self) -> Result<(), RunnerError> {
        let Some(argv) = &self.setup_command else {
            return Ok(());
        };
        let status = self
            .command(argv)
            .stdin(Stdio::null())
            .status()
            .map_err(|e| RunnerError::SpawnFailure(format!("setup {:?}: {e}", argv[0])))?;
        if !status.success() {
            return Err(RunnerError::SetupFailed(status.to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("setup command failed: {0}")]
    SetupFailed(String),
    #[error("failed to spawn model: {0}")]
    SpawnFailure(String),
    #[error("model not ready within {0:.1}s")]
    ReadyTimeout(f64),
    #[error("no response to batch {batch_index} within {timeout_s:.1}s")]
    ResponseTimeout { batch_index: u64, timeout_s: f64 },
    #[error("model crashed ({detail}); stderr tail: {stderr_tail}")]
    ModelCrashed { detail: String, stderr_tail: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Metering(#[from] MeterError),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub dispatch_ts: f64,
    pub response_ts: f64,
    pub size: usize,
    pub outputs: Vec<String>,
}

/// Timings and outputs of one run, in the shared monotonic timebase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub ready_at: f64,
    pub batches: Vec<BatchRecord>,
    pub run_end: f64,
    pub peak_rss_bytes: u64,
    pub exit_status: Option<i32>,
}

impl RunRecord {
    fn empty(ready_at: f64) -> Self {
        Self {
            ready_at,
            batches: Vec::new(),
            run_end: ready_at,
            peak_rss_bytes: 0,
            exit_status: None,
        }
    }

    pub fn total_instances(&self) -> usize {
        self.batches.iter().map(|b| b.size).sum()
    }

    /// Seconds from the first dispatch to the last response.
    pub fn measured_span(&self) -> Option<f64> {
        let first = self.batches.first()?;
        let last = self.batches.last()?;
        Some(last.response_ts - first.dispatch_ts)
    }

    pub fn outputs(&self) -> Vec<String> {
        self.batches.iter().flat_map(|b| b.outputs.clone()).collect()
    }

    /// Checks `ready_at < dispatch <= response <= run_end`, in order.
    pub fn is_well_ordered(&self) -> bool {
        let mut prev = self.ready_at;
        for (i, b) in self.batches.iter().enumerate() {
            let after_prev = if i == 0 {
                b.dispatch_ts > prev
            } else {
                b.dispatch_ts >= prev
            };
            if !after_prev || b.response_ts < b.dispatch_ts {
                return false;
            }
            prev = b.response_ts;
        }
        prev <= self.run_end
    }
}

/// A run that stopped early, with everything recorded before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: RunnerError,
    pub partial: RunRecord,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Extra copies of the first batch dispatched after ready and excluded
    /// from the record.
    pub warmup_batches: usize,
    pub memory_period: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            warmup_batches: 0,
            memory_period: Duration::from_millis(50),
        }
    }
}

enum StdoutEvent {
    Line { text: String, at: f64 },
    Eof,
    Failed(String),
}

/// A live model process that has completed the ready handshake.
pub struct ModelConnection {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    lines: Receiver<StdoutEvent>,
    stderr_tail: Arc<Mutex<VecDeque<String>>>,
    _readers: Vec<JoinHandle<()>>,
    pub ready: ReadySignal,
    pub ready_at: f64,
    pub params: u64,
    response_timeout: Duration,
    exit_grace: Duration,
    next_index: u64,
}

impl ModelConnection {
    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    fn stderr_tail(&self) -> String {
        let tail = self.stderr_tail.lock().expect("stderr tail lock");
        tail.iter().cloned().collect::<Vec<_>>().join(" | ")
    }

    fn crashed(&mut self, detail: impl Into<String>) -> RunnerError {
        let mut detail = detail.into();
        // Give a dying process a moment so the exit status is known.
        let deadline = Instant::now() + Duration::from_millis(500);
        while Instant::now() < deadline {
            if let Ok(Some(status)) = self.child.try_wait() {
                detail = format!("{detail}, {status}");
                break;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        // Let the stderr reader catch up with the final messages.
        std::thread::sleep(Duration::from_millis(20));
        RunnerError::ModelCrashed {
            detail,
            stderr_tail: self.stderr_tail(),
        }
    }

    fn send(&mut self, line: &str) -> Result<(), RunnerError> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| RunnerError::Io("model stdin already closed".into()))?;
        let res = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush());
        match res {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {
                Err(self.crashed("stdin closed by model"))
            }
            Err(e) => Err(RunnerError::Io(e.to_string())),
        }
    }

    fn receive(&mut self, batch_index: u64) -> Result<(String, f64), RunnerError> {
        match self.lines.recv_timeout(self.response_timeout) {
            Ok(StdoutEvent::Line { text, at }) => Ok((text, at)),
            Ok(StdoutEvent::Eof) | Err(RecvTimeoutError::Disconnected) => {
                Err(self.crashed(format!("stdout closed while waiting for batch {batch_index}")))
            }
            Ok(StdoutEvent::Failed(e)) => Err(RunnerError::Io(e)),
            Err(RecvTimeoutError::Timeout) => Err(RunnerError::ResponseTimeout {
                batch_index,
                timeout_s: self.response_timeout.as_secs_f64(),
            }),
        }
    }

    /// Sends one request and waits for its response. Returns the outputs
    /// with the dispatch and response timestamps.
    fn round_trip(&mut self, request: &str, expected_len: usize) -> Result<BatchRecord, RunnerError> {
        let index = self.next_index;
        self.next_index += 1;
        let dispatch_ts = clock::now_s();
        self.send(request)?;
        let (line, response_ts) = self.receive(index)?;
        let response = decode_response(&line, expected_len, index)?;
        Ok(BatchRecord {
            dispatch_ts,
            response_ts,
            size: expected_len,
            outputs: response.outputs,
        })
    }

    /// Sends one batch outside of any plan and returns its outputs. Used by
    /// adapter validation.
    pub fn probe(&mut self, batch: &[String]) -> Result<BatchRecord, RunnerError> {
        let line = encode_request(batch, self.next_index);
        self.round_trip(&line, batch.len())
    }

    /// Closes the model's standard input and waits up to the exit grace
    /// period before killing it.
    pub fn close(mut self) -> Option<i32> {
        drop(self.stdin.take());
        let deadline = Instant::now() + self.exit_grace;
        let status = loop {
            match self.child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(5))
                }
                _ => {
                    log::warn!("model did not exit within the grace period; killing it");
                    let _ = self.child.kill();
                    break self.child.wait().ok();
                }
            }
        };
        // Reader threads end on EOF by themselves; joining could block on
        // grandchildren that inherited the pipes.
        status.as_ref().and_then(exit_code)
    }

    /// Kills the process immediately.
    pub fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn exit_code(status: &ExitStatus) -> Option<i32> {
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        status.code().or_else(|| status.signal().map(|s| 128 + s))
    }
    #[cfg(not(unix))]
    {
        status.code()
    }
}

/// Spawns the model and waits for its ready signal. Setup commands must have
/// been run already. Lines printed before the ready signal are logged as
/// startup chatter.
pub fn spawn_and_handshake(manifest: &ModelManifest) -> Result<ModelConnection, RunnerError> {
    manifest.validate()?;
    let mut child = manifest
        .command(&manifest.start_command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| RunnerError::SpawnFailure(format!("{:?}: {e}", manifest.start_command[0])))?;

    let stdout = child.stdout.take().expect("piped stdout");
    let stderr = child.stderr.take().expect("piped stderr");
    let stdin = child.stdin.take().expect("piped stdin");

    let (tx, rx) = mpsc::channel();
    let out_reader = std::thread::Builder::new()
        .name("model-stdout".into())
        .spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut buf = String::new();
                match reader.read_line(&mut buf) {
                    Ok(0) => {
                        let _ = tx.send(StdoutEvent::Eof);
                        break;
                    }
                    Ok(_) => {
                        let at = clock::now_s();
                        if buf.ends_with('\n') {
                            buf.pop();
                        }
                        if tx.send(StdoutEvent::Line { text: buf, at }).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(StdoutEvent::Failed(e.to_string()));
                        break;
                    }
                }
            }
        })
        .expect("spawn stdout reader");

    let tail = Arc::new(Mutex::new(VecDeque::with_capacity(STDERR_TAIL)));
    let tail_w = Arc::clone(&tail);
    let model_name = manifest.name.clone();
    let err_reader = std::thread::Builder::new()
        .name("model-stderr".into())
        .spawn(move || {
            for line in BufReader::new(stderr).lines() {
                let Ok(line) = line else { break };
                log::debug!("[{model_name} stderr] {line}");
                let mut t = tail_w.lock().expect("stderr tail lock");
                if t.len() == STDERR_TAIL {
                    t.pop_front();
                }
                t.push_back(line);
            }
        })
        .expect("spawn stderr reader");

    let mut conn = ModelConnection {
        child,
        stdin: Some(BufWriter::new(stdin)),
        lines: rx,
        stderr_tail: tail,
        _readers: vec![out_reader, err_reader],
        ready: ReadySignal {
            params: 0,
            model_name: String::new(),
        },
        ready_at: 0.0,
        params: 0,
        response_timeout: Duration::from_secs_f64(manifest.response_timeout_s),
        exit_grace: Duration::from_secs_f64(manifest.exit_grace_s),
        next_index: 0,
    };

    let startup = Duration::from_secs_f64(manifest.startup_timeout_s);
    let deadline = Instant::now() + startup;
    loop {
        let remaining = deadline.saturating_duration_since(Instant::now());
        let event = match conn.lines.recv_timeout(remaining) {
            Ok(ev) => ev,
            Err(RecvTimeoutError::Timeout) => {
                conn.kill();
                return Err(RunnerError::ReadyTimeout(manifest.startup_timeout_s));
            }
            Err(RecvTimeoutError::Disconnected) => StdoutEvent::Eof,
        };
        match event {
            StdoutEvent::Line { text, at } => match parse_ready(&text) {
                Ok(Some(ready)) => {
                    conn.ready_at = at;
                    conn.params = manifest.params_override.unwrap_or(ready.params);
                    conn.ready = ready;
                    return Ok(conn);
                }
                Ok(None) => log::info!("[{}] {}", manifest.name, text),
                Err(e) => {
                    conn.kill();
                    return Err(e.into());
                }
            },
            StdoutEvent::Eof => {
                let err = conn.crashed("exited before signalling ready");
                conn.kill();
                return Err(err);
            }
            StdoutEvent::Failed(e) => {
                conn.kill();
                return Err(RunnerError::Io(e));
            }
        }
    }
}

fn start_memory(conn: &ModelConnection, opts: &RunOptions) -> Option<MemorySampler> {
    match MemorySampler::start(conn.pid(), opts.memory_period) {
        Ok(s) => Some(s),
        Err(e) => {
            log::warn!("memory sampling disabled: {e}");
            None
        }
    }
}

fn finish(record: &mut RunRecord, sampler: Option<MemorySampler>) {
    record.run_end = record
        .batches
        .last()
        .map(|b| b.response_ts)
        .unwrap_or(record.ready_at);
    if let Some(s) = sampler {
        record.peak_rss_bytes = s.stop().peak_rss_bytes;
    }
}

/// Dispatches an online plan closed-loop: batch `i + 1` is written only after
/// the response to batch `i` has been read.
pub fn run_online(
    conn: &mut ModelConnection,
    plan: &BatchPlan,
    opts: &RunOptions,
) -> Result<RunRecord, RunFailure> {
    let mut record = RunRecord::empty(conn.ready_at);
    let sampler = start_memory(conn, opts);
    let result = (|| {
        if let Some(first) = plan.batches.first() {
            let inputs: Vec<String> = first.iter().map(|i| i.input.clone()).collect();
            for _ in 0..opts.warmup_batches {
                let line = encode_request(&inputs, conn.next_index);
                conn.round_trip(&line, inputs.len())?;
            }
        }
        for batch in &plan.batches {
            let inputs: Vec<String> = batch.iter().map(|i| i.input.clone()).collect();
            let line = encode_request(&inputs, conn.next_index);
            record.batches.push(conn.round_trip(&line, inputs.len())?);
        }
        Ok(())
    })();
    finish(&mut record, sampler);
    match result {
        Ok(()) => Ok(record),
        Err(error) => Err(RunFailure {
            error,
            partial: record,
        }),
    }
}

/// Hands the model the whole instance file in one request. The response must
/// list outputs in file line order.
pub fn run_offline(
    conn: &mut ModelConnection,
    job: &OfflineJob,
    instance_file: &Path,
    opts: &RunOptions,
) -> Result<RunRecord, RunFailure> {
    let mut record = RunRecord::empty(conn.ready_at);
    let sampler = start_memory(conn, opts);
    let path = instance_file.to_string_lossy().into_owned();
    let line = encode_offline_request(&path, conn.next_index);
    let result = conn.round_trip(&line, job.instances().len());
    if let Ok(batch) = &result {
        record.batches.push(batch.clone());
    }
    finish(&mut record, sampler);
    match result {
        Ok(_) => Ok(record),
        Err(error) => Err(RunFailure {
            error,
            partial: record,
        }),
    }
}
