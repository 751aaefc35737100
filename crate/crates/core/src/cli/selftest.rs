//! Built-in models-under-test. They speak the full protocol so the harness
//! can be exercised end to end without any external model.
//!
//! Modes:
//! - `echo`            outputs equal inputs
//! - `upper`           outputs are upper-cased inputs
//! - `delay:<ms>`      echo, answering each request `<ms>` after reading it
//! - `alloc:<MiB>`     echo; the first request allocates and touches
//!   `<MiB>` MiB that stay resident until exit
//! - `translator-toy`  reverses word order ("der Hund bellt" -> "bellt Hund der")
//!
//! `--delay-ms` adds a per-request delay to any mode.
//!
//! Faults (`--fault`, triggered at request `--fault-at`): `short-output`,
//! `bad-index`, `malformed`, `crash`, `hang`.

use std::io::{BufRead, Write};
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::protocol::{decode_request, encode_ready, encode_response, RequestLine};
use crate::text::unescape_line;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelftestMode {
    Echo,
    Upper,
    Delay { ms: u64 },
    Alloc { mib: usize },
    TranslatorToy,
}

impl FromStr for SelftestMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (head, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |what: &str| {
            arg.parse::<u64>()
                .map_err(|_| format!("{what} needs a non-negative integer, got {arg:?}"))
        };
        match head {
            "echo" if arg.is_empty() => Ok(SelftestMode::Echo),
            "upper" if arg.is_empty() => Ok(SelftestMode::Upper),
            "translator-toy" if arg.is_empty() => Ok(SelftestMode::TranslatorToy),
            "delay" => Ok(SelftestMode::Delay { ms: num("delay")? }),
            "alloc" => Ok(SelftestMode::Alloc {
                mib: num("alloc")? as usize,
            }),
            _ => Err(format!("unknown selftest mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    ShortOutput,
    BadIndex,
    Malformed,
    Crash,
    Hang,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "short-output" => Fault::ShortOutput,
            "bad-index" => Fault::BadIndex,
            "malformed" => Fault::Malformed,
            "crash" => Fault::Crash,
            "hang" => Fault::Hang,
            _ => return Err(format!("unknown fault {s:?}")),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub mode: SelftestMode,
    pub params: u64,
    pub name: String,
    pub startup_sleep: Duration,
    pub chatter: bool,
    pub fault: Option<Fault>,
    pub fault_at: u64,
    /// Added to the delay of `delay:<ms>`; applies to every mode.
    pub extra_delay: Duration,
}

pub fn reverse_words(text: &str) -> String {
    text.split_whitespace().rev().collect::<Vec<_>>().join(" ")
}

fn transform(mode: SelftestMode, input: &str) -> String {
    match mode {
        SelftestMode::Upper => input.to_uppercase(),
        SelftestMode::TranslatorToy => reverse_words(input),
        SelftestMode::Echo | SelftestMode::Delay { .. } | SelftestMode::Alloc { .. } => {
            input.to_string()
        }
    }
}

/// Sleeps until `deadline`, spinning over the last stretch so the wake-up
/// lands within microseconds of it.
fn wait_until(deadline: Instant) {
    const SPIN: Duration = Duration::from_millis(2);
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN {
            std::thread::sleep(left - SPIN);
        } else {
            std::thread::yield_now();
        }
    }
}

fn touch(mib: usize) -> Vec<u8> {
    let mut block = vec![0u8; mib << 20];
    for page in block.chunks_mut(4096) {
        page[0] = 1;
    }
    block
}

/// Serves requests on the given streams until input closes. Returns the
/// process exit code.
pub fn serve(
    opts: &SelftestOptions,
    input: impl BufRead,
    mut output: impl Write,
) -> std::io::Result<i32> {
    if !opts.startup_sleep.is_zero() {
        std::thread::sleep(opts.startup_sleep);
    }
    if opts.chatter {
        writeln!(output, "loading selftest model {}...", opts.name)?;
    }
    output.write_all(encode_ready(opts.params, &opts.name).as_bytes())?;
    output.flush()?;

    let mut resident: Option<Vec<u8>> = None;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let received = Instant::now();
        let request = match decode_request(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("selftest: {e}");
                return Ok(1);
            }
        };
        let index = request.batch_index();
        let inputs: Vec<String> = match request {
            RequestLine::Batch { batch, .. } => batch,
            RequestLine::Offline { path, .. } => match std::fs::read_to_string(&path) {
                Ok(body) => body.lines().map(unescape_line).collect(),
                Err(e) => {
                    eprintln!("selftest: cannot read {}: {e}", path.display());
                    return Ok(1);
                }
            },
        };
        if let SelftestMode::Alloc { mib } = opts.mode {
            if resident.is_none() {
                resident = Some(touch(mib));
            }
        }
        let mut outputs: Vec<String> = inputs.iter().map(|i| transform(opts.mode, i)).collect();
        let mut reply_index = index;
        if let Some(fault) = opts.fault.filter(|_| n as u64 == opts.fault_at) {
            match fault {
                Fault::ShortOutput => {
                    outputs.pop();
                }
                Fault::BadIndex => reply_index += 7,
                Fault::Malformed => {
                    writeln!(output, "this is not a response")?;
                    output.flush()?;
                    continue;
                }
                Fault::Crash => {
                    eprintln!("selftest: injected crash at request {n}");
                    std::process::exit(70);
                }
                Fault::Hang => loop {
                    std::thread::sleep(Duration::from_secs(3600));
                },
            }
        }
        let mut delay = opts.extra_delay;
        if let SelftestMode::Delay { ms } = opts.mode {
            delay += Duration::from_millis(ms);
        }
        if !delay.is_zero() {
            wait_until(received + delay);
        }
        output.write_all(encode_response(&outputs, reply_index).as_bytes())?;
        output.flush()?;
    }
    if let Some(block) = resident {
        // Keep the allocation observable until shutdown.
        std::hint::black_box(&block);
    }
    Ok(0)
}
