//! Line-oriented JSON wire format spoken between the harness and a
//! model-under-test over its standard input and output.
//!
//! ```text
//! harness -> model   {"batch":["...", ...],"i":<n>}      online request
//! harness -> model   {"file":"<path>","i":0}             offline request
//! model   -> harness {"ready":true,"params":<n>,"name":"..."}   once, first
//! model   -> harness {"outputs":["...", ...],"i":<n>}    one per request
//! ```
//!
//! Every message is a single UTF-8 JSON object terminated by `\n`. JSON string
//! escaping guarantees that payload newlines never break framing.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Longest slice of an offending line quoted back in diagnostics.
const DIAGNOSTIC_SNIPPET: usize = 160;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("malformed protocol line ({reason}): {line}")]
    MalformedLine { line: String, reason: String },
    #[error("expected {expected} outputs, model returned {got}: {line}")]
    LengthMismatch {
        line: String,
        expected: usize,
        got: usize,
    },
    #[error("expected batch index {expected}, model answered {got}: {line}")]
    IndexMismatch {
        line: String,
        expected: u64,
        got: u64,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

fn snippet(line: &str) -> String {
    let trimmed = line.trim_end_matches(['\n', '\r']);
    if trimmed.chars().count() <= DIAGNOSTIC_SNIPPET {
        trimmed.to_string()
    } else {
        let mut s: String = trimmed.chars().take(DIAGNOSTIC_SNIPPET).collect();
        s.push_str("...");
        s
    }
}

fn malformed(line: &str, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::MalformedLine {
        line: snippet(line),
        reason: reason.into(),
    }
}

/// A request as seen by the model side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestLine {
    Batch { batch: Vec<String>, batch_index: u64 },
    Offline { path: PathBuf, batch_index: u64 },
}

impl RequestLine {
    pub fn batch_index(&self) -> u64 {
        match self {
            RequestLine::Batch { batch_index, .. } | RequestLine::Offline { batch_index, .. } => {
                *batch_index
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseLine {
    pub outputs: Vec<String>,
    pub batch_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadySignal {
    pub params: u64,
    pub model_name: String,
}

#[derive(Serialize)]
struct BatchWire<'a> {
    batch: &'a [String],
    i: u64,
}

#[derive(Serialize)]
struct FileWire<'a> {
    file: &'a str,
    i: u64,
}

#[derive(Serialize)]
struct ResponseWire<'a> {
    outputs: &'a [String],
    i: u64,
}

#[derive(Serialize)]
struct ReadyWire<'a> {
    ready: bool,
    params: u64,
    name: &'a str,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestIn {
    batch: Option<Vec<String>>,
    file: Option<String>,
    i: u64,
}

#[derive(Deserialize)]
struct ResponseIn {
    outputs: Vec<String>,
    i: u64,
}

fn to_line<T: Serialize>(msg: &T) -> String {
    // Serializing plain structs of strings and integers cannot fail.
    let mut s = serde_json::to_string(msg).expect("protocol message serializes");
    s.push('\n');
    s
}

/// Encodes an online request. Callers guarantee a non-empty batch.
pub fn encode_request(batch: &[String], batch_index: u64) -> String {
    debug_assert!(!batch.is_empty(), "empty batch");
    to_line(&BatchWire {
        batch,
        i: batch_index,
    })
}

/// Encodes the single offline request pointing the model at an instance file.
pub fn encode_offline_request(path: &str, batch_index: u64) -> String {
    to_line(&FileWire {
        file: path,
        i: batch_index,
    })
}

pub fn encode_response(outputs: &[String], batch_index: u64) -> String {
    to_line(&ResponseWire {
        outputs,
        i: batch_index,
    })
}

pub fn encode_ready(params: u64, model_name: &str) -> String {
    to_line(&ReadyWire {
        ready: true,
        params,
        name: model_name,
    })
}

pub fn decode_request(line: &str) -> Result<RequestLine, ProtocolError> {
    let raw: RequestIn =
        serde_json::from_str(line.trim_end()).map_err(|e| malformed(line, e.to_string()))?;
    match (raw.batch, raw.file) {
        (Some(batch), None) => {
            if batch.is_empty() {
                return Err(ProtocolError::InvalidRequest("empty batch".into()));
            }
            Ok(RequestLine::Batch {
                batch,
                batch_index: raw.i,
            })
        }
        (None, Some(file)) => Ok(RequestLine::Offline {
            path: PathBuf::from(file),
            batch_index: raw.i,
        }),
        _ => Err(ProtocolError::InvalidRequest(
            "exactly one of \"batch\" or \"file\" must be present".into(),
        )),
    }
}

/// Decodes one response line and checks it against the request it answers.
pub fn decode_response(
    line: &str,
    expected_len: usize,
    expected_index: u64,
) -> Result<ResponseLine, ProtocolError> {
    let trimmed = line.trim_end();
    if trimmed.is_empty() {
        return Err(ProtocolError::LengthMismatch {
            line: String::new(),
            expected: expected_len,
            got: 0,
        });
    }
    let raw: ResponseIn =
        serde_json::from_str(trimmed).map_err(|e| malformed(line, e.to_string()))?;
    if raw.i != expected_index {
        return Err(ProtocolError::IndexMismatch {
            line: snippet(line),
            expected: expected_index,
            got: raw.i,
        });
    }
    if raw.outputs.len() != expected_len {
        return Err(ProtocolError::LengthMismatch {
            line: snippet(line),
            expected: expected_len,
            got: raw.outputs.len(),
        });
    }
    Ok(ResponseLine {
        outputs: raw.outputs,
        batch_index: raw.i,
    })
}

/// Inspects a startup line. Anything that is not a ready message is model
/// chatter and yields `Ok(None)`; a line claiming `"ready":true` with a bad
/// payload is a protocol error.
pub fn parse_ready(line: &str) -> Result<Option<ReadySignal>, ProtocolError> {
    let value: serde_json::Value = match serde_json::from_str(line.trim_end()) {
        Ok(v) => v,
        Err(_) => return Ok(None),
    };
    let Some(obj) = value.as_object() else {
        return Ok(None);
    };
    if obj.get("ready").and_then(|r| r.as_bool()) != Some(true) {
        return Ok(None);
    }
    let params = obj
        .get("params")
        .and_then(|p| p.as_u64())
        .ok_or_else(|| malformed(line, "ready message needs a non-negative integer \"params\""))?;
    let model_name = obj
        .get("name")
        .and_then(|n| n.as_str())
        .ok_or_else(|| malformed(line, "ready message needs a string \"name\""))?
        .to_string();
    Ok(Some(ReadySignal { params, model_name }))
}

/// Reassembles complete lines from arbitrarily chunked bytes.
#[derive(Debug, Default)]
pub struct LineDecoder {
    pending: Vec<u8>,
}

impl LineDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds a chunk and returns every line it completes, without the
    /// trailing newline.
    pub fn push(&mut self, chunk: &[u8]) -> Vec<String> {
        let mut lines = Vec::new();
        for &b in chunk {
            if b == b'\n' {
                let raw = std::mem::take(&mut self.pending);
                lines.push(String::from_utf8_lossy(&raw).into_owned());
            } else {
                self.pending.push(b);
            }
        }
        lines
    }

    /// Bytes of an unterminated trailing line, if any.
    pub fn remainder(&self) -> &[u8] {
        &self.pending
    }
}

/// Enforces that batch indices arrive as 0, 1, 2, ...
#[derive(Debug, Default)]
pub struct IndexSequence {
    next: u64,
}

impl IndexSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn expect(&self) -> u64 {
        self.next
    }

    pub fn accept(&mut self, index: u64) -> Result<(), ProtocolError> {
        if index != self.next {
            return Err(ProtocolError::IndexMismatch {
                line: String::new(),
                expected: self.next,
                got: index,
            });
        }
        self.next += 1;
        Ok(())
    }
}
