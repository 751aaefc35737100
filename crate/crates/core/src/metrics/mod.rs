//! Turns a finished run into throughput, latency, accuracy and radar
//! summaries.

mod bleu;
mod latency;
mod radar;

pub use bleu::{bleu_stats, corpus_bleu, BleuStats, MAX_NGRAM};
pub use latency::{latency_stats, nearest_rank, LatencyStats};
pub use radar::{radar_normalize, RadarAxis, RadarChart};

use serde::{Deserialize, Serialize};

use crate::runner::RunRecord;
use crate::text::count_words;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("run spans zero seconds")]
    ZeroDuration,
    #[error("run recorded no batches")]
    NoBatches,
    #[error("{hypotheses} hypotheses but {references} reference sets")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("no hypotheses to score")]
    EmptyHypothesisSet,
    #[error("instance {0} has no reference")]
    MissingReference(usize),
    #[error("reports cover different scenarios: {0}")]
    IncompatibleScenarios(String),
    #[error("no reports given")]
    NoReports,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub inst_s: f64,
    pub words_s: f64,
}

/// Which text the words/s figure counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordBasis {
    #[default]
    Output,
    Input,
}

/// Instances and words per second between the first dispatch and the last
/// response. Words are whitespace-delimited tokens of the model outputs.
pub fn throughput(record: &RunRecord) -> Result<Throughput, MetricsError> {
    let words = record
        .batches
        .iter()
        .flat_map(|b| &b.outputs)
        .map(|o| count_words(o))
        .sum();
    throughput_with_words(record, words)
}

/// Like [`throughput`] with an externally counted word total (for example
/// input words instead of output words).
pub fn throughput_with_words(record: &RunRecord, words: usize) -> Result<Throughput, MetricsError> {
    let span = record.measured_span().ok_or(MetricsError::NoBatches)?;
    if span <= 0.0 {
        return Err(MetricsError::ZeroDuration);
    }
    Ok(Throughput {
        inst_s: record.total_instances() as f64 / span,
        words_s: words as f64 / span,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMetric {
    Bleu,
    ExactMatch,
}

impl AccuracyMetric {
    pub fn score(self, hyps: &[String], refs: &[Vec<String>]) -> Result<f64, MetricsError> {
        match self {
            AccuracyMetric::Bleu => corpus_bleu(hyps, refs),
            AccuracyMetric::ExactMatch => exact_match(hyps, refs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub metric: AccuracyMetric,
    pub value: f64,
}

/// Fraction of hypotheses equal to any of their references after trimming
/// surrounding whitespace.
pub fn exact_match(hyps: &[String], refs: &[Vec<String>]) -> Result<f64, MetricsError> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            hypotheses: hyps.len(),
            references: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricsError::EmptyHypothesisSet);
    }
    let hits = hyps
        .iter()
        .zip(refs)
        .filter(|(h, rs)| rs.iter().any(|r| r.trim() == h.trim()))
        .count();
    Ok(hits as f64 / hyps.len() as f64)
}
