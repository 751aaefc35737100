use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::runner::RunRecord;

/// Per-batch latency summary in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    pub n: usize,
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value.
/// `sorted` must be ascending and non-empty; `percent` in 1..=100.
pub fn nearest_rank(sorted: &[f64], percent: u32) -> f64 {
    assert!(!sorted.is_empty() && (1..=100).contains(&percent));
    let n = sorted.len();
    let rank = (percent as usize * n).div_ceil(100).max(1);
    sorted[rank - 1]
}

impl LatencyStats {
    pub fn from_millis(values: &[f64]) -> Result<Self, MetricsError> {
        if values.is_empty() {
            return Err(MetricsError::NoBatches);
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        let max = *sorted.last().expect("non-empty");
        Ok(Self {
            // Summation rounding must not push the mean past the maximum.
            mean_ms: mean.min(max),
            p50_ms: nearest_rank(&sorted, 50),
            p90_ms: nearest_rank(&sorted, 90),
            p99_ms: nearest_rank(&sorted, 99),
            max_ms: max,
            n: sorted.len(),
        })
    }
}

/// Latency of every batch, `response_ts - dispatch_ts`, counted once per batch.
pub fn latency_stats(record: &RunRecord) -> Result<LatencyStats, MetricsError> {
    let ms: Vec<f64> = record
        .batches
        .iter()
        .map(|b| (b.response_ts - b.dispatch_ts) * 1e3)
        .collect();
    LatencyStats::from_millis(&ms)
}
