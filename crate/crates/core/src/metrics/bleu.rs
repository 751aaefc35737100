//! Corpus BLEU over [`bleu_tokens`](crate::text::bleu_tokens).
//!
//! Modified n-gram precisions for n = 1..=4 are pooled over the corpus and
//! combined by geometric mean. When a higher-order (n >= 2) precision has no
//! matches it is smoothed to `1 / (total + 1)`; a zero unigram precision
//! yields 0. The brevity penalty is `exp(1 - r/c)` when `c <= r`, with `r`
//! the sum over sentences of the reference length closest to the hypothesis
//! length (shorter wins ties).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::text::bleu_tokens;

pub const MAX_NGRAM: usize = 4;

/// Sufficient statistics for corpus BLEU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [u64; MAX_NGRAM],
    pub totals: [u64; MAX_NGRAM],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn precision(&self, order: usize) -> f64 {
        let (m, t) = (self.matches[order - 1], self.totals[order - 1]);
        if order >= 2 && m == 0 {
            1.0 / (t as f64 + 1.0)
        } else if t == 0 {
            0.0
        } else {
            m as f64 / t as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len <= self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }

    /// Score in [0, 100].
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let log_sum: f64 = (1..=MAX_NGRAM).map(|n| self.precision(n).ln()).sum();
        100.0 * self.brevity_penalty() * (log_sum / MAX_NGRAM as f64).exp()
    }
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], u64> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

pub fn bleu_stats(hyps: &[String], refs: &[Vec<String>]) -> Result<BleuStats, MetricsError> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            hypotheses: hyps.len(),
            references: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricsError::EmptyHypothesisSet);
    }
    let mut stats = BleuStats::default();
    for (idx, (hyp, ref_set)) in hyps.iter().zip(refs).enumerate() {
        if ref_set.is_empty() {
            return Err(MetricsError::MissingReference(idx));
        }
        let h = bleu_tokens(hyp);
        let rs: Vec<Vec<&str>> = ref_set.iter().map(|r| bleu_tokens(r)).collect();

        stats.hyp_len += h.len() as u64;
        let closest = rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&len| (len.abs_diff(h.len()), len))
            .expect("non-empty reference set");
        stats.ref_len += closest as u64;

        for n in 1..=MAX_NGRAM {
            if h.len() < n {
                continue;
            }
            stats.totals[n - 1] += (h.len() - n + 1) as u64;
            let mut max_ref: HashMap<&[&str], u64> = HashMap::new();
            for r in &rs {
                for (gram, c) in ngram_counts(r, n) {
                    let slot = max_ref.entry(gram).or_insert(0);
                    *slot = (*slot).max(c);
                }
            }
            stats.matches[n - 1] += ngram_counts(&h, n)
                .into_iter()
                .map(|(gram, c)| c.min(max_ref.get(gram).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }
    Ok(stats)
}

pub fn corpus_bleu(hyps: &[String], refs: &[Vec<String>]) -> Result<f64, MetricsError> {
    Ok(bleu_stats(hyps, refs)?.score())
}
