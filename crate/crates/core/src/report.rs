//! The per-run report artifact and its assembly from a finished run.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metering::EnergyReport;
use crate::metrics::{
    latency_stats, throughput, throughput_with_words, Accuracy, LatencyStats, MetricsError,
    WordBasis,
};
use crate::runner::RunRecord;
use crate::scenario::{scenario_metrics, Metric, ScenarioKind};

pub const HARNESS_VERSION: &str = env!("CARGO_PKG_VERSION");
const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub harness_version: String,
    pub seed: u64,
    pub idle_watts: Option<f64>,
    pub intensity_g_per_kwh: f64,
    pub meter: String,
    pub meter_error_frac: f64,
    /// Wall clock, RFC 3339, recorded once when the scenario started.
    pub started_at: String,
    pub finished_at: String,
    /// Monotonic seconds of the ready signal, first dispatch and last
    /// response (process-local timebase).
    pub ready_at_s: f64,
    pub first_dispatch_s: f64,
    pub last_response_s: f64,
    #[serde(default)]
    pub word_basis: WordBasis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub header: ReportHeader,
    pub model: String,
    pub scenario: ScenarioKind,
    pub throughput_inst_s: Option<f64>,
    pub throughput_words_s: Option<f64>,
    pub latency: Option<LatencyStats>,
    pub peak_mem_gib: Option<f64>,
    pub gpu_mem_gib: Option<f64>,
    pub energy_wh: Option<f64>,
    pub co2_g: Option<f64>,
    pub params: u64,
    pub accuracy: Option<Accuracy>,
    /// Applicable metrics that could not be measured (no meter configured,
    /// unsupported platform); these are null rather than zero.
    pub unavailable: Vec<Metric>,
    pub total_instances: usize,
    pub num_batches: usize,
    pub plan_digest: String,
    pub outputs_digest: String,
}

impl MetricsReport {
    /// Metrics that carry a value in this report.
    pub fn present_metrics(&self) -> BTreeSet<Metric> {
        let mut out = BTreeSet::new();
        if self.accuracy.is_some() {
            out.insert(Metric::Accuracy);
        }
        if self.throughput_inst_s.is_some() && self.throughput_words_s.is_some() {
            out.insert(Metric::Throughput);
        }
        if self.latency.is_some() {
            out.insert(Metric::Latency);
        }
        if self.peak_mem_gib.is_some() {
            out.insert(Metric::Memory);
        }
        if self.energy_wh.is_some() && self.co2_g.is_some() {
            out.insert(Metric::Energy);
        }
        out
    }

    /// True when exactly the scenario's metrics are present, minus the ones
    /// declared unavailable.
    pub fn conforms(&self) -> bool {
        let unavailable: BTreeSet<Metric> = self.unavailable.iter().copied().collect();
        let expected: BTreeSet<Metric> = scenario_metrics(self.scenario)
            .difference(&unavailable)
            .copied()
            .collect();
        self.present_metrics() == expected
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let body = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&body)?)
    }
}

/// SHA-256 over the outputs in dispatch order.
pub fn outputs_digest(record: &RunRecord) -> String {
    let mut h = Sha256::new();
    for out in record.batches.iter().flat_map(|b| &b.outputs) {
        h.update((out.len() as u64).to_le_bytes());
        h.update(out.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Everything measured for one run besides the record itself.
pub struct RunMeasurements {
    pub model: String,
    pub scenario: ScenarioKind,
    pub params: u64,
    pub energy: Option<EnergyReport>,
    pub peak_rss_bytes: Option<u64>,
    pub accuracy: Option<Accuracy>,
    pub plan_digest: String,
    /// Input word total when words/s counts inputs; `None` counts outputs.
    pub input_words: Option<usize>,
}

/// Builds a report containing exactly the metrics the scenario calls for.
pub fn assemble_report(
    header: ReportHeader,
    record: &RunRecord,
    m: RunMeasurements,
) -> Result<MetricsReport, MetricsError> {
    let wanted = scenario_metrics(m.scenario);
    let mut unavailable = Vec::new();

    let (mut tp_inst, mut tp_words) = (None, None);
    if wanted.contains(&Metric::Throughput) {
        let tp = match m.input_words {
            Some(words) => throughput_with_words(record, words)?,
            None => throughput(record)?,
        };
        tp_inst = Some(tp.inst_s);
        tp_words = Some(tp.words_s);
    }
    let latency = if wanted.contains(&Metric::Latency) {
        Some(latency_stats(record)?)
    } else {
        None
    };
    let peak_mem_gib = m.peak_rss_bytes.map(|b| b as f64 / GIB);
    if peak_mem_gib.is_none() {
        unavailable.push(Metric::Memory);
    }
    let (energy_wh, co2_g) = match m.energy {
        Some(e) => (Some(e.energy_wh), Some(e.co2_g)),
        None => {
            unavailable.push(Metric::Energy);
            (None, None)
        }
    };
    let accuracy = if wanted.contains(&Metric::Accuracy) {
        if m.accuracy.is_none() {
            unavailable.push(Metric::Accuracy);
        }
        m.accuracy
    } else {
        None
    };

    Ok(MetricsReport {
        header,
        model: m.model,
        scenario: m.scenario,
        throughput_inst_s: tp_inst,
        throughput_words_s: tp_words,
        latency,
        peak_mem_gib,
        gpu_mem_gib: None,
        energy_wh,
        co2_g,
        params: m.params,
        accuracy,
        unavailable,
        total_instances: record.total_instances(),
        num_batches: record.batches.len(),
        plan_digest: m.plan_digest,
        outputs_digest: outputs_digest(record),
    })
}
