use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::report::MetricsReport;
use crate::scenario::{scenario_metrics, Metric, ScenarioKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarAxis {
    pub name: String,
    pub higher_is_better: bool,
    pub raw: Vec<Option<f64>>,
    /// In [0, 1]; 1.0 marks the best model on this axis.
    pub normalized: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarChart {
    pub scenario: ScenarioKind,
    pub models: Vec<String>,
    pub axes: Vec<RadarAxis>,
}

fn normalize(raw: &[Option<f64>], higher_is_better: bool) -> Vec<Option<f64>> {
    let present = raw.iter().flatten().copied();
    if higher_is_better {
        let max = present.fold(f64::NEG_INFINITY, f64::max);
        raw.iter()
            .map(|v| v.map(|x| if max > 0.0 { x / max } else { 1.0 }))
            .collect()
    } else {
        let min = present.fold(f64::INFINITY, f64::min);
        raw.iter()
            .map(|v| v.map(|x| if x > 0.0 { min / x } else { 1.0 }))
            .collect()
    }
}

/// Maps each applicable metric onto [0, 1] with outer = better: `x / max` for
/// throughput and accuracy, `min / x` for latency (p50), memory, energy and
/// parameter count, the latter on a log10 scale.
pub fn radar_normalize(reports: &[MetricsReport]) -> Result<RadarChart, MetricsError> {
    let first = reports.first().ok_or(MetricsError::NoReports)?;
    let scenario = first.scenario;
    if let Some(other) = reports.iter().find(|r| r.scenario != scenario) {
        return Err(MetricsError::IncompatibleScenarios(format!(
            "{} vs {}",
            scenario, other.scenario
        )));
    }
    let metrics = scenario_metrics(scenario);
    let column = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Vec<Option<f64>> {
        reports.iter().map(f).collect()
    };

    let mut axes = Vec::new();
    let mut push = |name: &str, higher: bool, raw: Vec<Option<f64>>| {
        let normalized = normalize(&raw, higher);
        axes.push(RadarAxis {
            name: name.into(),
            higher_is_better: higher,
            raw,
            normalized,
        });
    };
    if metrics.contains(&Metric::Accuracy) {
        push("accuracy", true, column(&|r| r.accuracy.as_ref().map(|a| a.value)));
    }
    if metrics.contains(&Metric::Throughput) {
        push("throughput_inst_s", true, column(&|r| r.throughput_inst_s));
    }
    if metrics.contains(&Metric::Latency) {
        push("latency_p50_ms", false, column(&|r| r.latency.map(|l| l.p50_ms)));
    }
    push("peak_mem_gib", false, column(&|r| r.peak_mem_gib));
    push("energy_wh", false, column(&|r| r.energy_wh));
    push(
        "params_log10",
        false,
        column(&|r| Some((r.params.max(1) as f64).log10())),
    );

    Ok(RadarChart {
        scenario,
        models: reports.iter().map(|r| r.model.clone()).collect(),
        axes,
    })
}
