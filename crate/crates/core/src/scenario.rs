//! Seed-deterministic batch plans for the four serving scenarios.
//!
//! | scenario       | instances                         | batch size              |
//! |----------------|-----------------------------------|-------------------------|
//! | fixed          | whole test set, shuffled          | user specified          |
//! | poisson        | drawn with replacement            | i.i.d. Pois(mean), > 0  |
//! | single stream  | drawn without replacement         | 1                       |
//! | offline        | training split, length matched    | one file request        |
//!
//! Online plans keep the sampled order; the harness never reorders them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::PlanRng;
use crate::text::{count_words, escape_line};

/// Above this mean the Poisson sampler switches from Knuth's product of
/// uniforms to a rounded normal approximation.
pub const KNUTH_POISSON_MAX_MEAN: f64 = 30.0;
pub const LENGTH_MATCH_TOLERANCE: f64 = 0.02;
pub const LENGTH_MATCH_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub input: String,
    #[serde(default)]
    pub references: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("requested {requested} instances but the dataset has only {available}")]
    CountExceedsDataset { requested: usize, available: usize },
    #[error("invalid scenario configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "could not match target mean length {target:.3}: best sample mean {best_mean:.3} \
         after {attempts} attempts and swap repair"
    )]
    LengthMatchFailure {
        target: f64,
        best_mean: f64,
        attempts: usize,
    },
    #[error("dataset {path}: {reason}")]
    Dataset { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Fixed,
    Poisson,
    SingleStream,
    Offline,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Fixed,
        ScenarioKind::Poisson,
        ScenarioKind::SingleStream,
        ScenarioKind::Offline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Fixed => "fixed",
            ScenarioKind::Poisson => "poisson",
            ScenarioKind::SingleStream => "single_stream",
            ScenarioKind::Offline => "offline",
        }
    }

    pub fn is_online(self) -> bool {
        self != ScenarioKind::Offline
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ScenarioError::InvalidConfig(format!("unknown scenario {s:?}")))
    }
}

/// The efficiency and quality metrics a scenario reports (#params is
/// reported everywhere and is not part of the set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Throughput,
    Latency,
    Memory,
    Energy,
}

pub fn scenario_metrics(kind: ScenarioKind) -> BTreeSet<Metric> {
    use Metric::*;
    let metrics: &[Metric] = match kind {
        ScenarioKind::Fixed => &[Accuracy, Throughput, Latency, Memory, Energy],
        ScenarioKind::Poisson => &[Throughput, Latency, Memory, Energy],
        ScenarioKind::SingleStream => &[Latency, Memory, Energy],
        ScenarioKind::Offline => &[Throughput, Memory, Energy],
    };
    metrics.iter().copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub poisson_mean: Option<f64>,
    /// Defaults to the whole dataset for fixed batching; required elsewhere.
    #[serde(default)]
    pub instance_count: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        Self {
            kind,
            batch_size: None,
            poisson_mean: None,
            instance_count: None,
            seed,
        }
    }

    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.batch_size = Some(n);
        self
    }

    pub fn with_poisson_mean(mut self, mean: f64) -> Self {
        self.poisson_mean = Some(mean);
        self
    }

    pub fn with_instance_count(mut self, n: usize) -> Self {
        self.instance_count = Some(n);
        self
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidConfig(format!("{}: {m}", self.kind)));
        if self.instance_count == Some(0) {
            return bad("instance_count must be positive");
        }
        match self.kind {
            ScenarioKind::Fixed | ScenarioKind::Offline => match self.batch_size {
                Some(0) => return bad("batch_size must be positive"),
                None if self.kind == ScenarioKind::Fixed => return bad("batch_size is required"),
                _ => {}
            },
            ScenarioKind::Poisson => match self.poisson_mean {
                Some(m) if m > 0.0 && m.is_finite() => {}
                _ => return bad("poisson_mean must be a positive number"),
            },
            ScenarioKind::SingleStream => {}
        }
        if self.kind != ScenarioKind::Fixed && self.instance_count.is_none() {
            return bad("instance_count is required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchPlan {
    pub scenario: ScenarioConfig,
    pub batches: Vec<Vec<Instance>>,
    pub total_instances: usize,
}

impl BatchPlan {
    fn from_batches(scenario: ScenarioConfig, batches: Vec<Vec<Instance>>) -> Self {
        let total_instances = batches.iter().map(Vec::len).sum();
        Self {
            scenario,
            batches,
            total_instances,
        }
    }

    pub fn batch_sizes(&self) -> Vec<usize> {
        self.batches.iter().map(Vec::len).collect()
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.batches.iter().flatten()
    }

    /// SHA-256 over instance ids and batch boundaries, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.scenario.kind.as_str().as_bytes());
        for batch in &self.batches {
            h.update(b"[");
            for inst in batch {
                h.update((inst.id.len() as u64).to_le_bytes());
                h.update(inst.id.as_bytes());
            }
            h.update(b"]");
        }
        hex::encode(h.finalize())
    }
}

/// Reads a JSONL dataset of `{"id":...,"input":...,"references":[...]}`.
pub fn load_dataset(path: &Path) -> Result<Vec<Instance>, ScenarioError> {
    let err = |reason: String| ScenarioError::Dataset {
        path: path.display().to_string(),
        reason,
    };
    let file = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance =
            serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", n + 1)))?;
        if !ids.insert(inst.id.clone()) {
            return Err(err(format!("line {}: duplicate id {:?}", n + 1, inst.id)));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, data: &[Instance]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in data {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Whitespace-token length of an instance input.
pub fn instance_length(inst: &Instance) -> usize {
    count_words(&inst.input)
}

pub fn mean_length(data: &[Instance]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter().map(instance_length).sum::<usize>() as f64 / data.len() as f64
}

fn require_kind(cfg: &ScenarioConfig, kind: ScenarioKind) -> Result<(), ScenarioError> {
    if cfg.kind != kind {
        return Err(ScenarioError::InvalidConfig(format!(
            "expected a {kind} configuration, got {}",
            cfg.kind
        )));
    }
    cfg.validate()
}

/// Draws `count` distinct indices from `0..n` via a partial Fisher-Yates.
fn sample_without_replacement(rng: &mut PlanRng, n: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + rng.below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

pub fn plan_fixed(data: &[Instance], cfg: &ScenarioConfig) -> Result<BatchPlan, ScenarioError> {
    require_kind(cfg, ScenarioKind::Fixed)?;
    if data.is_empty() {
        return Err(ScenarioError::EmptyDataset);
    }
    let count = cfg.instance_count.unwrap_or(data.len());
    if count > data.len() {
        return Err(ScenarioError::CountExceedsDataset {
            requested: count,
            available: data.len(),
        });
    }
    let batch_size = cfg.batch_size.expect("validated");
    let mut rng = PlanRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    order.truncate(count);
    let batches = order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| data[i].clone()).collect())
        .collect();
    Ok(BatchPlan::from_batches(cfg.clone(), batches))
}

/// One draw from Pois(mean).
pub fn sample_poisson(rng: &mut PlanRng, mean: f64) -> u64 {
    if mean <= KNUTH_POISSON_MAX_MEAN {
        let limit = (-mean).exp();
        let mut k = 0u64;
        let mut p = rng.next_f64();
        while p > limit {
            k += 1;
            p *= rng.next_f64();
        }
        k
    } else {
        loop {
            let x = (mean + mean.sqrt() * rng.standard_normal()).round();
            if x >= 0.0 {
                return x as u64;
            }
        }
    }
}

/// Draws a strictly positive batch size, redrawing zeros.
pub fn sample_batch_size(rng: &mut PlanRng, mean: f64) -> usize {
    loop {
        let k = sample_poisson(rng, mean);
        if k > 0 {
            return k as usize;
        }
    }
}

pub fn plan_poisson(data: &[Instance], cfg: &ScenarioConfig) -> Result<BatchPlan, ScenarioError> {
    require_kind(cfg, ScenarioKind::Poisson)?;
    if data.is_empty() {
        return Err(ScenarioError::EmptyDataset);
    }
    let count = cfg.instance_count.expect("validated");
    let mean = cfg.poisson_mean.expect("validated");
    let mut rng = PlanRng::new(cfg.seed);
    // Batch sizes come first on the stream so they depend only on the seed,
    // not on the dataset size.
    let mut sizes = Vec::new();
    let mut remaining = count;
    while remaining > 0 {
        let size = sample_batch_size(&mut rng, mean).min(remaining);
        sizes.push(size);
        remaining -= size;
    }
    let n = data.len() as u64;
    let batches = sizes
        .iter()
        .map(|&size| {
            (0..size)
                .map(|_| data[rng.below(n) as usize].clone())
                .collect()
        })
        .collect();
    Ok(BatchPlan::from_batches(cfg.clone(), batches))
}

pub fn plan_single_stream(
    data: &[Instance],
    cfg: &ScenarioConfig,
) -> Result<BatchPlan, ScenarioError> {
    require_kind(cfg, ScenarioKind::SingleStream)?;
    let count = cfg.instance_count.expect("validated");
    if count > data.len() {
        return Err(ScenarioError::CountExceedsDataset {
            requested: count,
            available: data.len(),
        });
    }
    let mut rng = PlanRng::new(cfg.seed);
    let batches = sample_without_replacement(&mut rng, data.len(), count)
        .into_iter()
        .map(|i| vec![data[i].clone()])
        .collect();
    Ok(BatchPlan::from_batches(cfg.clone(), batches))
}

/// Length-matched offline sample plus the bookkeeping of how it was found.
#[derive(Debug, Clone)]
pub struct OfflineJob {
    pub plan: BatchPlan,
    pub target_avg_len: f64,
    pub sample_avg_len: f64,
    pub attempts: usize,
    pub repaired: bool,
}

impl OfflineJob {
    pub fn instances(&self) -> &[Instance] {
        &self.plan.batches[0]
    }

    /// Writes one escaped input per line, in sampled order. Output `i` of the
    /// model's response must correspond to line `i`.
    pub fn write_instance_file(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for inst in self.instances() {
            w.write_all(escape_line(&inst.input).as_bytes())?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}

fn within_tolerance(sum: usize, n: usize, target: f64) -> bool {
    ((sum as f64 / n as f64) - target).abs() / target <= LENGTH_MATCH_TOLERANCE
}

/// Greedy swap repair: repeatedly swap the selected instance furthest in the
/// direction of the error for the unselected one that brings the total
/// closest to target. Stops when no swap improves, so the result usually
/// lands well inside the tolerance rather than on its edge.
fn repair_selection(
    lengths: &[usize],
    pool: &[usize],
    selected: &mut [usize],
    target: f64,
) -> usize {
    let n = selected.len();
    let goal = target * n as f64;
    let chosen: HashSet<usize> = selected.iter().copied().collect();
    let mut spare: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &p in pool.iter().filter(|p| !chosen.contains(p)) {
        spare.entry(lengths[p]).or_default().push(p);
    }
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (slot, &p) in selected.iter().enumerate() {
        by_len.entry(lengths[p]).or_default().push(slot);
    }
    let mut sum: usize = selected.iter().map(|&p| lengths[p]).sum();

    for _ in 0..n {
        let err = sum as f64 - goal;
        let out_len = if err > 0.0 {
            *by_len.keys().next_back().expect("non-empty")
        } else {
            *by_len.keys().next().expect("non-empty")
        };
        let ideal = out_len as f64 - err;
        let candidate = if err > 0.0 {
            spare
                .range(..out_len)
                .map(|(&l, _)| l)
                .min_by(|a, b| (*a as f64 - ideal).abs().total_cmp(&(*b as f64 - ideal).abs()))
        } else {
            spare
                .range(out_len + 1..)
                .map(|(&l, _)| l)
                .min_by(|a, b| (*a as f64 - ideal).abs().total_cmp(&(*b as f64 - ideal).abs()))
        };
        let Some(in_len) = candidate else { break };
        let new_sum = sum + in_len - out_len;
        if (new_sum as f64 - goal).abs() >= err.abs() {
            break;
        }
        let slot = pop_entry(&mut by_len, out_len);
        let incoming = pop_entry(&mut spare, in_len);
        let outgoing = selected[slot];
        selected[slot] = incoming;
        by_len.entry(in_len).or_default().push(slot);
        spare.entry(out_len).or_default().push(outgoing);
        sum = new_sum;
    }
    sum
}

fn pop_entry(map: &mut BTreeMap<usize, Vec<usize>>, key: usize) -> usize {
    let bucket = map.get_mut(&key).expect("key present");
    let v = bucket.pop().expect("bucket non-empty");
    if bucket.is_empty() {
        map.remove(&key);
    }
    v
}

/// Samples `instance_count` training instances whose mean whitespace length
/// lies within 2% of `target_avg_len`. Training instances whose input text
/// also appears in `test_data` are never eligible.
pub fn plan_offline(
    train_data: &[Instance],
    test_data: Option<&[Instance]>,
    target_avg_len: f64,
    cfg: &ScenarioConfig,
) -> Result<OfflineJob, ScenarioError> {
    require_kind(cfg, ScenarioKind::Offline)?;
    if !(target_avg_len > 0.0 && target_avg_len.is_finite()) {
        return Err(ScenarioError::InvalidConfig(format!(
            "offline: target mean length must be positive, got {target_avg_len}"
        )));
    }
    let test_inputs: HashSet<&str> = test_data
        .unwrap_or_default()
        .iter()
        .map(|i| i.input.as_str())
        .collect();
    let pool: Vec<usize> = (0..train_data.len())
        .filter(|&i| !test_inputs.contains(train_data[i].input.as_str()))
        .collect();
    if pool.is_empty() {
        return Err(ScenarioError::EmptyDataset);
    }
    let count = cfg.instance_count.expect("validated");
    if count > pool.len() {
        return Err(ScenarioError::CountExceedsDataset {
            requested: count,
            available: pool.len(),
        });
    }
    let lengths: Vec<usize> = train_data.iter().map(instance_length).collect();
    let mut rng = PlanRng::new(cfg.seed);

    // Partial Fisher-Yates over a permutation that persists across attempts;
    // any starting permutation yields a uniform sample.
    let mut perm = pool.clone();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut attempts = 0;
    let mut found = false;
    while attempts < LENGTH_MATCH_ATTEMPTS {
        attempts += 1;
        for i in 0..count {
            let j = i + rng.below((perm.len() - i) as u64) as usize;
            perm.swap(i, j);
        }
        let picked = &perm[..count];
        let sum: usize = picked.iter().map(|&p| lengths[p]).sum();
        let err = (sum as f64 / count as f64 - target_avg_len).abs();
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, picked.to_vec()));
        }
        if within_tolerance(sum, count, target_avg_len) {
            found = true;
            break;
        }
    }
    let (_, mut selected) = best.expect("at least one attempt");
    let mut repaired = false;
    if !found {
        let sum = repair_selection(&lengths, &pool, &mut selected, target_avg_len);
        repaired = true;
        if !within_tolerance(sum, count, target_avg_len) {
            return Err(ScenarioError::LengthMatchFailure {
                target: target_avg_len,
                best_mean: sum as f64 / count as f64,
                attempts,
            });
        }
    }
    let batch: Vec<Instance> = selected.iter().map(|&p| train_data[p].clone()).collect();
    let plan = BatchPlan::from_batches(cfg.clone(), vec![batch]);
    let sample_avg_len = mean_length(&plan.batches[0]);
    Ok(OfflineJob {
        plan,
        target_avg_len,
        sample_avg_len,
        attempts,
        repaired,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dataset(n: usize) -> Vec<Instance> {
        (0..n)
            .map(|i| Instance {
                id: format!("t{i}"),
                input: format!("sentence number {i}"),
                references: vec![],
            })
            .collect()
    }

    fn with_lengths(lengths: &[usize], prefix: &str) -> Vec<Instance> {
        lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| Instance {
                id: format!("{prefix}{i}"),
                input: (0..l).map(|k| format!("w{i}_{k}")).collect::<Vec<_>>().join(" "),
                references: vec![],
            })
            .collect()
    }

    #[test]
    fn fixed_grouping() {
        let cfg = ScenarioConfig::new(ScenarioKind::Fixed, 9).with_batch_size(4);
        let plan = plan_fixed(&dataset(10), &cfg).unwrap();
        assert_eq!(plan.batch_sizes(), vec![4, 4, 2]);
        assert_eq!(plan.total_instances, 10);
        let mut ids: Vec<_> = plan.instances().map(|i| i.id.clone()).collect();
        ids.sort();
        let mut expect: Vec<_> = dataset(10).into_iter().map(|i| i.id).collect();
        expect.sort();
        assert_eq!(ids, expect);
    }

    #[test]
    fn fixed_full_test_set_size() {
        let cfg = ScenarioConfig::new(ScenarioKind::Fixed, 1).with_batch_size(32);
        assert_eq!(plan_fixed(&dataset(3002), &cfg).unwrap().total_instances, 3002);
    }

    #[test]
    fn fixed_errors() {
        let cfg = ScenarioConfig::new(ScenarioKind::Fixed, 1).with_batch_size(4);
        assert!(matches!(plan_fixed(&[], &cfg), Err(ScenarioError::EmptyDataset)));
        let cfg = cfg.with_instance_count(11);
        assert!(matches!(
            plan_fixed(&dataset(10), &cfg),
            Err(ScenarioError::CountExceedsDataset { .. })
        ));
    }

    #[test]
    fn deterministic_plans() {
        let data = dataset(50);
        let cfg = ScenarioConfig::new(ScenarioKind::Fixed, 42).with_batch_size(8);
        let a = plan_fixed(&data, &cfg).unwrap();
        let b = plan_fixed(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = plan_fixed(&data, &ScenarioConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn poisson_conservation_and_determinism() {
        let data = dataset(100);
        let cfg = ScenarioConfig::new(ScenarioKind::Poisson, 5)
            .with_poisson_mean(16.0)
            .with_instance_count(4000);
        let a = plan_poisson(&data, &cfg).unwrap();
        assert_eq!(a.batch_sizes().iter().sum::<usize>(), 4000);
        assert!(a.batch_sizes().iter().all(|&s| s > 0));
        let b = plan_poisson(&data, &cfg).unwrap();
        assert_eq!(a, b);
        // Batch sizes depend only on the seed.
        let c = plan_poisson(&dataset(7), &cfg).unwrap();
        assert_eq!(a.batch_sizes(), c.batch_sizes());
    }

    #[test]
    fn poisson_needs_mean() {
        let cfg = ScenarioConfig::new(ScenarioKind::Poisson, 5).with_instance_count(10);
        assert!(matches!(
            plan_poisson(&dataset(3), &cfg),
            Err(ScenarioError::InvalidConfig(_))
        ));
        let cfg = cfg.with_poisson_mean(0.0);
        assert!(plan_poisson(&dataset(3), &cfg).is_err());
    }

    #[test]
    fn poisson_large_mean_branch() {
        let mut rng = PlanRng::new(3);
        let n = 20_000;
        let mean: f64 = (0..n).map(|_| sample_poisson(&mut rng, 100.0) as f64).sum::<f64>() / n as f64;
        assert!((mean - 100.0).abs() < 0.5, "{mean}");
    }

    #[test]
    fn tiny_mean_never_yields_zero_batches() {
        let cfg = ScenarioConfig::new(ScenarioKind::Poisson, 1)
            .with_poisson_mean(0.05)
            .with_instance_count(50);
        let plan = plan_poisson(&dataset(5), &cfg).unwrap();
        let sizes = plan.batch_sizes();
        assert!(sizes.iter().all(|&s| s >= 1));
        assert!(sizes.iter().filter(|&&s| s == 1).count() * 10 >= sizes.len() * 9);
    }

    #[test]
    fn single_stream_examples() {
        let data = dataset(2000);
        let cfg = ScenarioConfig::new(ScenarioKind::SingleStream, 3).with_instance_count(1000);
        let plan = plan_single_stream(&data, &cfg).unwrap();
        assert_eq!(plan.batches.len(), 1000);
        assert!(plan.batch_sizes().iter().all(|&s| s == 1));
        let distinct: HashSet<_> = plan.instances().map(|i| &i.id).collect();
        assert_eq!(distinct.len(), 1000);

        let one = plan_single_stream(&data, &cfg.clone().with_instance_count(1)).unwrap();
        assert_eq!(one.batch_sizes(), vec![1]);

        assert!(matches!(
            plan_single_stream(&dataset(3), &cfg),
            Err(ScenarioError::CountExceedsDataset { .. })
        ));
    }

    #[test]
    fn offline_zero_variance_first_attempt() {
        let train = with_lengths(&[7; 200], "tr");
        let cfg = ScenarioConfig::new(ScenarioKind::Offline, 1).with_instance_count(50);
        let job = plan_offline(&train, None, 7.0, &cfg).unwrap();
        assert_eq!(job.attempts, 1);
        assert!(!job.repaired);
        assert_eq!(job.sample_avg_len, 7.0);
        assert_eq!(job.plan.batches.len(), 1);
    }

    #[test]
    fn offline_repair_kicks_in() {
        // Pool mean is 10 but the target is 15: random draws of 100 cannot
        // get there, swapping in long instances can.
        let mut lengths = vec![5usize; 300];
        lengths.extend(vec![25usize; 60]);
        let train = with_lengths(&lengths, "tr");
        let cfg = ScenarioConfig::new(ScenarioKind::Offline, 4).with_instance_count(100);
        let job = plan_offline(&train, None, 15.0, &cfg).unwrap();
        assert!(job.repaired);
        assert_eq!(job.attempts, LENGTH_MATCH_ATTEMPTS);
        assert!((job.sample_avg_len - 15.0).abs() / 15.0 <= LENGTH_MATCH_TOLERANCE);
        let distinct: HashSet<_> = job.instances().iter().map(|i| &i.id).collect();
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn offline_unreachable_target_fails() {
        let train = with_lengths(&[3; 100], "tr");
        let cfg = ScenarioConfig::new(ScenarioKind::Offline, 4).with_instance_count(10);
        assert!(matches!(
            plan_offline(&train, None, 30.0, &cfg),
            Err(ScenarioError::LengthMatchFailure { .. })
        ));
    }

    #[test]
    fn offline_excludes_test_inputs() {
        let train = with_lengths(&[4; 40], "tr");
        let test: Vec<Instance> = train[..30]
            .iter()
            .map(|i| Instance {
                id: format!("te-{}", i.id),
                ..i.clone()
            })
            .collect();
        let cfg = ScenarioConfig::new(ScenarioKind::Offline, 4).with_instance_count(10);
        let job = plan_offline(&train, Some(&test), 4.0, &cfg).unwrap();
        let test_inputs: HashSet<_> = test.iter().map(|i| &i.input).collect();
        assert!(job.instances().iter().all(|i| !test_inputs.contains(&i.input)));
        let cfg = cfg.with_instance_count(11);
        assert!(matches!(
            plan_offline(&train, Some(&test), 4.0, &cfg),
            Err(ScenarioError::CountExceedsDataset { available: 10, .. })
        ));
    }

    #[test]
    fn offline_instance_file_has_one_line_per_instance() {
        let mut train = with_lengths(&[2; 20], "tr");
        train[0].input = "multi\nline".into();
        let cfg = ScenarioConfig::new(ScenarioKind::Offline, 0).with_instance_count(20);
        let job = plan_offline(&train, None, mean_length(&train), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("offline.txt");
        job.write_instance_file(&path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert_eq!(body.lines().count(), 20);
        assert!(body.contains("multi\\nline"));
    }

    #[test]
    fn metric_matrix() {
        use Metric::*;
        let ss = scenario_metrics(ScenarioKind::SingleStream);
        assert!(!ss.contains(&Throughput) && !ss.contains(&Accuracy));
        assert!(!scenario_metrics(ScenarioKind::Offline).contains(&Latency));
        assert_eq!(scenario_metrics(ScenarioKind::Fixed).len(), 5);
        assert_eq!(
            scenario_metrics(ScenarioKind::Poisson),
            [Throughput, Latency, Memory, Energy].into_iter().collect()
        );
    }

    #[test]
    fn dataset_io_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"input\":\"x\"}\n{\"id\":\"a\",\"input\":\"y\"}\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(&path), Err(ScenarioError::Dataset { .. })));
        let data = dataset(3);
        write_dataset(&path, &data).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), data);
    }

    proptest! {
        #[test]
        fn plans_conserve_instance_count(
            n in 1usize..200,
            batch in 1usize..40,
            mean in 0.5f64..40.0,
            count in 1usize..500,
            seed in any::<u64>(),
        ) {
            let data = dataset(n);
            let fixed = plan_fixed(&data, &ScenarioConfig::new(ScenarioKind::Fixed, seed).with_batch_size(batch)).unwrap();
            prop_assert_eq!(fixed.batch_sizes().iter().sum::<usize>(), n);
            let pois = plan_poisson(&data, &ScenarioConfig::new(ScenarioKind::Poisson, seed)
                .with_poisson_mean(mean).with_instance_count(count)).unwrap();
            prop_assert_eq!(pois.total_instances, count);
            prop_assert!(pois.batch_sizes().iter().all(|&s| s > 0));
            let ss_count = count.min(n);
            let ss = plan_single_stream(&data, &ScenarioConfig::new(ScenarioKind::SingleStream, seed)
                .with_instance_count(ss_count)).unwrap();
            prop_assert_eq!(ss.total_instances, ss_count);
        }

        #[test]
        fn plans_are_deterministic(n in 1usize..100, mean in 0.5f64..20.0, count in 1usize..300, seed in any::<u64>()) {
            let data = dataset(n);
            let cfg = ScenarioConfig::new(ScenarioKind::Poisson, seed)
                .with_poisson_mean(mean).with_instance_count(count);
            let a = plan_poisson(&data, &cfg).unwrap();
            let b = plan_poisson(&data, &cfg).unwrap();
            prop_assert_eq!(a.digest(), b.digest());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn offline_never_leaks_test_inputs(
            lengths in prop::collection::vec(1usize..30, 20..120),
            leak_every in 2usize..6,
            frac in 0.1f64..0.5,
            seed in any::<u64>(),
        ) {
            let train = with_lengths(&lengths, "tr");
            let test: Vec<Instance> = train.iter().step_by(leak_every)
                .map(|i| Instance { id: format!("te-{}", i.id), ..i.clone() })
                .collect();
            let eligible = train.len() - test.len();
            let count = ((eligible as f64 * frac) as usize).max(1);
            let target = mean_length(&train);
            let cfg = ScenarioConfig::new(ScenarioKind::Offline, seed).with_instance_count(count);
            if let Ok(job) = plan_offline(&train, Some(&test), target, &cfg) {
                let leaked: HashSet<&str> = test.iter().map(|t| t.input.as_str()).collect();
                prop_assert!(job.instances().iter().all(|i| !leaked.contains(i.input.as_str())));
                prop_assert_eq!(job.instances().len(), count);
            }
        }
    }
}
