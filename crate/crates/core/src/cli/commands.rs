use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::config::{default_state_file, RunConfig, SessionState};
use super::{
    write_atomic, BaselineArgs, CliError, ExitClass, HoldSlotArgs, ReportArgs, RunArgs,
    ValidateArgs,
};
use crate::metering::{
    integrate_energy, measure_idle_baseline, open_meter, EnergyReport, MeterError, MeterSpec,
    PowerMeter, PowerSampler, PowerTrace, DEFAULT_METER_ERROR_FRAC,
};
use crate::metrics::{radar_normalize, Accuracy, RadarChart, WordBasis};
use crate::text::count_words;
use crate::report::{assemble_report, MetricsReport, ReportHeader, RunMeasurements, HARNESS_VERSION};
use crate::runner::{
    run_offline, run_online, spawn_and_handshake, ModelManifest, RunOptions, RunRecord,
};
use crate::scenario::{
    load_dataset, mean_length, plan_fixed, plan_offline, plan_poisson, plan_single_stream,
    BatchPlan, Instance, OfflineJob, ScenarioKind,
};
use crate::scheduler::{default_lock_path, Scheduler, TicketState};

/// Flag values that override keys of the run configuration file.
pub type RunOverrides = RunArgs;

#[derive(Debug, Default)]
pub struct RunSummary {
    pub total: usize,
    pub failed: usize,
    /// Exit class of the first failed scenario, `Ok` when none failed.
    pub worst: ExitClass,
    pub lines: Vec<String>,
    pub reports: Vec<PathBuf>,
}

enum Work {
    Online(BatchPlan),
    Offline(OfflineJob),
}

impl Work {
    fn kind(&self) -> ScenarioKind {
        match self {
            Work::Online(p) => p.scenario.kind,
            Work::Offline(j) => j.plan.scenario.kind,
        }
    }

    fn plan(&self) -> &BatchPlan {
        match self {
            Work::Online(p) => p,
            Work::Offline(j) => &j.plan,
        }
    }
}

struct RunContext {
    cfg: RunConfig,
    manifest: ModelManifest,
    scheduler: Scheduler,
    meter: Option<Box<dyn PowerMeter>>,
    meter_label: String,
    idle_watts: Option<f64>,
    out_dir: PathBuf,
}

fn apply_overrides(cfg: &mut RunConfig, args: &RunOverrides) {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(m) = &args.meter {
        cfg.meter = m.clone();
    }
    if let Some(i) = args.intensity {
        cfg.intensity_g_per_kwh = i;
    }
    if let Some(w) = args.idle_watts {
        cfg.idle_watts = Some(w);
    }
    if let Some(s) = &args.state_file {
        cfg.state_file = Some(s.clone());
    }
    if let Some(l) = &args.lock_path {
        cfg.lock_path = Some(l.clone());
    }
}

fn build_work(cfg: &RunConfig) -> Result<Vec<Work>, CliError> {
    let test = load_dataset(&cfg.datasets.test)?;
    let train = match &cfg.datasets.train {
        Some(p) if cfg.scenarios.iter().any(|s| s.kind == ScenarioKind::Offline) => {
            Some(load_dataset(p)?)
        }
        _ => None,
    };
    let mut work = Vec::new();
    for entry in &cfg.scenarios {
        let sc = entry.resolve(cfg.seed);
        let w = match sc.kind {
            ScenarioKind::Fixed => {
                let plan = plan_fixed(&test, &sc)?;
                if let Some(inst) = plan.instances().find(|i| i.references.is_empty()) {
                    return Err(CliError::config(format!(
                        "fixed batching scores accuracy but instance {:?} has no references",
                        inst.id
                    )));
                }
                Work::Online(plan)
            }
            ScenarioKind::Poisson => Work::Online(plan_poisson(&test, &sc)?),
            ScenarioKind::SingleStream => Work::Online(plan_single_stream(&test, &sc)?),
            ScenarioKind::Offline => {
                let target = cfg.offline_target_len.unwrap_or_else(|| mean_length(&test));
                let train = train.as_deref().expect("validated");
                Work::Offline(plan_offline(train, Some(&test), target, &sc)?)
            }
        };
        work.push(w);
    }
    Ok(work)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Executes every configured scenario sequentially. Configuration problems
/// are reported before any model is spawned; scenario failures are collected
/// and do not stop later scenarios.
pub fn cmd_run(args: &RunOverrides) -> Result<RunSummary, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    apply_overrides(&mut cfg, args);
    if !args.scenarios.is_empty() {
        let wanted: Vec<ScenarioKind> = args
            .scenarios
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()?;
        cfg.scenarios.retain(|s| wanted.contains(&s.kind));
    }
    cfg.validate()?;
    let manifest = ModelManifest::load(&cfg.manifest)?;
    let work = build_work(&cfg)?;

    let spec: MeterSpec = cfg.meter.parse().map_err(CliError::config)?;
    let meter = open_meter(&spec)?;
    let idle_watts = match (&meter, cfg.idle_watts) {
        (None, _) => None,
        (Some(_), Some(w)) => Some(w),
        (Some(_), None) => {
            let state_path = cfg.state_file.clone().unwrap_or_else(default_state_file);
            let state = SessionState::load(&state_path).ok_or_else(|| {
                CliError::new(
                    ExitClass::Metering,
                    anyhow::anyhow!(
                        "no idle baseline in {}; run `infermark baseline` or set idle_watts",
                        state_path.display()
                    ),
                )
            })?;
            Some(state.idle_watts)
        }
    };
    let meter_label = meter
        .as_ref()
        .map(|m| m.describe())
        .unwrap_or_else(|| "none".into());

    std::fs::create_dir_all(&cfg.output_dir)?;
    let out_dir = cfg.output_dir.canonicalize()?;
    let mut scheduler = Scheduler::new(cfg.lock_path.clone().unwrap_or_else(default_lock_path));
    if let Some(t) = cfg.queue_timeout_s {
        scheduler = scheduler.with_queue_timeout(Duration::from_secs_f64(t));
    }
    manifest.run_setup()?;

    let mut ctx = RunContext {
        cfg,
        manifest,
        scheduler,
        meter,
        meter_label,
        idle_watts,
        out_dir,
    };
    let mut summary = RunSummary {
        total: work.len(),
        ..Default::default()
    };
    for w in &work {
        match run_scenario(&mut ctx, w) {
            Ok(path) => {
                summary.lines.push(format!("ok {} {}", w.kind(), path.display()));
                summary.reports.push(path);
            }
            Err(e) => {
                log::error!("{} scenario failed: {e}", w.kind());
                summary.lines.push(format!("FAILED {}: {e}", w.kind()));
                summary.failed += 1;
                if summary.worst == ExitClass::Ok {
                    summary.worst = e.class;
                }
            }
        }
    }
    Ok(summary)
}

fn run_scenario(ctx: &mut RunContext, work: &Work) -> Result<PathBuf, CliError> {
    let kind = work.kind();
    let job_id = format!("{}.{}", ctx.manifest.name, kind);
    let mut ticket = ctx.scheduler.acquire(&job_id)?;
    let outcome = measure_scenario(ctx, work).and_then(|report| write_report(ctx, &report));
    let state = if outcome.is_ok() {
        TicketState::Done
    } else {
        TicketState::Failed
    };
    ticket.finish(state)?;
    outcome
}

fn measure_scenario(ctx: &mut RunContext, work: &Work) -> Result<MetricsReport, CliError> {
    let started_at = chrono::Utc::now();
    let opts = RunOptions {
        warmup_batches: ctx.cfg.warmup_batches,
        memory_period: Duration::from_millis(ctx.cfg.memory_period_ms),
    };
    let power_period = Duration::from_millis(ctx.cfg.power_period_ms);

    let mut conn = spawn_and_handshake(&ctx.manifest)?;
    let params = conn.params;
    let scratch = tempfile::tempdir_in(&ctx.out_dir)?;
    let sampler = ctx.meter.take().map(|m| PowerSampler::start(m, power_period));
    let run = match work {
        Work::Online(plan) => run_online(&mut conn, plan, &opts),
        Work::Offline(job) => {
            let file = scratch.path().join("offline-instances.txt");
            match job.write_instance_file(&file) {
                Ok(()) => run_offline(&mut conn, job, &file, &opts),
                Err(e) => {
                    conn.kill();
                    return Err(e.into());
                }
            }
        }
    };
    let samples = sampler.map(|s| {
        let (meter, samples) = s.stop();
        ctx.meter = Some(meter);
        samples
    });
    let mut record: RunRecord = match run {
        Ok(r) => r,
        Err(failure) => {
            log::warn!(
                "run aborted after {} completed batches",
                failure.partial.batches.len()
            );
            conn.kill();
            return Err(failure.error.into());
        }
    };
    record.exit_status = conn.close();
    if record.exit_status != Some(0) {
        log::warn!("model exited with status {:?} after the run", record.exit_status);
    }

    let first_dispatch = record.batches.first().map(|b| b.dispatch_ts).unwrap_or(record.ready_at);
    let last_response = record.run_end;
    let energy = match samples {
        None => None,
        Some(samples) => {
            let trace = PowerTrace::new(
                samples?,
                ctx.idle_watts.expect("meter implies idle baseline"),
                power_period.as_secs_f64(),
            );
            let wh = integrate_energy(&trace, first_dispatch, last_response)?;
            Some(EnergyReport::new(wh, ctx.cfg.intensity_g_per_kwh))
        }
    };

    let plan = work.plan();
    let accuracy = if kind_scores_accuracy(work.kind()) {
        let hyps = record.outputs();
        let refs: Vec<Vec<String>> = plan.instances().map(|i: &Instance| i.references.clone()).collect();
        let metric = ctx.cfg.accuracy_metric;
        Some(Accuracy {
            metric,
            value: metric.score(&hyps, &refs)?,
        })
    } else {
        None
    };

    let header = ReportHeader {
        harness_version: HARNESS_VERSION.into(),
        seed: plan.scenario.seed,
        idle_watts: ctx.idle_watts,
        intensity_g_per_kwh: ctx.cfg.intensity_g_per_kwh,
        meter: ctx.meter_label.clone(),
        meter_error_frac: DEFAULT_METER_ERROR_FRAC,
        started_at: started_at.to_rfc3339(),
        finished_at: chrono::Utc::now().to_rfc3339(),
        ready_at_s: record.ready_at,
        first_dispatch_s: first_dispatch,
        last_response_s: last_response,
        word_basis: ctx.cfg.word_basis,
    };
    let peak = (record.peak_rss_bytes > 0).then_some(record.peak_rss_bytes);
    let report = assemble_report(
        header,
        &record,
        RunMeasurements {
            model: ctx.manifest.name.clone(),
            scenario: work.kind(),
            params,
            energy,
            peak_rss_bytes: peak,
            accuracy,
            plan_digest: plan.digest(),
            input_words: (ctx.cfg.word_basis == WordBasis::Input)
                .then(|| plan.instances().map(|i| count_words(&i.input)).sum()),
        },
    )?;
    Ok(report)
}

fn kind_scores_accuracy(kind: ScenarioKind) -> bool {
    crate::scenario::scenario_metrics(kind).contains(&crate::scenario::Metric::Accuracy)
}

fn write_report(ctx: &RunContext, report: &MetricsReport) -> Result<PathBuf, CliError> {
    let stem = format!("{}.{}", sanitize(&report.model), report.scenario);
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let body = serde_json::to_vec_pretty(report).map_err(|e| CliError::new(ExitClass::Other, e))?;
    let artifact = ctx.out_dir.join(format!("{stem}.{stamp}.report.json"));
    write_atomic(&artifact, &body)?;
    write_atomic(&ctx.out_dir.join(format!("{stem}.report.json")), &body)?;

    let index_path = ctx.out_dir.join("index.json");
    let mut index: BTreeMap<String, String> = std::fs::read_to_string(&index_path)
        .ok()
        .and_then(|b| serde_json::from_str(&b).ok())
        .unwrap_or_default();
    index.insert(
        stem,
        artifact
            .file_name()
            .expect("file name")
            .to_string_lossy()
            .into_owned(),
    );
    let body = serde_json::to_vec_pretty(&index).map_err(|e| CliError::new(ExitClass::Other, e))?;
    write_atomic(&index_path, &body)?;
    Ok(artifact)
}

/// Measures the idle baseline while holding the run slot and stores it in
/// the session state file, replacing any earlier value.
pub fn cmd_baseline(args: &BaselineArgs) -> Result<f64, CliError> {
    let spec: MeterSpec = args.meter.parse().map_err(CliError::config)?;
    let Some(mut meter) = open_meter(&spec)? else {
        return Err(MeterError::MeterUnavailable("no meter configured".into()).into());
    };
    if args.period_ms == 0 || args.duration.is_nan() || args.duration <= 0.0 {
        return Err(CliError::config("duration and period must be positive"));
    }
    let scheduler = Scheduler::new(args.lock_path.clone().unwrap_or_else(default_lock_path));
    let mut ticket = scheduler.acquire("idle-baseline")?;
    let measured = measure_idle_baseline(
        meter.as_mut(),
        args.duration,
        args.period_ms as f64 / 1000.0,
    );
    ticket.finish(if measured.is_ok() {
        TicketState::Done
    } else {
        TicketState::Failed
    })?;
    let idle_watts = measured?;
    SessionState {
        idle_watts,
        meter: meter.describe(),
        duration_s: args.duration,
        measured_at: chrono::Utc::now().to_rfc3339(),
    }
    .store(&args.state_file)?;
    Ok(idle_watts)
}

pub fn render_table(chart: &RadarChart, reports: &[MetricsReport]) -> String {
    let mut out = format!("scenario: {}\n", chart.scenario);
    let name_w = chart.models.iter().map(|m| m.len()).max().unwrap_or(5).max(5);
    out.push_str(&format!("{:<name_w$}  {:>12}", "model", "params"));
    for axis in &chart.axes {
        out.push_str(&format!("  {:>24}", axis.name));
    }
    out.push('\n');
    for (i, model) in chart.models.iter().enumerate() {
        out.push_str(&format!("{:<name_w$}  {:>12}", model, reports[i].params));
        for axis in &chart.axes {
            let cell = match (axis.raw[i], axis.normalized[i]) {
                (Some(r), Some(n)) => format!("{r:.4} ({n:.2})"),
                _ => "n/a".into(),
            };
            out.push_str(&format!("  {cell:>24}"));
        }
        out.push('\n');
    }
    out
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let reports = args
        .reports
        .iter()
        .map(|p| {
            MetricsReport::read(p).map_err(|e| {
                CliError::new(ExitClass::Config, e.context(format!("reading {}", p.display())))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let chart = radar_normalize(&reports)?;
    let json = serde_json::to_string_pretty(&chart).map_err(|e| CliError::new(ExitClass::Other, e))?;
    let table = render_table(&chart, &reports);
    match &args.out {
        Some(path) => {
            write_atomic(path, json.as_bytes())?;
            print!("{table}");
        }
        None => {
            println!("{json}");
            eprint!("{table}");
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AdapterReport {
    model_name: String,
    params: u64,
    handshake_ms: f64,
    batches_checked: usize,
    exit_status: Option<i32>,
    conformant: bool,
}

/// Spawns a manifest, checks the ready handshake, two echo-shaped batches
/// (lengths and echoed indices) and a clean exit on end of input.
pub fn cmd_validate_adapter(args: &ValidateArgs) -> Result<(), CliError> {
    let manifest = ModelManifest::load(&args.manifest)?;
    manifest.run_setup()?;
    let spawned = Instant::now();
    let mut conn = spawn_and_handshake(&manifest)?;
    let handshake_ms = spawned.elapsed().as_secs_f64() * 1e3;
    let probes: [Vec<String>; 2] = [
        vec!["hello world".into(), "zwei\nZeilen".into(), String::new()],
        vec!["ein Satz".into()],
    ];
    for batch in &probes {
        if let Err(e) = conn.probe(batch) {
            conn.kill();
            return Err(e.into());
        }
    }
    let params = conn.params;
    let model_name = conn.ready.model_name.clone();
    let exit_status = conn.close();
    let report = AdapterReport {
        model_name,
        params,
        handshake_ms,
        batches_checked: probes.len(),
        exit_status,
        conformant: exit_status == Some(0),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| CliError::new(ExitClass::Other, e))?
    );
    if !report.conformant {
        return Err(CliError::new(
            ExitClass::Protocol,
            anyhow::anyhow!("model did not exit cleanly after input closed: {exit_status:?}"),
        ));
    }
    Ok(())
}

fn unix_ns() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0)
}

fn append_line(path: &Path, line: &str) -> std::io::Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    f.write_all(line.as_bytes())
}

pub fn cmd_hold_slot(args: &HoldSlotArgs) -> Result<(), CliError> {
    let scheduler = Scheduler::new(args.lock_path.clone().unwrap_or_else(default_lock_path));
    let mut ticket = scheduler.acquire(&args.job)?;
    let pid = std::process::id();
    append_line(
        &args.transcript,
        &format!("acquire {} {pid} {}\n", args.job, unix_ns()),
    )?;
    std::thread::sleep(Duration::from_millis(args.hold_ms));
    append_line(
        &args.transcript,
        &format!("release {} {pid} {}\n", args.job, unix_ns()),
    )?;
    scheduler.release(&mut ticket)?;
    Ok(())
}
