//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use common::oracle::{bleu_suite, poisson_chi_square};
use common::*;
use infermark::metering::{
    integrate_energy, EnergyReport, PowerMeter, PowerSample, PowerTrace, ReplayMeter,
};
use infermark::metrics::{corpus_bleu, latency_stats};
use infermark::report::MetricsReport;
use infermark::rng::PlanRng;
use infermark::runner::{run_online, spawn_and_handshake, RunOptions, RunRecord};
use infermark::scenario::{
    mean_length, plan_offline, plan_poisson, plan_single_stream, sample_poisson,
    scenario_metrics, Instance, ScenarioConfig, ScenarioKind,
};
use serde_json::json;

type Outcome = Result<String, String>;
type Criterion = (&'static str, f64, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("table1_conformance", 60.0, table1_conformance),
        ("poisson_sampler", 10.0, poisson_sampler),
        ("energy_oracle", 1.0, energy_oracle),
        ("latency_fidelity", 10.0, latency_fidelity),
        ("measurement_start", 15.0, measurement_start),
        ("bleu_oracle", 30.0, bleu_oracle),
        ("offline_sampler", 5.0, offline_sampler),
        ("scheduler_exclusion", 30.0, scheduler_exclusion),
        ("e2e_determinism", 60.0, e2e_determinism),
    ];
    let mut failed = 0;
    for (name, budget_s, check) in criteria {
        let t0 = Instant::now();
        let outcome = check();
        let secs = t0.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(d) if secs > budget_s => Err(format!("{d}; took {secs:.1}s, budget {budget_s}s")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {name} [{secs:.2}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} [{secs:.2}s] {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn read_latest(dir: &Path, model: &str, kind: ScenarioKind) -> Result<MetricsReport, String> {
    let p = dir.join(format!("{model}.{kind}.report.json"));
    MetricsReport::read(&p).map_err(|e| format!("{}: {e}", p.display()))
}

fn table1_conformance() -> Outcome {
    let ws = Workspace::new();
    let m = selftest_manifest("t1", &["--mode", "translator-toy", "--params", "74000000"]);
    let cfg = ws.config(
        &m,
        all_scenarios(),
        json!({"meter": "synthetic:const:150", "idle_watts": 50.0}),
    );
    let out = ws.run(&["run", cfg.to_str().unwrap()]);
    ensure!(out.status.success(), "run failed: {}", stderr(&out));
    let mut seen = Vec::new();
    for kind in ScenarioKind::ALL {
        let r = read_latest(&ws.path().join("reports"), "t1", kind)?;
        let want = scenario_metrics(kind);
        ensure!(
            r.present_metrics() == want,
            "{kind}: fields {:?}, expected {:?}",
            r.present_metrics(),
            want
        );
        seen.push(format!("{kind}={}", want.len()));
    }
    Ok(seen.join(" "))
}

fn poisson_sampler() -> Outcome {
    let mut pooled = Vec::with_capacity(200_000);
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut rng = PlanRng::new(seed);
        let draws: Vec<u64> = (0..4000).map(|_| sample_poisson(&mut rng, 16.0)).collect();
        let mean = draws.iter().sum::<u64>() as f64 / 4000.0;
        worst = worst.max((mean - 16.0).abs());
        pooled.extend(draws);
    }
    ensure!(worst <= 1.0, "a seed's mean is {worst} away from 16");
    let chi = poisson_chi_square(&pooled, 16.0);
    ensure!(
        chi.statistic < chi.critical,
        "chi-square {:.2} >= {:.2}",
        chi.statistic,
        chi.critical
    );

    let data: Vec<Instance> = toy_dataset(200, "p");
    let cfg = ScenarioConfig::new(ScenarioKind::Poisson, 42)
        .with_poisson_mean(16.0)
        .with_instance_count(4000);
    let a = plan_poisson(&data, &cfg).map_err(|e| e.to_string())?;
    let b = plan_poisson(&data, &cfg).map_err(|e| e.to_string())?;
    ensure!(a.batch_sizes() == b.batch_sizes(), "same seed, different batch sizes");
    Ok(format!(
        "max |mean-16| {worst:.3}, chi2 {:.1} < {:.1} (dof {})",
        chi.statistic, chi.critical, chi.dof
    ))
}

fn sample_replay(meter: &mut ReplayMeter, period: f64, until: f64) -> Vec<PowerSample> {
    let n = (until / period).round() as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 * period;
            PowerSample {
                t,
                watts: meter.read_watts(t).unwrap(),
            }
        })
        .collect()
}

fn energy_oracle() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (start, end) = (1.05, 8.35);
    let idle = 40.0;
    let rel = |got: f64, want: f64| ((got - want) / want).abs();

    let constant = dir.path().join("constant.csv");
    write_constant_trace(&constant, 120.0, 10);
    let mut m = ReplayMeter::from_csv(&constant).map_err(|e| e.to_string())?;
    let trace = PowerTrace::new(sample_replay(&mut m, 0.1, 10.0), idle, 0.1);
    let wh = integrate_energy(&trace, start, end).map_err(|e| e.to_string())?;
    let want = 80.0 * (end - start) / 3600.0;
    ensure!(rel(wh, want) < 1e-9, "constant: {wh} vs {want}");

    let idle_eq = dir.path().join("idle.csv");
    write_constant_trace(&idle_eq, idle, 10);
    let mut m = ReplayMeter::from_csv(&idle_eq).map_err(|e| e.to_string())?;
    let trace = PowerTrace::new(sample_replay(&mut m, 0.1, 10.0), idle, 0.1);
    let zero = integrate_energy(&trace, start, end).map_err(|e| e.to_string())?;
    ensure!(zero.abs() < 1e-12, "idle-equal trace gave {zero} Wh");

    // 50 W at t=0 rising linearly to 250 W at t=10
    let ramp = dir.path().join("ramp.csv");
    std::fs::write(&ramp, "t_s,watts\n0,50\n10,250\n").map_err(|e| e.to_string())?;
    let net = |t: f64| 50.0 + 20.0 * t - idle;
    let want = ((net(start) + net(end)) / 2.0) * (end - start) / 3600.0;
    let mut ramp_err = 0.0f64;
    for period in [0.5, 0.1, 0.01] {
        let mut m = ReplayMeter::from_csv(&ramp).map_err(|e| e.to_string())?;
        let trace = PowerTrace::new(sample_replay(&mut m, period, 10.0), idle, period);
        let wh = integrate_energy(&trace, start, end).map_err(|e| e.to_string())?;
        ramp_err = ramp_err.max(rel(wh, want));
    }
    ensure!(ramp_err < 0.005, "ramp relative error {ramp_err}");

    let report = EnergyReport::new(want, 400.0);
    ensure!(
        report.co2_g == want / 1000.0 * 400.0,
        "co2 identity broken: {}",
        report.co2_g
    );
    Ok(format!("constant ok, idle-equal 0 Wh, ramp max rel err {ramp_err:.2e}, co2 exact"))
}

fn single_stream_record(extra: &[&str], count: usize) -> Result<RunRecord, String> {
    let data = toy_dataset(count, "l");
    let plan = plan_single_stream(
        &data,
        &ScenarioConfig::new(ScenarioKind::SingleStream, 3).with_instance_count(count),
    )
    .map_err(|e| e.to_string())?;
    let mut conn = spawn_and_handshake(&selftest_manifest("lat", extra)).map_err(|e| e.to_string())?;
    let record = run_online(&mut conn, &plan, &RunOptions::default()).map_err(|f| f.error.to_string())?;
    conn.close();
    Ok(record)
}

/// Harness overhead per request: latency minus the model's configured delay.
fn overhead_p99(delay_ms: u64) -> Result<f64, String> {
    let record = single_stream_record(&["--mode", &format!("delay:{delay_ms}")], 100)?;
    let stats = latency_stats(&record).map_err(|e| e.to_string())?;
    Ok(stats.p99_ms - delay_ms as f64)
}

fn latency_fidelity() -> Outcome {
    // delay:0 never lets the harness block, so it misses the cost of waking a
    // reader that sat in read(); a 1 ms delay adds that path.
    let eps = overhead_p99(0)?.max(overhead_p99(1)?);
    ensure!(eps <= 5.0, "harness overhead {eps:.3} ms exceeds 5 ms");
    let stats = latency_stats(&single_stream_record(&["--mode", "delay:50"], 100)?)
        .map_err(|e| e.to_string())?;
    ensure!(
        stats.p50_ms >= 50.0 && stats.p50_ms <= 50.0 + eps,
        "p50 {:.3} ms outside [50, {:.3}]",
        stats.p50_ms,
        50.0 + eps
    );
    Ok(format!("eps {eps:.3} ms, p50 {:.3} ms", stats.p50_ms))
}

fn measurement_start() -> Outcome {
    let ws = Workspace::new();
    let mut results = Vec::new();
    for (name, sleep) in [("awake", "0"), ("sleepy", "2000")] {
        let m = selftest_manifest(name, &["--mode", "delay:20", "--startup-sleep-ms", sleep]);
        let cfg = ws.config(
            &m,
            json!([{"kind": "poisson", "poisson_mean": 4.0, "instance_count": 100}]),
            json!({}),
        );
        let out = ws.run(&["run", cfg.to_str().unwrap()]);
        ensure!(out.status.success(), "{name}: {}", stderr(&out));
        results.push(read_latest(&ws.path().join("reports"), name, ScenarioKind::Poisson)?);
    }
    let (a, b) = (&results[0], &results[1]);
    ensure!(a.plan_digest == b.plan_digest, "plans differ");
    let tp = |r: &MetricsReport| r.throughput_inst_s.unwrap();
    let p50 = |r: &MetricsReport| r.latency.as_ref().unwrap().p50_ms;
    let d_tp = (tp(a) - tp(b)).abs() / tp(a);
    let d_lat = (p50(a) - p50(b)).abs() / p50(a);
    ensure!(d_tp <= 0.05, "throughput {:.2} vs {:.2}", tp(a), tp(b));
    ensure!(d_lat <= 0.05, "p50 {:.3} vs {:.3} ms", p50(a), p50(b));
    Ok(format!(
        "throughput diff {:.2}%, p50 diff {:.2}%",
        d_tp * 100.0,
        d_lat * 100.0
    ))
}

fn bleu_oracle() -> Outcome {
    let suite = bleu_suite();
    ensure!(suite.mismatches.is_empty(), "mismatches: {:?}", suite.mismatches);
    let hyps: Vec<String> = (0..20).map(sentence).collect();
    let refs: Vec<Vec<String>> = hyps.iter().map(|h| vec![h.clone()]).collect();
    let identity = corpus_bleu(&hyps, &refs).map_err(|e| e.to_string())?;
    ensure!(identity == 100.0, "identity corpus scored {identity}");
    Ok(format!("{} corpora identical, identity 100.0", suite.corpora))
}

fn offline_sampler() -> Outcome {
    let vocab = ["ein", "der", "und", "zu", "Haus", "mit", "auf", "nicht"];
    let text = |i: usize| {
        let len = 4 + (i * 7919) % 50;
        (0..len)
            .map(|k| vocab[(i + k * 3) % vocab.len()])
            .collect::<Vec<_>>()
            .join(" ")
            + &format!(" n{i}")
    };
    let train: Vec<Instance> = (0..50_000)
        .map(|i| Instance {
            id: format!("tr{i}"),
            input: text(i),
            references: vec![],
        })
        .collect();
    // half of the test split duplicates training inputs
    let test: Vec<Instance> = (0..2000)
        .map(|i| Instance {
            id: format!("te{i}"),
            input: if i % 2 == 0 { text(i * 25) } else { text(100_000 + i) },
            references: vec![],
        })
        .collect();
    let cfg = ScenarioConfig::new(ScenarioKind::Offline, 9).with_instance_count(8000);
    let job = plan_offline(&train, Some(&test), 20.0, &cfg).map_err(|e| e.to_string())?;
    let mean = mean_length(job.instances());
    ensure!(job.instances().len() == 8000, "sampled {}", job.instances().len());
    ensure!((19.6..=20.4).contains(&mean), "sample mean length {mean}");
    let test_inputs: HashSet<&str> = test.iter().map(|t| t.input.as_str()).collect();
    let leaked = job
        .instances()
        .iter()
        .filter(|i| test_inputs.contains(i.input.as_str()))
        .count();
    ensure!(leaked == 0, "{leaked} sampled instances appear in the test split");
    Ok(format!("mean length {mean:.3}, attempts {}, leakage 0", job.attempts))
}

fn hold_slot(lock: &Path, transcript: &Path, job: &str, ms: u64) -> Command {
    let mut c = Command::new(BIN);
    c.args(["hold-slot", "--job", job, "--hold-ms", &ms.to_string(), "--transcript"])
        .arg(transcript)
        .env("INFERMARK_LOCK", lock)
        .stdout(Stdio::null())
        .stderr(Stdio::null());
    c
}

fn transcript_lines(path: &Path) -> Vec<(String, String, u128)> {
    let Ok(f) = std::fs::File::open(path) else {
        return Vec::new();
    };
    std::io::BufReader::new(f)
        .lines()
        .map_while(Result::ok)
        .filter_map(|l| {
            let p: Vec<&str> = l.split_whitespace().collect();
            if p.len() != 4 {
                return None;
            }
            Some((p[0].to_string(), p[1].to_string(), p[3].parse().ok()?))
        })
        .collect()
}

fn scheduler_exclusion() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let lock = dir.path().join("slot.lock");
    let transcript = dir.path().join("transcript.log");
    let t0 = Instant::now();
    let children: Vec<_> = (0..10)
        .map(|i| hold_slot(&lock, &transcript, &format!("job{i}"), 1000).spawn())
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for mut c in children {
        let st = c.wait().map_err(|e| e.to_string())?;
        ensure!(st.success(), "hold-slot exited with {st}");
    }
    let elapsed = t0.elapsed().as_secs_f64();
    ensure!(elapsed >= 10.0, "10 x 1 s jobs finished in {elapsed:.2}s");

    let lines = transcript_lines(&transcript);
    ensure!(lines.len() == 20, "transcript has {} lines", lines.len());
    let mut holder: Option<&str> = None;
    for (event, job, _) in &lines {
        match (event.as_str(), holder) {
            ("acquire", None) => holder = Some(job),
            ("release", Some(h)) if h == job => holder = None,
            _ => return Err(format!("overlap: {event} {job} while {holder:?} holds")),
        }
    }

    // killing the holder lets the next waiter through
    let t2 = dir.path().join("kill.log");
    let mut victim = hold_slot(&lock, &t2, "victim", 60_000)
        .spawn()
        .map_err(|e| e.to_string())?;
    let deadline = Instant::now() + Duration::from_secs(10);
    while transcript_lines(&t2).is_empty() {
        ensure!(Instant::now() < deadline, "victim never acquired");
        std::thread::sleep(Duration::from_millis(20));
    }
    let mut waiter = hold_slot(&lock, &t2, "waiter", 100)
        .spawn()
        .map_err(|e| e.to_string())?;
    std::thread::sleep(Duration::from_millis(300));
    ensure!(
        waiter.try_wait().map_err(|e| e.to_string())?.is_none(),
        "waiter finished while the slot was held"
    );
    let killed = Instant::now();
    victim.kill().map_err(|e| e.to_string())?;
    victim.wait().map_err(|e| e.to_string())?;
    loop {
        if let Some(st) = waiter.try_wait().map_err(|e| e.to_string())? {
            ensure!(st.success(), "waiter exited with {st}");
            break;
        }
        if killed.elapsed() > Duration::from_secs(10) {
            let _ = waiter.kill();
            return Err("waiter still blocked 10 s after the holder was killed".into());
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    Ok(format!(
        "elapsed {elapsed:.2}s, no overlap, waiter proceeded {:.0} ms after kill",
        killed.elapsed().as_secs_f64() * 1e3
    ))
}

fn e2e_determinism() -> Outcome {
    let ws = Workspace::new();
    let trace = ws.path().join("power.csv");
    write_constant_trace(&trace, 150.0, 600);
    let m = selftest_manifest("det", &["--mode", "translator-toy", "--delay-ms", "20"]);
    // long enough that one scheduler hiccup stays well under the tolerance
    let scenarios = json!([
        {"kind": "fixed", "batch_size": 4},
        {"kind": "poisson", "poisson_mean": 4.0, "instance_count": 160},
        {"kind": "single_stream", "instance_count": 40},
        {"kind": "offline", "instance_count": 60},
    ]);
    let cfg = ws.config(
        &m,
        scenarios,
        json!({"meter": format!("replay:{}", trace.display()), "idle_watts": 50.0}),
    );
    let mut runs = Vec::new();
    for out_dir in ["a", "b"] {
        let dir = ws.path().join(out_dir);
        let out = ws.run(&["run", cfg.to_str().unwrap(), "--output-dir", dir.to_str().unwrap()]);
        ensure!(out.status.success(), "run {out_dir}: {}", stderr(&out));
        let reports: Vec<MetricsReport> = ScenarioKind::ALL
            .iter()
            .map(|&k| read_latest(&dir, "det", k))
            .collect::<Result<_, _>>()?;
        runs.push(reports);
    }
    let within = |a: f64, b: f64| (a - b).abs() <= 0.10 * a.abs().max(b.abs());
    let mut worst = (0.0f64, String::new());
    for (a, b) in runs[0].iter().zip(&runs[1]) {
        let k = a.scenario;
        ensure!(a.plan_digest == b.plan_digest, "{k}: plans differ");
        ensure!(a.outputs_digest == b.outputs_digest, "{k}: outputs differ");
        ensure!(a.accuracy == b.accuracy, "{k}: accuracy differs");
        let (ea, eb) = (a.energy_wh.unwrap(), b.energy_wh.unwrap());
        let span = |r: &MetricsReport| r.header.last_response_s - r.header.first_dispatch_s;
        let (pa, pb) = (ea * 3600.0 / span(a), eb * 3600.0 / span(b));
        ensure!(
            (pa - 100.0).abs() < 1e-6 && (pb - 100.0).abs() < 1e-6,
            "{k}: mean net power {pa} / {pb} W, expected 100"
        );
        ensure!(within(ea, eb), "{k}: energy {ea} vs {eb} Wh");
        if let (Some(x), Some(y)) = (a.throughput_inst_s, b.throughput_inst_s) {
            ensure!(within(x, y), "{k}: throughput {x} vs {y}");
            if (x - y).abs() / x > worst.0 {
                worst = ((x - y).abs() / x, format!("{k} throughput"));
            }
        }
        if let (Some(x), Some(y)) = (&a.latency, &b.latency) {
            ensure!(within(x.p50_ms, y.p50_ms), "{k}: p50 {} vs {}", x.p50_ms, y.p50_ms);
            if (x.p50_ms - y.p50_ms).abs() / x.p50_ms > worst.0 {
                worst = ((x.p50_ms - y.p50_ms).abs() / x.p50_ms, format!("{k} p50"));
            }
        }
    }
    Ok(format!(
        "plans/outputs/accuracy identical, net power 100 W both runs, worst timing diff {:.2}% ({})",
        worst.0 * 100.0,
        worst.1
    ))
}
