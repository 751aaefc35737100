#![allow(dead_code)]

pub mod oracle;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use infermark::runner::ModelManifest;
use infermark::scenario::{write_dataset, Instance};
use serde_json::json;

pub const BIN: &str = env!("CARGO_BIN_EXE_infermark");

const WORDS: [&str; 12] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
    "kilo", "lima",
];

/// Sentence `i` with 3..=9 words; its reference is the word-reversed text,
/// which is what the translator-toy model produces.
pub fn sentence(i: usize) -> String {
    let n = 3 + i % 7;
    (0..n)
        .map(|k| WORDS[(i * 7 + k * 5) % WORDS.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn toy_dataset(n: usize, id_prefix: &str) -> Vec<Instance> {
    (0..n)
        .map(|i| {
            let input = format!("{} {i}", sentence(i));
            let reference = input.split_whitespace().rev().collect::<Vec<_>>().join(" ");
            Instance {
                id: format!("{id_prefix}{i}"),
                input,
                references: vec![reference],
            }
        })
        .collect()
}

pub fn write_toy(dir: &Path, name: &str, n: usize) -> PathBuf {
    let path = dir.join(name);
    write_dataset(&path, &toy_dataset(n, name)).unwrap();
    path
}

/// Manifest that runs this crate's binary as a selftest model.
pub fn selftest_manifest(name: &str, extra: &[&str]) -> ModelManifest {
    let mut cmd = vec![BIN.to_string(), "selftest-model".into(), "--name".into(), name.into()];
    cmd.extend(extra.iter().map(|s| s.to_string()));
    let mut m = ModelManifest::new(name, cmd);
    m.startup_timeout_s = 20.0;
    m.response_timeout_s = 20.0;
    m.exit_grace_s = 5.0;
    m
}

pub fn write_manifest(dir: &Path, m: &ModelManifest) -> PathBuf {
    let path = dir.join(format!("{}.manifest.json", m.name));
    std::fs::write(&path, serde_json::to_vec_pretty(m).unwrap()).unwrap();
    path
}

pub fn all_scenarios() -> serde_json::Value {
    json!([
        {"kind": "fixed", "batch_size": 8},
        {"kind": "poisson", "poisson_mean": 4.0, "instance_count": 40},
        {"kind": "single_stream", "instance_count": 20},
        {"kind": "offline", "instance_count": 60},
    ])
}

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn lock(&self) -> PathBuf {
        self.path().join("slot.lock")
    }

    /// Writes datasets, a manifest and a config; returns the config path.
    pub fn config(
        &self,
        manifest: &ModelManifest,
        scenarios: serde_json::Value,
        extra: serde_json::Value,
    ) -> PathBuf {
        let test = write_toy(self.path(), "test.jsonl", 64);
        let train = write_toy(self.path(), "train.jsonl", 400);
        let manifest = write_manifest(self.path(), manifest);
        let mut cfg = json!({
            "manifest": manifest,
            "datasets": {"test": test, "train": train},
            "scenarios": scenarios,
            "seed": 7,
            "output_dir": self.path().join("reports"),
            "lock_path": self.lock(),
        });
        if let serde_json::Value::Object(extra) = extra {
            for (k, v) in extra {
                cfg[k] = v;
            }
        }
        let path = self.path().join("run.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
        path
    }

    pub fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .env("INFERMARK_LOCK", self.lock())
            .env("INFERMARK_STATE", self.path().join("session.json"))
            .output()
            .unwrap()
    }
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Constant-power replay trace covering `secs` seconds.
pub fn write_constant_trace(path: &Path, watts: f64, secs: usize) {
    let mut body = String::from("t_s,watts\n");
    for t in 0..=secs {
        body.push_str(&format!("{t},{watts}\n"));
    }
    std::fs::write(path, body).unwrap();
}
