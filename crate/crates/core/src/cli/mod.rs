//! Command-line front end: `run`, `baseline`, `report`, `selftest-model`
//! and `validate-adapter`.

mod commands;
pub mod config;
pub mod selftest;

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_baseline, cmd_hold_slot, cmd_report, cmd_run, cmd_validate_adapter, RunOverrides,
    RunSummary,
};

use crate::metering::MeterError;
use crate::metrics::MetricsError;
use crate::runner::RunnerError;
use crate::scenario::ScenarioError;
use crate::scheduler::SchedulerError;
use config::ConfigError;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExitClass {
    #[default]
    Ok = 0,
    Other = 1,
    Config = 2,
    Protocol = 3,
    ModelCrash = 4,
    Metering = 5,
}

impl ExitClass {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// An error tagged with the exit class it maps to.
#[derive(Debug, thiserror::Error)]
#[error("{source:#}")]
pub struct CliError {
    pub class: ExitClass,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn new(class: ExitClass, source: impl Into<anyhow::Error>) -> Self {
        Self {
            class,
            source: source.into(),
        }
    }

    pub fn config(msg: impl std::fmt::Display) -> Self {
        Self::new(ExitClass::Config, anyhow::anyhow!("{msg}"))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new(ExitClass::Config, e)
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        Self::new(ExitClass::Config, e)
    }
}

impl From<MeterError> for CliError {
    fn from(e: MeterError) -> Self {
        Self::new(ExitClass::Metering, e)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let class = match e {
            MetricsError::IncompatibleScenarios(_) | MetricsError::NoReports => ExitClass::Config,
            _ => ExitClass::Other,
        };
        Self::new(class, e)
    }
}

impl From<SchedulerError> for CliError {
    fn from(e: SchedulerError) -> Self {
        Self::new(ExitClass::Other, e)
    }
}

impl From<RunnerError> for CliError {
    fn from(e: RunnerError) -> Self {
        let class = match &e {
            RunnerError::Manifest(_) | RunnerError::SpawnFailure(_) => ExitClass::Config,
            RunnerError::ReadyTimeout(_)
            | RunnerError::ResponseTimeout { .. }
            | RunnerError::Protocol(_) => ExitClass::Protocol,
            RunnerError::ModelCrashed { .. } | RunnerError::SetupFailed(_) => {
                ExitClass::ModelCrash
            }
            RunnerError::Metering(_) => ExitClass::Metering,
            RunnerError::Io(_) => ExitClass::Other,
        };
        Self::new(class, e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ExitClass::Other, e)
    }
}

/// Writes via a sibling temp file and rename so readers never see a partial
/// file.
pub fn write_atomic(path: &Path, body: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, body)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "infermark", version, about = "Inference efficiency benchmark harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every configured scenario against a model and write reports.
    Run(RunArgs),
    /// Measure and store the idle power baseline.
    Baseline(BaselineArgs),
    /// Combine reports of one scenario into radar-normalized JSON and a table.
    Report(ReportArgs),
    /// Act as a built-in model-under-test speaking the stdio protocol.
    SelftestModel(SelftestArgs),
    /// Spawn a manifest, check the handshake and one echo batch.
    ValidateAdapter(ValidateArgs),
    /// Hold the run slot for a while (scheduler diagnostics).
    #[command(hide = true)]
    HoldSlot(HoldSlotArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (JSON).
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub meter: Option<String>,
    #[arg(long)]
    pub intensity: Option<f64>,
    #[arg(long)]
    pub idle_watts: Option<f64>,
    #[arg(long)]
    pub state_file: Option<PathBuf>,
    #[arg(long, env = crate::scheduler::LOCK_PATH_ENV)]
    pub lock_path: Option<PathBuf>,
    /// Only run these scenario kinds (repeatable).
    #[arg(long = "scenario")]
    pub scenarios: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Meter spec: replay:<csv>, synthetic:<profile>, rapl[:<zone>].
    #[arg(long, default_value = "none")]
    pub meter: String,
    /// Seconds to sample.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 100)]
    pub period_ms: u64,
    #[arg(long, env = config::STATE_FILE_ENV, default_value = "infermark-session.json")]
    pub state_file: PathBuf,
    #[arg(long, env = crate::scheduler::LOCK_PATH_ENV)]
    pub lock_path: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Write radar JSON here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// echo | upper | delay:<ms> | alloc:<MiB> | translator-toy
    #[arg(long, default_value = "echo")]
    pub mode: String,
    #[arg(long, default_value_t = 0)]
    pub params: u64,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub startup_sleep_ms: u64,
    /// Print a non-protocol line before the ready signal.
    #[arg(long)]
    pub chatter: bool,
    /// short-output | bad-index | malformed | crash | hang
    #[arg(long)]
    pub fault: Option<String>,
    /// Zero-based request number that triggers the fault.
    #[arg(long, default_value_t = 0)]
    pub fault_at: u64,
    /// Per-request delay added to any mode.
    #[arg(long, default_value_t = 0)]
    pub delay_ms: u64,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct HoldSlotArgs {
    #[arg(long)]
    pub job: String,
    #[arg(long)]
    pub hold_ms: u64,
    /// Appends `acquire`/`release` lines with unix nanosecond timestamps.
    #[arg(long)]
    pub transcript: PathBuf,
    #[arg(long, env = crate::scheduler::LOCK_PATH_ENV)]
    pub lock_path: Option<PathBuf>,
}

/// Runs a parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result: Result<(), CliError> = match cli.command {
        Command::Run(args) => cmd_run(&args).and_then(|summary| {
            for line in &summary.lines {
                println!("{line}");
            }
            match summary.worst {
                ExitClass::Ok => Ok(()),
                class => Err(CliError::new(
                    class,
                    anyhow::anyhow!("{} of {} scenarios failed", summary.failed, summary.total),
                )),
            }
        }),
        Command::Baseline(args) => cmd_baseline(&args).map(|w| println!("idle_watts {w}")),
        Command::Report(args) => cmd_report(&args),
        Command::SelftestModel(args) => return run_selftest(&args),
        Command::ValidateAdapter(args) => cmd_validate_adapter(&args),
        Command::HoldSlot(args) => cmd_hold_slot(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.class.code()
        }
    }
}

fn run_selftest(args: &SelftestArgs) -> i32 {
    let parsed = (|| -> Result<selftest::SelftestOptions, String> {
        let mode: selftest::SelftestMode = args.mode.parse()?;
        let fault = args.fault.as_deref().map(str::parse).transpose()?;
        Ok(selftest::SelftestOptions {
            mode,
            params: args.params,
            name: args
                .name
                .clone()
                .unwrap_or_else(|| format!("selftest-{}", args.mode)),
            startup_sleep: Duration::from_millis(args.startup_sleep_ms),
            chatter: args.chatter,
            fault,
            fault_at: args.fault_at,
            extra_delay: Duration::from_millis(args.delay_ms),
        })
    })();
    let opts = match parsed {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitClass::Config.code();
        }
    };
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    match selftest::serve(&opts, stdin, stdout) {
        Ok(code) => code,
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("selftest: {e}");
            1
        }
    }
}
