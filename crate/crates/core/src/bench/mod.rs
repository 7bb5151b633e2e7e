//! The task-limit latency benchmark and a parallel Metropolis-Hastings
//! sampler, both driven through the full engine.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datafabric::{FabricError, DEFAULT_THRESHOLD_BYTES};
use crate::queues::QueueError;
use crate::record::{LatencyBreakdown, RecordError};
use crate::taskserver::ServerError;
use crate::thinker::ThinkerError;

mod engine;
mod mh;
mod sleep;
mod task_limit;

pub use engine::{bench_registry, Engine, EngineOptions};
pub use mh::{
    compute_logp_method, discrete_chain, ks_two_sample, log_prob_gaussian, reference_mh_oracle,
    run_mh_sampler, MhConfig, Target,
};
pub use sleep::{sleep_duration, sleep_output, sleep_task_method, SleepParams};
pub use task_limit::{check_constant_in_flight, run_task_limit, run_task_limit_on};

pub const REPORT_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Thinker(#[from] ThinkerError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("task failed: {0}")]
    TaskFailed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueChoice {
    Inproc,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecutorChoice {
    Local,
    /// Remote workers connect to `listen`.
    Remote { listen: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Tasks kept in flight, and the number of execution slots.
    pub workers: usize,
    pub total_tasks: usize,
    pub mean_sleep_s: f64,
    pub std_sleep_s: f64,
    /// Size of each task's input and of its output.
    pub payload_bytes: u64,
    pub queue: QueueChoice,
    /// `None` turns proxying off.
    pub proxy_threshold: Option<u64>,
    pub seed: u64,
    pub executor: ExecutorChoice,
}

impl BenchConfig {
    /// A config with the large-task defaults: 10 s mean, 1 s standard
    /// deviation, 10 MB payloads.
    pub fn new(workers: usize, total_tasks: usize) -> Self {
        BenchConfig {
            workers,
            total_tasks,
            mean_sleep_s: 10.0,
            std_sleep_s: 1.0,
            payload_bytes: 10_000_000,
            queue: QueueChoice::Inproc,
            proxy_threshold: Some(DEFAULT_THRESHOLD_BYTES),
            seed: 0,
            executor: ExecutorChoice::Local,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.to_owned()));
        if self.workers == 0 {
            return bad("workers must be positive");
        }
        if self.total_tasks < self.workers {
            return bad("total_tasks must be at least workers");
        }
        for (name, x) in [("mean_sleep_s", self.mean_sleep_s), ("std_sleep_s", self.std_sleep_s)] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(BenchError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// One completed task paired with the task submitted in response to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub prev_task_id: String,
    pub next_task_id: String,
    #[serde(flatten)]
    pub latency: LatencyBreakdown,
    /// Successor compute start minus predecessor compute end (wall clock).
    pub gap_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl Summary {
    /// Nearest-rank percentiles; an empty input gives all zeros.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut xs: Vec<f64> = values.into_iter().collect();
        if xs.is_empty() {
            return Summary::default();
        }
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        let rank = |q: f64| xs[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        let median = if n % 2 == 1 {
            xs[n / 2]
        } else {
            0.5 * (xs[n / 2 - 1] + xs[n / 2])
        };
        Summary {
            count: n,
            mean: xs.iter().sum::<f64>() / n as f64,
            median,
            p95: rank(0.95),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub reaction: Summary,
    pub decision: Summary,
    pub dispatch: Summary,
    pub compute: Summary,
}

impl Aggregates {
    pub fn of(rows: &[LatencyRow]) -> Self {
        let pick = |f: fn(&LatencyBreakdown) -> f64| Summary::of(rows.iter().map(|r| f(&r.latency)));
        Aggregates {
            reaction: pick(|l| l.reaction_s),
            decision: pick(|l| l.decision_s),
            dispatch: pick(|l| l.dispatch_s),
            compute: pick(|l| l.compute_s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    /// A task submitted with no completion attached (the initial batch).
    Submit,
    /// A completion and the successor submitted in response, observed as
    /// one steering action.
    Resubmit,
    /// A completion with no successor (the drain).
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Seconds since the run started.
    pub t: f64,
    pub kind: TraceKind,
    /// The submitted task for `submit`/`resubmit`, the completed one
    /// otherwise.
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_id: Option<String>,
    pub in_flight_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub task_id: String,
    pub category: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub v: u64,
    pub config: BenchConfig,
    pub latencies: Vec<LatencyRow>,
    pub aggregates: Aggregates,
    /// Completed tasks per second, first submission to last completion.
    pub task_rate: f64,
    pub elapsed_s: f64,
    pub submitted: usize,
    pub completed: usize,
    pub in_flight: Vec<TraceEvent>,
    /// Encoded size of the first result record the steering side received.
    pub sample_result_bytes: Option<u64>,
    pub redispatches: u64,
    pub failures: Vec<FailureRow>,
    /// Set when a task failure stopped the run early.
    pub aborted: Option<String>,
}

impl BenchReport {
    pub fn is_clean(&self) -> bool {
        self.aborted.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes the whole report as JSON, or just the latency table as CSV.
pub fn emit_report(report: &BenchReport, format: ReportFormat, path: &Path) -> Result<(), BenchError> {
    let file = File::create(path)?;
    match format {
        ReportFormat::Json => {
            let mut w = BufWriter::new(file);
            serde_json::to_writer_pretty(&mut w, report)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(file);
            w.write_record(["reaction_s", "decision_s", "dispatch_s", "compute_s"])?;
            for row in &report.latencies {
                let l = &row.latency;
                w.write_record(
                    [l.reaction_s, l.decision_s, l.dispatch_s, l.compute_s].map(|x| x.to_string()),
                )?;
            }
            w.flush()?;
        }
    }
    Ok(())
}
