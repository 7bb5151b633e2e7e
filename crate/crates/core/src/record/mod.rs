//! Task records: the single structure that carries a task from request,
//! through execution, back to the steering process.

mod codec;
mod latency;
mod timestamps;
mod value;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

pub use codec::{
    decode_record, decode_record_timed, encode_record, encode_record_timed, ENVELOPE_VERSION,
};
pub use latency::{compute_latencies, LatencyBreakdown};
pub use timestamps::{Stamp, TimestampEvent, TimestampLedger};
pub use value::Value;

pub const DEFAULT_TOPIC: &str = "default";
pub const DEFAULT_POOL: &str = "default";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown timestamp field {0:?}")]
    UnknownTimestamp(String),
    #[error("timestamp {0} is already set")]
    TimestampAlreadySet(TimestampEvent),
    #[error("record is missing timestamp {0}")]
    IncompleteRecord(TimestampEvent),
    #[error("decode error at byte {offset}: {message}")]
    Decode { offset: usize, message: String },
    #[error("unsupported envelope version {0}")]
    UnsupportedVersion(u64),
    #[error("inconsistent record: {0}")]
    Inconsistent(String),
}

/// Resources a task asks for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceSpec {
    pub node_count: u32,
    pub cpu_processes: u32,
    pub pool: String,
}

impl Default for ResourceSpec {
    fn default() -> Self {
        ResourceSpec {
            node_count: 1,
            cpu_processes: 1,
            pool: DEFAULT_POOL.to_owned(),
        }
    }
}

impl ResourceSpec {
    pub fn validate(&self) -> Result<(), RecordError> {
        if self.node_count == 0 || self.cpu_processes == 0 {
            return Err(RecordError::InvalidArgument(
                "resource counts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    #[default]
    Pending,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureCategory {
    /// The task body returned an error or panicked.
    TaskError,
    MethodNotFound,
    /// A proxied input could not be resolved.
    DataUnavailable,
    /// The worker running the task disappeared, twice.
    WorkerLost,
    /// The server stopped before the task completed.
    ServerShutdown,
}

impl fmt::Display for FailureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FailureCategory::TaskError => "task-error",
            FailureCategory::MethodNotFound => "method-not-found",
            FailureCategory::DataUnavailable => "data-unavailable",
            FailureCategory::WorkerLost => "worker-lost",
            FailureCategory::ServerShutdown => "server-shutdown",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureInfo {
    pub category: FailureCategory,
    pub message: String,
}

/// Measured durations, in seconds. Serialization costs accumulate across
/// every hop the record makes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeCosts {
    pub serialization_s: f64,
    pub deserialization_s: f64,
    pub proxy_resolve_s: f64,
    pub running_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub task_id: String,
    pub method: String,
    #[serde(default = "default_topic")]
    pub topic: String,
    #[serde(default)]
    pub args: Vec<Value>,
    #[serde(default)]
    pub kwargs: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    #[serde(default)]
    pub success: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_info: Option<FailureInfo>,
    #[serde(default)]
    pub task_info: BTreeMap<String, Value>,
    #[serde(default)]
    pub resources: ResourceSpec,
    #[serde(default)]
    pub timestamps: TimestampLedger,
    #[serde(default)]
    pub time_costs: TimeCosts,
}

fn default_topic() -> String {
    DEFAULT_TOPIC.to_owned()
}

/// Builder-style inputs for [`new_task_request`].
#[derive(Debug, Clone, Default)]
pub struct TaskRequest {
    pub method: String,
    pub args: Vec<Value>,
    pub kwargs: BTreeMap<String, Value>,
    pub topic: Option<String>,
    pub task_info: BTreeMap<String, Value>,
    pub resources: ResourceSpec,
}

impl TaskRequest {
    pub fn new(method: impl Into<String>) -> Self {
        TaskRequest {
            method: method.into(),
            ..Default::default()
        }
    }

    pub fn arg(mut self, v: impl Into<Value>) -> Self {
        self.args.push(v.into());
        self
    }

    pub fn args(mut self, args: impl IntoIterator<Item = Value>) -> Self {
        self.args.extend(args);
        self
    }

    pub fn kwarg(mut self, name: impl Into<String>, v: impl Into<Value>) -> Self {
        self.kwargs.insert(name.into(), v.into());
        self
    }

    pub fn topic(mut self, topic: impl Into<String>) -> Self {
        self.topic = Some(topic.into());
        self
    }

    pub fn info(mut self, name: impl Into<String>, v: impl Into<Value>) -> Self {
        self.task_info.insert(name.into(), v.into());
        self
    }

    pub fn resources(mut self, resources: ResourceSpec) -> Self {
        self.resources = resources;
        self
    }
}

/// Builds a pending record with a fresh v4 task id and `created` stamped.
pub fn new_task_request(request: TaskRequest) -> Result<ResultRecord, RecordError> {
    if request.method.is_empty() {
        return Err(RecordError::InvalidArgument("method name is empty".into()));
    }
    request.resources.validate()?;
    Ok(ResultRecord {
        task_id: Uuid::new_v4().to_string(),
        method: request.method,
        topic: request.topic.unwrap_or_else(default_topic),
        args: request.args,
        kwargs: request.kwargs,
        value: None,
        success: TaskStatus::Pending,
        failure_info: None,
        task_info: request.task_info,
        resources: request.resources,
        timestamps: TimestampLedger::started(),
        time_costs: TimeCosts::default(),
    })
}

impl ResultRecord {
    pub fn mark(&mut self, event: TimestampEvent) -> Result<Stamp, RecordError> {
        self.timestamps.mark(event)
    }

    /// Marks a timestamp given by field name.
    pub fn mark_named(&mut self, event: &str) -> Result<Stamp, RecordError> {
        self.mark(event.parse()?)
    }

    pub fn set_result(&mut self, value: Value) {
        self.value = Some(value);
        self.success = TaskStatus::Succeeded;
        self.failure_info = None;
    }

    pub fn set_failure(&mut self, category: FailureCategory, message: impl Into<String>) {
        self.value = None;
        self.success = TaskStatus::Failed;
        self.failure_info = Some(FailureInfo {
            category,
            message: message.into(),
        });
    }

    pub fn is_complete(&self) -> bool {
        self.success != TaskStatus::Pending
    }

    pub fn failure_category(&self) -> Option<FailureCategory> {
        self.failure_info.as_ref().map(|f| f.category)
    }

    /// Checks the status/value/failure consistency rules.
    pub fn validate(&self) -> Result<(), RecordError> {
        if self.method.is_empty() {
            return Err(RecordError::Inconsistent("empty method".into()));
        }
        self.resources.validate()?;
        match self.success {
            TaskStatus::Succeeded if self.value.is_none() || self.failure_info.is_some() => Err(
                RecordError::Inconsistent("succeeded record needs a value and no failure".into()),
            ),
            TaskStatus::Failed if self.value.is_some() || self.failure_info.is_none() => Err(
                RecordError::Inconsistent("failed record needs failure info and no value".into()),
            ),
            TaskStatus::Pending if self.failure_info.is_some() => Err(RecordError::Inconsistent(
                "pending record carries failure info".into(),
            )),
            _ => Ok(()),
        }
    }
}
