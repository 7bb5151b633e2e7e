//! Two-clock timestamp ledger.
//!
//! Every stamp carries a wall-clock reading (seconds since the Unix epoch)
//! and a process-local monotonic reading (seconds since the process clock
//! anchor). The wall reading is derived from the monotonic clock plus the
//! wall time sampled once at the anchor, so within a single process both
//! members advance together and never step backwards. Wall readings from
//! different hosts remain comparable only as far as their clocks agree.

use std::fmt;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};

use super::RecordError;

struct ClockAnchor {
    wall: f64,
    instant: Instant,
}

static ANCHOR: Lazy<ClockAnchor> = Lazy::new(|| ClockAnchor {
    wall: SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0),
    instant: Instant::now(),
});

/// One reading of both clocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct Stamp {
    pub wall: f64,
    pub mono: f64,
}

impl Stamp {
    pub fn now() -> Self {
        let anchor = &*ANCHOR;
        let mono = anchor.instant.elapsed().as_secs_f64();
        Stamp {
            wall: anchor.wall + mono,
            mono,
        }
    }

    /// A stamp with identical wall and monotonic readings; handy for
    /// synthetic ledgers.
    pub fn at(seconds: f64) -> Self {
        Stamp {
            wall: seconds,
            mono: seconds,
        }
    }
}

impl From<(f64, f64)> for Stamp {
    fn from((wall, mono): (f64, f64)) -> Self {
        Stamp { wall, mono }
    }
}

impl From<Stamp> for (f64, f64) {
    fn from(s: Stamp) -> Self {
        (s.wall, s.mono)
    }
}

/// Named points in a task's life, in causal order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TimestampEvent {
    Created,
    InputSent,
    TaskReceivedByServer,
    ComputeStarted,
    ComputeEnded,
    ResultSent,
    ResultReceived,
    ResultProcessed,
}

impl TimestampEvent {
    pub const ALL: [TimestampEvent; 8] = [
        TimestampEvent::Created,
        TimestampEvent::InputSent,
        TimestampEvent::TaskReceivedByServer,
        TimestampEvent::ComputeStarted,
        TimestampEvent::ComputeEnded,
        TimestampEvent::ResultSent,
        TimestampEvent::ResultReceived,
        TimestampEvent::ResultProcessed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TimestampEvent::Created => "created",
            TimestampEvent::InputSent => "input_sent",
            TimestampEvent::TaskReceivedByServer => "task_received_by_server",
            TimestampEvent::ComputeStarted => "compute_started",
            TimestampEvent::ComputeEnded => "compute_ended",
            TimestampEvent::ResultSent => "result_sent",
            TimestampEvent::ResultReceived => "result_received",
            TimestampEvent::ResultProcessed => "result_processed",
        }
    }
}

impl fmt::Display for TimestampEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TimestampEvent {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TimestampEvent::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| RecordError::UnknownTimestamp(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimestampLedger {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<Stamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_sent: Option<Stamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_received_by_server: Option<Stamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute_started: Option<Stamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute_ended: Option<Stamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_sent: Option<Stamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_received: Option<Stamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_processed: Option<Stamp>,
}

impl TimestampLedger {
    /// A ledger with `created` stamped now.
    pub fn started() -> Self {
        TimestampLedger {
            created: Some(Stamp::now()),
            ..Default::default()
        }
    }

    fn slot(&mut self, event: TimestampEvent) -> &mut Option<Stamp> {
        match event {
            TimestampEvent::Created => &mut self.created,
            TimestampEvent::InputSent => &mut self.input_sent,
            TimestampEvent::TaskReceivedByServer => &mut self.task_received_by_server,
            TimestampEvent::ComputeStarted => &mut self.compute_started,
            TimestampEvent::ComputeEnded => &mut self.compute_ended,
            TimestampEvent::ResultSent => &mut self.result_sent,
            TimestampEvent::ResultReceived => &mut self.result_received,
            TimestampEvent::ResultProcessed => &mut self.result_processed,
        }
    }

    pub fn get(&self, event: TimestampEvent) -> Option<Stamp> {
        match event {
            TimestampEvent::Created => self.created,
            TimestampEvent::InputSent => self.input_sent,
            TimestampEvent::TaskReceivedByServer => self.task_received_by_server,
            TimestampEvent::ComputeStarted => self.compute_started,
            TimestampEvent::ComputeEnded => self.compute_ended,
            TimestampEvent::ResultSent => self.result_sent,
            TimestampEvent::ResultReceived => self.result_received,
            TimestampEvent::ResultProcessed => self.result_processed,
        }
    }

    pub(crate) fn require(&self, event: TimestampEvent) -> Result<Stamp, RecordError> {
        self.get(event).ok_or(RecordError::IncompleteRecord(event))
    }

    /// Records `stamp` for `event`. Each event may be set once.
    pub fn set(&mut self, event: TimestampEvent, stamp: Stamp) -> Result<(), RecordError> {
        let slot = self.slot(event);
        if slot.is_some() {
            return Err(RecordError::TimestampAlreadySet(event));
        }
        *slot = Some(stamp);
        Ok(())
    }

    pub fn mark(&mut self, event: TimestampEvent) -> Result<Stamp, RecordError> {
        let now = Stamp::now();
        self.set(event, now)?;
        Ok(now)
    }

    /// Clears an event so a retried task can be stamped again.
    pub(crate) fn clear(&mut self, event: TimestampEvent) {
        *self.slot(event) = None;
    }
}
