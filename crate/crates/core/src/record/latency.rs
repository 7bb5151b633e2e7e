use serde::{Deserialize, Serialize};

use super::{RecordError, ResultRecord, TimestampEvent};

/// Latency decomposition for one completed task and the task submitted in
/// response to it.
///
/// `reaction_s + decision_s + dispatch_s` spans from the predecessor's
/// compute end to the successor's compute start. These three terms are
/// taken from the wall member of each stamp so that they add up exactly;
/// `compute_s` and `round_trip_s` lie inside one process and use the
/// monotonic member.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub reaction_s: f64,
    pub decision_s: f64,
    pub dispatch_s: f64,
    pub compute_s: f64,
    pub round_trip_s: f64,
    /// Set when a negative interval (clock skew between hosts) was clamped
    /// to zero.
    #[serde(default)]
    pub skew_clamped: bool,
}

impl LatencyBreakdown {
    pub fn total_s(&self) -> f64 {
        self.reaction_s + self.decision_s + self.dispatch_s
    }
}

pub fn compute_latencies(
    prev: &ResultRecord,
    next: &ResultRecord,
) -> Result<LatencyBreakdown, RecordError> {
    let p = &prev.timestamps;
    let n = &next.timestamps;
    let prev_created = p.require(TimestampEvent::Created)?;
    let prev_started = p.require(TimestampEvent::ComputeStarted)?;
    let prev_ended = p.require(TimestampEvent::ComputeEnded)?;
    let prev_received = p.require(TimestampEvent::ResultReceived)?;
    let next_created = n.require(TimestampEvent::Created)?;
    let next_started = n.require(TimestampEvent::ComputeStarted)?;

    let mut skew = false;
    let mut clamp = |dt: f64| {
        if dt < 0.0 {
            skew = true;
            0.0
        } else {
            dt
        }
    };
    let reaction_s = clamp(prev_received.wall - prev_ended.wall);
    let decision_s = clamp(next_created.wall - prev_received.wall);
    let dispatch_s = clamp(next_started.wall - next_created.wall);
    let compute_s = (prev_ended.mono - prev_started.mono).max(0.0);
    let round_trip_s = (prev_received.mono - prev_created.mono).max(0.0);

    Ok(LatencyBreakdown {
        reaction_s,
        decision_s,
        dispatch_s,
        compute_s,
        round_trip_s,
        skew_clamped: skew,
    })
}
