//! Canonical record envelope: a UTF-8 JSON object carrying `"v":1` next to
//! the record fields. Binary values are base64 strings inside it.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{RecordError, ResultRecord};

pub const ENVELOPE_VERSION: u64 = 1;

#[derive(Serialize)]
struct EnvelopeRef<'a> {
    v: u64,
    #[serde(flatten)]
    record: &'a ResultRecord,
}

#[derive(Deserialize)]
struct Envelope {
    v: u64,
    #[serde(flatten)]
    record: ResultRecord,
}

pub fn encode_record(record: &ResultRecord) -> Result<Vec<u8>, RecordError> {
    record.validate()?;
    serde_json::to_vec(&EnvelopeRef {
        v: ENVELOPE_VERSION,
        record,
    })
    .map_err(|e| RecordError::Inconsistent(e.to_string()))
}

/// Encodes `record`, adding the time spent encoding to
/// `time_costs.serialization_s` of the encoded copy. Returns the bytes and
/// the measured duration.
///
/// `time_costs` is the last field of the envelope and holds only numbers,
/// so it is re-rendered in place after timing the main encode.
pub fn encode_record_timed(record: &ResultRecord) -> Result<(Vec<u8>, f64), RecordError> {
    let start = Instant::now();
    let mut bytes = encode_record(record)?;
    let elapsed = start.elapsed().as_secs_f64();
    let marker = br#","time_costs":"#;
    let pos = bytes
        .windows(marker.len())
        .rposition(|w| w == marker)
        .ok_or_else(|| RecordError::Inconsistent("envelope without time_costs".into()))?;
    bytes.truncate(pos + marker.len());
    let mut costs = record.time_costs;
    costs.serialization_s += elapsed;
    serde_json::to_writer(&mut bytes, &costs)
        .map_err(|e| RecordError::Inconsistent(e.to_string()))?;
    bytes.push(b'}');
    Ok((bytes, elapsed))
}

/// Decodes and adds the decode time to `time_costs.deserialization_s`.
pub fn decode_record_timed(bytes: &[u8]) -> Result<ResultRecord, RecordError> {
    let start = Instant::now();
    let mut record = decode_record(bytes)?;
    record.time_costs.deserialization_s += start.elapsed().as_secs_f64();
    Ok(record)
}

pub fn decode_record(bytes: &[u8]) -> Result<ResultRecord, RecordError> {
    let env: Envelope = serde_json::from_slice(bytes).map_err(|e| decode_error(bytes, &e))?;
    if env.v != ENVELOPE_VERSION {
        return Err(RecordError::UnsupportedVersion(env.v));
    }
    env.record.validate()?;
    Ok(env.record)
}

pub(crate) fn decode_error(bytes: &[u8], err: &serde_json::Error) -> RecordError {
    RecordError::Decode {
        offset: byte_offset(bytes, err.line(), err.column()),
        message: err.to_string(),
    }
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let line_start = if line <= 1 {
        0
    } else {
        bytes
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == b'\n')
            .nth(line - 2)
            .map(|(i, _)| i + 1)
            .unwrap_or(bytes.len())
    };
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{new_task_request, TaskRequest, Value};

    #[test]
    fn envelope_carries_version() {
        let r = new_task_request(TaskRequest::new("add")).unwrap();
        let bytes = encode_record(&r).unwrap();
        let json: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(json["v"], 1);
        assert_eq!(json["method"], "add");
    }

    #[test]
    fn pending_round_trip() {
        let r = new_task_request(TaskRequest::new("add").arg(1i64).arg(2i64)).unwrap();
        assert_eq!(decode_record(&encode_record(&r).unwrap()).unwrap(), r);
    }

    #[test]
    fn mebibyte_value_round_trip() {
        let mut r = new_task_request(TaskRequest::new("blob")).unwrap();
        let payload: Vec<u8> = (0..1 << 20).map(|i| (i * 31 % 251) as u8).collect();
        r.set_result(Value::Bytes(payload.clone()));
        let back = decode_record(&encode_record(&r).unwrap()).unwrap();
        assert_eq!(back.value.unwrap().as_bytes().unwrap(), &payload[..]);
    }

    #[test]
    fn truncated_buffer_reports_offset() {
        let r = new_task_request(TaskRequest::new("add")).unwrap();
        let bytes = encode_record(&r).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        match decode_record(cut) {
            Err(RecordError::Decode { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let r = new_task_request(TaskRequest::new("add")).unwrap();
        let mut json: serde_json::Value = serde_json::from_slice(&encode_record(&r).unwrap()).unwrap();
        json["v"] = 2.into();
        let bytes = serde_json::to_vec(&json).unwrap();
        assert_eq!(decode_record(&bytes), Err(RecordError::UnsupportedVersion(2)));
    }

    #[test]
    fn timed_encode_patches_costs() {
        let mut r = new_task_request(TaskRequest::new("add").arg(Value::Str("time_costs".into()))).unwrap();
        r.time_costs.serialization_s = 1.0;
        let (bytes, dt) = encode_record_timed(&r).unwrap();
        let back = decode_record_timed(&bytes).unwrap();
        assert!(dt >= 0.0);
        assert_eq!(back.time_costs.serialization_s, 1.0 + dt);
        assert!(back.time_costs.deserialization_s > 0.0);
        assert_eq!(back.args, r.args);
    }

    #[test]
    fn offsets_count_lines() {
        assert_eq!(byte_offset(b"ab\ncd", 2, 2), 4);
        assert_eq!(byte_offset(b"abc", 1, 3), 2);
    }
}
