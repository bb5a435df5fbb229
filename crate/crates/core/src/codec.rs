//! Canonical line-delimited JSON encoding for trajectories.
//!
//! Each record is one JSON object with lexicographically sorted keys and a
//! `"vdr_schema": 1` field. Encoding is byte-stable: `encode(decode(encode(t)))`
//! equals `encode(t)`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::model::{InvariantViolation, Trajectory};

pub const SCHEMA_KEY: &str = "vdr_schema";
pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeError {
    Malformed(String),
    UnsupportedSchema(Option<u64>),
    Invariant(InvariantViolation),
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::Malformed(e) => write!(f, "malformed record: {e}"),
            DecodeError::UnsupportedSchema(v) => write!(f, "unsupported schema version {v:?}"),
            DecodeError::Invariant(v) => write!(f, "{v}"),
        }
    }
}

impl core::error::Error for DecodeError {}

/// Rebuilds every object with keys inserted in sorted order, independent of
/// whether `serde_json` preserves insertion order.
pub fn canonicalize(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut out = Map::new();
            for (k, v) in entries {
                out.insert(k, canonicalize(v));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

/// Serializes any record with sorted keys and the schema tag, without a trailing newline.
pub fn encode_record<T: Serialize>(record: &T) -> Vec<u8> {
    let mut value = serde_json::to_value(record).unwrap_or(Value::Null);
    if let Value::Object(map) = &mut value {
        map.insert(SCHEMA_KEY.into(), Value::from(SCHEMA_VERSION));
    }
    serde_json::to_vec(&canonicalize(value)).unwrap_or_default()
}

/// Parses a schema-tagged record.
pub fn decode_record<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, DecodeError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let Value::Object(mut map) = value else {
        return Err(DecodeError::Malformed("record is not an object".into()));
    };
    match map.remove(SCHEMA_KEY).and_then(|v| v.as_u64()) {
        Some(SCHEMA_VERSION) => {}
        other => return Err(DecodeError::UnsupportedSchema(other)),
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| DecodeError::Malformed(e.to_string()))
}

pub fn encode_trajectory(trajectory: &Trajectory) -> Vec<u8> {
    encode_record(trajectory)
}

/// Decodes one record and checks every trajectory invariant.
pub fn decode_trajectory(bytes: &[u8]) -> Result<Trajectory, DecodeError> {
    let t: Trajectory = decode_record(bytes)?;
    t.validate().map_err(DecodeError::Invariant)?;
    Ok(t)
}

/// One record per line, each terminated by `\n`.
pub fn encode_lines<'a, I>(trajectories: I) -> Vec<u8>
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    let mut out = Vec::new();
    for t in trajectories {
        out.extend_from_slice(&encode_trajectory(t));
        out.push(b'\n');
    }
    out
}

/// Decodes a JSONL document, skipping blank lines. Errors carry the 1-based line number.
pub fn decode_lines(bytes: &[u8]) -> Result<Vec<Trajectory>, (usize, DecodeError)> {
    bytes
        .split(|b| *b == b'\n')
        .enumerate()
        .filter(|(_, line)| !line.iter().all(|b| b.is_ascii_whitespace()))
        .map(|(i, line)| decode_trajectory(line).map_err(|e| (i + 1, e)))
        .collect()
}
