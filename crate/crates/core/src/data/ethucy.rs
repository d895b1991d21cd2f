//! Whitespace-separated `frame agent_id x y` trajectory files.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed position of one agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub frame: i64,
    pub agent_id: i64,
    pub x: f64,
    pub y: f64,
}

fn integral(field: &str, value: f64, line: usize) -> Result<i64> {
    if value.fract() != 0.0 || !value.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("{field} must be an integer, got {value}"),
        });
    }
    Ok(value as i64)
}

/// Parses a trajectory file. Records come back sorted by `(agent_id, frame)`.
///
/// Frames of each agent must increase strictly in file order.
pub fn parse_ethucy(text: &str) -> Result<Vec<RawRecord>> {
    let mut records = Vec::new();
    let mut last_frame: HashMap<i64, i64> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected at least 4 fields, got {}", fields.len()),
            });
        }
        let mut nums = [0f64; 4];
        for (slot, field) in nums.iter_mut().zip(&fields) {
            *slot = field.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("`{field}` is not a number"),
            })?;
        }
        let frame = integral("frame", nums[0], line)?;
        let agent_id = integral("agent id", nums[1], line)?;
        if !nums[2].is_finite() || !nums[3].is_finite() {
            return Err(Error::Parse {
                line,
                message: "non-finite coordinate".into(),
            });
        }
        if let Some(&prev) = last_frame.get(&agent_id) {
            if frame <= prev {
                return Err(Error::Data(format!(
                    "line {line}: agent {agent_id} frame {frame} does not follow frame {prev}"
                )));
            }
        }
        last_frame.insert(agent_id, frame);
        records.push(RawRecord {
            frame,
            agent_id,
            x: nums[2],
            y: nums[3],
        });
    }
    records.sort_by_key(|r| (r.agent_id, r.frame));
    Ok(records)
}

/// Serializes records frame-major, one per line.
pub fn write_ethucy(records: &[RawRecord]) -> String {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.frame, r.agent_id));
    let mut out = String::new();
    for r in &sorted {
        writeln!(out, "{} {} {} {}", r.frame, r.agent_id, r.x, r.y).unwrap();
    }
    out
}
