//! Line-oriented trace files.
//!
//! Grammar: one event per line, `<executable> <block_index> [<think_time_us>]`.
//! Blank lines and `#` comments are ignored. All lines must name the same
//! executable.

use super::{BlockIndex, Trace, TraceEvent};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("empty trace")]
    Empty,
    #[error("line {line}: expected `<executable> <block_index> [<think_time_us>]`, got {got:?}")]
    Malformed { line: usize, got: String },
    #[error("line {line}: bad block index {value:?}")]
    BadIndex { line: usize, value: String },
    #[error("line {line}: bad think time {value:?}")]
    BadThinkTime { line: usize, value: String },
    #[error("line {line}: executable {found:?} does not match {expected:?}")]
    MixedExecutables {
        line: usize,
        expected: String,
        found: String,
    },
}

pub fn parse_trace(text: &str) -> Result<Trace, TraceError> {
    let mut executable: Option<String> = None;
    let mut events = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let exe = fields.next().unwrap(); // non-empty line has at least one field
        let index_field = fields.next().ok_or_else(|| TraceError::Malformed {
            line: line_no,
            got: raw.to_string(),
        })?;
        let think_field = fields.next();
        if fields.next().is_some() {
            return Err(TraceError::Malformed {
                line: line_no,
                got: raw.to_string(),
            });
        }

        // A leading sign is rejected outright: indices are non-negative.
        let block: u32 = if index_field.starts_with('-') || index_field.starts_with('+') {
            return Err(TraceError::BadIndex {
                line: line_no,
                value: index_field.to_string(),
            });
        } else {
            index_field.parse().map_err(|_| TraceError::BadIndex {
                line: line_no,
                value: index_field.to_string(),
            })?
        };

        let think_time_us: u64 = match think_field {
            None => 0,
            Some(t) => t.parse().map_err(|_| TraceError::BadThinkTime {
                line: line_no,
                value: t.to_string(),
            })?,
        };

        match &executable {
            None => executable = Some(exe.to_string()),
            Some(e) if e != exe => {
                return Err(TraceError::MixedExecutables {
                    line: line_no,
                    expected: e.clone(),
                    found: exe.to_string(),
                })
            }
            Some(_) => {}
        }
        events.push(TraceEvent {
            block: BlockIndex(block),
            think_time_us,
        });
    }

    match executable {
        None => Err(TraceError::Empty),
        Some(executable) => Ok(Trace { executable, events }),
    }
}

/// Inverse of [`parse_trace`]: `parse_trace(&format_trace(t)) == t`.
pub fn format_trace(trace: &Trace) -> String {
    let mut out = String::new();
    for ev in &trace.events {
        let _ = writeln!(
            out,
            "{} {} {}",
            trace.executable, ev.block.0, ev.think_time_us
        );
    }
    out
}
