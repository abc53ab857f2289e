use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::triggers::InvocationReason;
use crate::types::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOutcome {
    Ok,
    Rejected,
    Fallback,
}

/// One tool call, rejection, or adapter fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: usize,
    pub invocation: usize,
    pub round: usize,
    pub task_index: usize,
    pub sim_time_ms: Millis,
    pub reason: InvocationReason,
    pub tool: String,
    pub arguments: Value,
    pub result: Value,
    pub state_delta: Value,
    pub outcome: AuditOutcome,
}

impl fmt::Display for AuditEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let line = serde_json::to_string(self).map_err(|_| fmt::Error)?;
        f.write_str(&line)
    }
}

/// Append-only audit trail. Entries can be read but never edited or removed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditLog {
    entries: Vec<AuditEntry>,
}

impl AuditLog {
    /// Appends an entry, assigning its sequence number.
    pub fn append(&mut self, mut entry: AuditEntry) -> usize {
        entry.seq = self.entries.len();
        self.entries.push(entry);
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Newline-delimited JSON, one entry per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}
