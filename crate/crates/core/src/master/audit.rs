//! Master transition log. Every entry is also emitted as one JSON line on the
//! `churncomm::audit` log target.

use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::Serialize;

/// Major operations. At most one is active at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MajorOp {
    AcceptPeers,
    SyncSharedState,
    Collectives,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    Join { peer: u64, endpoint: String },
    Leave { peer: u64, reason: String },
    Begin { op: MajorOp, tid: u64 },
    End { op: MajorOp, tid: u64 },
    State { conn_state: String },
    Commit { tid: u64, kind: String, voters: usize, yes: usize, detail: String },
    Abort { tid: u64, kind: String, reason: String },
    Reject { peer: u64, reason: String },
    PendingAnswer { round: u64, pending: bool, peers: usize },
    Ring { order: Vec<u64>, cost: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub unix_ms: u128,
    #[serde(flatten)]
    pub event: AuditEvent,
}

/// Shared append-only log.
#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    inner: Arc<Mutex<Vec<AuditRecord>>>,
}

impl AuditLog {
    pub fn record(&self, event: AuditEvent) {
        let mut v = self.inner.lock().unwrap();
        let rec = AuditRecord {
            seq: v.len() as u64,
            unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
            event,
        };
        if let Ok(line) = serde_json::to_string(&rec) {
            info!(target: "churncomm::audit", "{line}");
        }
        v.push(rec);
    }

    pub fn snapshot(&self) -> Vec<AuditRecord> {
        self.inner.lock().unwrap().clone()
    }
}

/// Checks the log for overlapping major operations and for commits with
/// fewer yes votes than voters. Returns the first violation found.
pub fn check(records: &[AuditRecord]) -> Result<(), String> {
    let mut active: Option<(MajorOp, u64)> = None;
    for r in records {
        match &r.event {
            AuditEvent::Begin { op, tid } => {
                if let Some((a, t)) = active {
                    return Err(format!("record {}: {op:?}/{tid} begins while {a:?}/{t} is active", r.seq));
                }
                active = Some((*op, *tid));
            }
            AuditEvent::End { op, tid } => match active {
                Some((a, t)) if a == *op && t == *tid => active = None,
                other => return Err(format!("record {}: end of {op:?}/{tid} but active is {other:?}", r.seq)),
            },
            AuditEvent::Commit { voters, yes, tid, .. } if yes < voters => {
                return Err(format!("record {}: commit {tid} with {yes}/{voters} yes votes", r.seq));
            }
            _ => {}
        }
    }
    Ok(())
}
