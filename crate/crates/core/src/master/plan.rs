//! Donor selection for shared-state sync.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::types::SyncStrategy;
use crate::wire::{EntryReport, Transfer};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerReport {
    pub peer: u64,
    pub strategy: SyncStrategy,
    pub entries: Vec<EntryReport>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("shared-state key set of peer {peer} differs from peer {reference}: {detail}")]
    KeySetMismatch { peer: u64, reference: u64, detail: String },
    #[error("no eligible donor for entry {key:?}")]
    NoEligibleDonor { key: String },
    #[error("entry {key:?}: donor revision {donor} is below revision {held} held by peer {peer}")]
    RevisionRegression { key: String, donor: u64, held: u64, peer: u64 },
    #[error("entry {key:?}: state (revision {revision}) does not continue the last committed revision {committed}")]
    ResumeMismatch { key: String, revision: u64, committed: u64 },
}

/// Last committed (revision, hash) per key.
pub type CommittedDigest = BTreeMap<String, (u64, u64)>;

fn shape(e: &EntryReport) -> (String, u8, u64) {
    (e.key.clone(), e.dtype.code(), e.byte_len)
}

/// Picks one donor per entry and lists the peers that must receive it.
///
/// Donor candidates: `SendOnly` peers if any reported that strategy,
/// otherwise every peer except `ReceiveOnly` ones. Only candidates at the
/// highest candidate revision stay in the race; among those the most
/// frequent hash wins (ties: smaller hash, then smaller peer id).
pub fn select_sync_plan(reports: &[PeerReport], committed: Option<&CommittedDigest>) -> Result<Vec<Transfer>, PlanError> {
    let Some(first) = reports.first() else {
        return Ok(Vec::new());
    };
    let reference: BTreeSet<_> = first.entries.iter().map(shape).collect();
    for r in reports {
        let mine: BTreeSet<_> = r.entries.iter().map(shape).collect();
        if mine != reference || mine.len() != r.entries.len() {
            let detail = match mine.symmetric_difference(&reference).next() {
                Some((k, _, len)) => format!("entry {k:?} ({len} bytes)"),
                None => "duplicate keys".into(),
            };
            return Err(PlanError::KeySetMismatch {
                peer: r.peer,
                reference: first.peer,
                detail,
            });
        }
    }

    let any_send_only = reports.iter().any(|r| r.strategy == SyncStrategy::SendOnly);
    let eligible = |r: &PeerReport| match r.strategy {
        SyncStrategy::SendOnly => true,
        SyncStrategy::EnforcePopular => !any_send_only,
        SyncStrategy::ReceiveOnly => false,
    };

    let mut plan = Vec::new();
    for entry in &first.entries {
        let key = &entry.key;
        let per_peer: Vec<(u64, &EntryReport, bool)> = reports
            .iter()
            .map(|r| (r.peer, r.entries.iter().find(|e| &e.key == key).expect("key sets equal"), eligible(r)))
            .collect();
        let top_rev = per_peer
            .iter()
            .filter(|(_, _, el)| *el)
            .map(|(_, e, _)| e.revision)
            .max()
            .ok_or_else(|| PlanError::NoEligibleDonor { key: key.clone() })?;
        let mut votes: BTreeMap<u64, (usize, u64)> = BTreeMap::new();
        for (peer, e, el) in &per_peer {
            if *el && e.revision == top_rev {
                let slot = votes.entry(e.hash).or_insert((0, *peer));
                slot.0 += 1;
                slot.1 = slot.1.min(*peer);
            }
        }
        // BTreeMap iterates hashes ascending, so max_by keeps the smallest on ties
        let (&hash, &(_, donor)) = votes
            .iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.0.cmp(a.0)))
            .expect("top revision has a candidate");

        if let Some(&(crev, chash)) = committed.and_then(|c| c.get(key)) {
            if top_rev < crev || (top_rev == crev && hash != chash) {
                return Err(PlanError::ResumeMismatch {
                    key: key.clone(),
                    revision: top_rev,
                    committed: crev,
                });
            }
        }

        let mut receivers = Vec::new();
        for (peer, e, _) in &per_peer {
            if (e.revision, e.hash) == (top_rev, hash) {
                continue;
            }
            if e.revision > top_rev {
                return Err(PlanError::RevisionRegression {
                    key: key.clone(),
                    donor: top_rev,
                    held: e.revision,
                    peer: *peer,
                });
            }
            receivers.push(*peer);
        }
        if !receivers.is_empty() {
            plan.push(Transfer {
                key: key.clone(),
                donor,
                revision: top_rev,
                hash,
                receivers,
            });
        }
    }
    Ok(plan)
}

/// The digest every peer holds once `plan` has been applied.
pub fn digest_after(reports: &[PeerReport], plan: &[Transfer]) -> CommittedDigest {
    let mut out = CommittedDigest::new();
    let Some(first) = reports.first() else {
        return out;
    };
    for e in &first.entries {
        let v = match plan.iter().find(|t| t.key == e.key) {
            Some(t) => (t.revision, t.hash),
            None => (e.revision, e.hash),
        };
        out.insert(e.key.clone(), v);
    }
    out
}
