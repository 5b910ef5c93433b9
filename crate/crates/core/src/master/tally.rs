use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TallyOutcome {
    Pending,
    Commit,
    Abort,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TallyError {
    #[error("peer {0} is not an expected voter")]
    UnexpectedVoter(u64),
    #[error("peer {0} already voted")]
    DuplicateVote(u64),
}

/// Unanimous vote over a fixed voter set.
#[derive(Debug, Clone)]
pub struct VoteTally {
    pub tid: u64,
    expected: BTreeSet<u64>,
    received: BTreeMap<u64, bool>,
    aborted: bool,
}

impl VoteTally {
    pub fn new(tid: u64, expected: impl IntoIterator<Item = u64>) -> Self {
        Self {
            tid,
            expected: expected.into_iter().collect(),
            received: BTreeMap::new(),
            aborted: false,
        }
    }

    pub fn cast(&mut self, peer: u64, yes: bool) -> Result<TallyOutcome, TallyError> {
        if !self.expected.contains(&peer) {
            return Err(TallyError::UnexpectedVoter(peer));
        }
        if self.received.contains_key(&peer) {
            return Err(TallyError::DuplicateVote(peer));
        }
        self.received.insert(peer, yes);
        if !yes {
            self.aborted = true;
        }
        Ok(self.outcome())
    }

    /// A voter disappeared. Losing an expected voter aborts.
    pub fn voter_lost(&mut self, peer: u64) -> TallyOutcome {
        if self.expected.contains(&peer) {
            self.aborted = true;
        }
        self.outcome()
    }

    pub fn outcome(&self) -> TallyOutcome {
        if self.aborted {
            TallyOutcome::Abort
        } else if self.received.len() == self.expected.len() {
            TallyOutcome::Commit
        } else {
            TallyOutcome::Pending
        }
    }

    pub fn expected(&self) -> &BTreeSet<u64> {
        &self.expected
    }

    pub fn yes_count(&self) -> usize {
        self.received.values().filter(|&&y| y).count()
    }

    pub fn missing(&self) -> impl Iterator<Item = u64> + '_ {
        self.expected.iter().copied().filter(|p| !self.received.contains_key(p))
    }
}
