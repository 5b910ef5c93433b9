use serde::Serialize;

use super::hash::simplehash;
use crate::types::Dtype;
use crate::wire::EntryReport;

/// One keyed, caller-owned buffer that must stay identical across peers.
#[derive(Debug)]
pub struct SharedStateEntry<'a> {
    pub key: String,
    pub dtype: Dtype,
    pub data: &'a mut [u8],
    pub revision: u64,
}

impl SharedStateEntry<'_> {
    pub fn hash(&self) -> u64 {
        simplehash(self.data)
    }

    pub fn report(&self) -> EntryReport {
        EntryReport {
            key: self.key.clone(),
            dtype: self.dtype,
            byte_len: self.data.len() as u64,
            revision: self.revision,
            hash: self.hash(),
        }
    }
}

/// The set of entries registered for one sync call.
#[derive(Debug, Default)]
pub struct SharedState<'a> {
    pub entries: Vec<SharedStateEntry<'a>>,
}

impl<'a> SharedState<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_bytes(&mut self, key: &str, dtype: Dtype, data: &'a mut [u8], revision: u64) -> &mut Self {
        assert!(
            data.len() % dtype.size() == 0,
            "entry {key:?}: {} bytes is not a whole number of {dtype:?}",
            data.len()
        );
        assert!(self.entries.iter().all(|e| e.key != key), "duplicate shared-state key {key:?}");
        self.entries.push(SharedStateEntry {
            key: key.to_string(),
            dtype,
            data,
            revision,
        });
        self
    }

    pub fn push_f32(&mut self, key: &str, data: &'a mut [f32], revision: u64) -> &mut Self {
        self.push_bytes(key, Dtype::F32, bytemuck::cast_slice_mut(data), revision)
    }

    pub fn push_f64(&mut self, key: &str, data: &'a mut [f64], revision: u64) -> &mut Self {
        self.push_bytes(key, Dtype::F64, bytemuck::cast_slice_mut(data), revision)
    }

    pub fn get(&self, key: &str) -> Option<&SharedStateEntry<'a>> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut SharedStateEntry<'a>> {
        self.entries.iter_mut().find(|e| e.key == key)
    }

    pub fn revision(&self, key: &str) -> Option<u64> {
        self.get(key).map(|e| e.revision)
    }

    /// Highest revision over all entries (0 when empty).
    pub fn max_revision(&self) -> u64 {
        self.entries.iter().map(|e| e.revision).max().unwrap_or(0)
    }

    pub fn set_revision(&mut self, revision: u64) {
        for e in &mut self.entries {
            e.revision = revision;
        }
    }

    pub fn reports(&self) -> Vec<EntryReport> {
        self.entries.iter().map(|e| e.report()).collect()
    }

    pub fn digest(&self) -> StateDigest {
        StateDigest {
            entries: self
                .entries
                .iter()
                .map(|e| DigestEntry {
                    key: e.key.clone(),
                    revision: e.revision,
                    hash: e.hash(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
pub struct DigestEntry {
    pub key: String,
    pub revision: u64,
    pub hash: u64,
}

/// (key, revision, hash) for every entry. Equal iff all triples match.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, serde::Deserialize)]
pub struct StateDigest {
    pub entries: Vec<DigestEntry>,
}

impl StateDigest {
    /// Single value summarizing the digest, for compact logs.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for e in &self.entries {
            bytes.extend_from_slice(e.key.as_bytes());
            bytes.push(0);
            bytes.extend_from_slice(&e.revision.to_le_bytes());
            bytes.extend_from_slice(&e.hash.to_le_bytes());
        }
        simplehash(&bytes)
    }
}
