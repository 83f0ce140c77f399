use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::checkpoint::write_atomic;
use crate::model::AdapterWeights;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub domain: String,
    pub lr: Option<f64>,
    pub data_seed: Option<u64>,
    pub error: String,
}

/// Adapters keyed by content hash, iterated in id order.
#[derive(Clone, Debug)]
pub struct Registry<S> {
    adapters: BTreeMap<String, AdapterWeights<S>>,
    failures: Vec<JobFailure>,
}

impl<S: Scalar> Default for Registry<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Registry<S> {
    pub fn new() -> Self {
        Self {
            adapters: BTreeMap::new(),
            failures: Vec::new(),
        }
    }

    /// Adds an adapter under its content hash and returns the id.
    pub fn insert(&mut self, adapter: AdapterWeights<S>) -> String {
        let id = adapter.content_hash();
        self.adapters.insert(id.clone(), adapter);
        id
    }

    pub fn insert_with_id(&mut self, id: String, adapter: AdapterWeights<S>) {
        self.adapters.insert(id, adapter);
    }

    pub fn get(&self, id: &str) -> Option<&AdapterWeights<S>> {
        self.adapters.get(id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &AdapterWeights<S>)> {
        self.adapters.iter()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Ids of adapters trained on `domain`.
    pub fn ids_for_domain(&self, domain: &str) -> Vec<String> {
        self.iter()
            .filter(|(_, a)| a.meta.domain == domain)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn record_failure(&mut self, f: JobFailure) {
        self.failures.push(f);
    }

    pub fn failures(&self) -> &[JobFailure] {
        &self.failures
    }

    /// Hex SHA-256 over the sorted ids.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for id in self.adapters.keys() {
            h.update(id.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn index_records(&self, path_of: impl Fn(&str) -> String) -> Vec<IndexRecord> {
        self.iter()
            .map(|(id, a)| IndexRecord {
                id: id.clone(),
                path: path_of(id),
                domain: a.meta.domain.clone(),
                train: a.meta.train.clone(),
                init_seed: a.meta.init_seed,
                base_hash: a.meta.base_hash.clone(),
                final_loss: a.meta.final_loss,
            })
            .collect()
    }
}

/// One line of the registry index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub id: String,
    pub path: String,
    pub domain: String,
    pub train: Option<TrainConfig>,
    pub init_seed: u64,
    pub base_hash: String,
    pub final_loss: Option<f64>,
}

/// Replaces the index file atomically with one JSON record per line.
pub fn write_index(path: &Path, records: &[IndexRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_index(path: &Path) -> Result<Vec<IndexRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
