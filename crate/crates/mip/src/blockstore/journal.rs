use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BlockStore, BlockStoreError};

pub const JOURNAL_PATH: &str = "journal/sessions.jsonl";
const JOURNAL_HOLDER: &str = "journal-writer";

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal record has an empty {0}")]
    Incomplete(&'static str),
    #[error(transparent)]
    Store(#[from] BlockStoreError),
    #[error("journal line {line} does not parse: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// One user turn as stored in the platform's long-term storage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub session_id: String,
    pub request: String,
    pub response: String,
    pub intent: String,
    pub entity: String,
    pub trace_id: String,
    /// Milliseconds since the Unix epoch.
    pub ts: u64,
}

impl JournalRecord {
    pub fn validate(&self) -> Result<(), JournalError> {
        for (name, value) in [
            ("session_id", &self.session_id),
            ("request", &self.request),
            ("response", &self.response),
            ("intent", &self.intent),
            ("entity", &self.entity),
            ("trace_id", &self.trace_id),
        ] {
            if value.is_empty() {
                return Err(JournalError::Incomplete(name));
            }
        }
        Ok(())
    }
}

/// JSON Lines journal on top of the block store.
#[derive(Debug, Clone)]
pub struct Journal {
    store: Arc<BlockStore>,
    path: String,
}

impl Journal {
    pub fn new(store: Arc<BlockStore>) -> Self {
        Self::at(store, JOURNAL_PATH)
    }

    pub fn at(store: Arc<BlockStore>, path: impl Into<String>) -> Self {
        Self {
            store,
            path: path.into(),
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn store(&self) -> &Arc<BlockStore> {
        &self.store
    }

    pub fn journal_session(&self, record: &JournalRecord) -> Result<(), JournalError> {
        record.validate()?;
        let mut line = serde_json::to_vec(record).expect("record serializes");
        line.push(b'\n');
        self.store.append(&self.path, &line, JOURNAL_HOLDER)?;
        Ok(())
    }

    /// All records in append order; an absent journal is empty.
    pub fn records(&self) -> Result<Vec<JournalRecord>, JournalError> {
        let bytes = match self.store.read(&self.path) {
            Ok(bytes) => bytes,
            Err(BlockStoreError::NotFound(_)) => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        bytes
            .split(|b| *b == b'\n')
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_slice(l).map_err(|source| JournalError::Parse { line: i + 1, source }))
            .collect()
    }

    pub fn len(&self) -> Result<usize, JournalError> {
        self.records().map(|r| r.len())
    }

    pub fn is_empty(&self) -> Result<bool, JournalError> {
        self.len().map(|n| n == 0)
    }
}
