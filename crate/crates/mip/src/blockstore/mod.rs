//! Miniature replicated block store with single-writer files.
//!
//! Files are split into fixed-size blocks, each stored on `replication`
//! distinct DataNodes chosen per block. A partial trailing block is never
//! modified in place: appending to it writes a new block (same pipeline) and
//! swaps it into the file on commit, so readers never observe half-written
//! data.

mod datanode;
mod journal;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SharedClock;
use datanode::DataNode;

pub use journal::{Journal, JournalError, JournalRecord, JOURNAL_PATH};

const MANIFEST: &str = "namespace.json";

#[derive(Debug, Error)]
pub enum BlockStoreError {
    #[error("{path} is leased to {holder}")]
    LeaseHeld { path: String, holder: String },
    #[error("need {needed} live datanodes, have {live}")]
    InsufficientNodes { live: usize, needed: usize },
    #[error("no such file {0}")]
    NotFound(String),
    #[error("{block} of {path} has no live replica")]
    Unavailable { path: String, block: BlockId },
    #[error("every live replica of {0} failed its checksum")]
    ChecksumMismatch(BlockId),
    #[error("unknown datanode {0}")]
    UnknownNode(String),
    #[error("write of {block} through {node} failed")]
    PipelineFailed { node: String, block: BlockId },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("namespace manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId(pub u64);

impl BlockId {
    fn file_name(self) -> String {
        format!("blk_{}", self.0)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blk_{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct BlockStoreConfig {
    pub datanodes: usize,
    pub replication: usize,
    pub block_size: usize,
    pub lease_ttl: Duration,
    /// Seeds pipeline placement and read replica choice.
    pub seed: u64,
}

impl Default for BlockStoreConfig {
    fn default() -> Self {
        Self {
            datanodes: 4,
            replication: 3,
            block_size: 4096,
            lease_ttl: Duration::from_secs(30),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub block_id: BlockId,
    pub seq: usize,
    pub len: usize,
    pub checksum: u32,
    pub pipeline: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub holder: String,
    pub expires_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub blocks: Vec<BlockInfo>,
    pub length: u64,
    pub writer_lease: Option<Lease>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    next_block: u64,
    files: Vec<FileEntry>,
}

#[derive(Debug, Default)]
struct Namespace {
    next_block: u64,
    files: BTreeMap<String, Arc<Mutex<FileEntry>>>,
}

pub struct BlockStore {
    config: BlockStoreConfig,
    clock: SharedClock,
    nodes: Vec<Arc<DataNode>>,
    namespace: Mutex<Namespace>,
    /// Last committed entry per file, the source of the on-disk manifest.
    committed: Mutex<BTreeMap<String, FileEntry>>,
    rng: Mutex<ChaCha8Rng>,
    root: Option<PathBuf>,
}

impl fmt::Debug for BlockStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlockStore")
            .field("config", &self.config)
            .field("root", &self.root)
            .finish_non_exhaustive()
    }
}

fn node_id(i: usize) -> String {
    format!("dn-{}", i + 1)
}

impl BlockStore {
    /// In-memory store.
    pub fn new(config: BlockStoreConfig, clock: SharedClock) -> Result<Self, BlockStoreError> {
        Self::build(config, clock, None)
    }

    /// Store persisted under `root`: one directory per DataNode holding
    /// `blk_<n>` files, plus `namespace.json`. Existing state is loaded.
    pub fn open(root: impl AsRef<Path>, config: BlockStoreConfig, clock: SharedClock) -> Result<Self, BlockStoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        Self::build(config, clock, Some(root))
    }

    fn build(config: BlockStoreConfig, clock: SharedClock, root: Option<PathBuf>) -> Result<Self, BlockStoreError> {
        if config.replication == 0 || config.block_size == 0 || config.datanodes == 0 {
            return Err(BlockStoreError::Config(
                "datanodes, replication and block_size must be positive".into(),
            ));
        }
        let nodes = (0..config.datanodes)
            .map(|i| {
                let id = node_id(i);
                let dir = root.as_ref().map(|r| r.join(&id));
                DataNode::new(id, dir).map(Arc::new)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut namespace = Namespace::default();
        let mut committed = BTreeMap::new();
        if let Some(root) = &root {
            let manifest_path = root.join(MANIFEST);
            if manifest_path.exists() {
                let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)
                    .map_err(|e| BlockStoreError::Manifest(e.to_string()))?;
                namespace.next_block = manifest.next_block;
                for file in manifest.files {
                    committed.insert(file.path.clone(), file.clone());
                    namespace.files.insert(file.path.clone(), Arc::new(Mutex::new(file)));
                }
            }
        }
        Ok(Self {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
            config,
            clock,
            nodes,
            namespace: Mutex::new(namespace),
            committed: Mutex::new(committed),
            root,
        })
    }

    pub fn config(&self) -> &BlockStoreConfig {
        &self.config
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.id.clone()).collect()
    }

    fn node(&self, id: &str) -> Result<&Arc<DataNode>, BlockStoreError> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| BlockStoreError::UnknownNode(id.to_string()))
    }

    pub fn set_node_alive(&self, node_id: &str, alive: bool) -> Result<(), BlockStoreError> {
        self.node(node_id)?.set_alive(alive);
        Ok(())
    }

    pub fn is_node_alive(&self, node_id: &str) -> Result<bool, BlockStoreError> {
        Ok(self.node(node_id)?.is_alive())
    }

    /// Fault hook: the node dies while storing its next replica.
    pub fn crash_on_next_write(&self, node_id: &str) -> Result<(), BlockStoreError> {
        self.node(node_id)?.arm_crash();
        Ok(())
    }

    /// Fault hook: flips a byte of the replica held by `node_id`.
    pub fn corrupt_replica(&self, node_id: &str, block: BlockId) -> Result<bool, BlockStoreError> {
        Ok(self.node(node_id)?.corrupt(block))
    }

    /// Block ids stored on each node (including stale replicas on dead nodes).
    pub fn node_holds(&self, node_id: &str, block: BlockId) -> Result<bool, BlockStoreError> {
        Ok(self.node(node_id)?.holds(block))
    }

    pub fn node_block_count(&self, node_id: &str) -> Result<usize, BlockStoreError> {
        Ok(self.node(node_id)?.block_count())
    }

    pub fn stat(&self, path: &str) -> Result<FileEntry, BlockStoreError> {
        Ok(self.file(path)?.lock().clone())
    }

    pub fn list(&self) -> Vec<String> {
        self.namespace.lock().files.keys().cloned().collect()
    }

    fn file(&self, path: &str) -> Result<Arc<Mutex<FileEntry>>, BlockStoreError> {
        self.namespace
            .lock()
            .files
            .get(path)
            .cloned()
            .ok_or_else(|| BlockStoreError::NotFound(path.to_string()))
    }

    fn live_nodes(&self) -> Vec<&Arc<DataNode>> {
        self.nodes.iter().filter(|n| n.is_alive()).collect()
    }

    fn pick_pipeline(&self) -> Result<Vec<String>, BlockStoreError> {
        let live = self.live_nodes();
        let needed = self.config.replication;
        if live.len() < needed {
            return Err(BlockStoreError::InsufficientNodes {
                live: live.len(),
                needed,
            });
        }
        let picks = rand::seq::index::sample(&mut *self.rng.lock(), live.len(), needed);
        Ok(picks.iter().map(|i| live[i].id.clone()).collect())
    }

    fn allocate_block(&self) -> BlockId {
        let mut ns = self.namespace.lock();
        ns.next_block += 1;
        BlockId(ns.next_block)
    }

    /// Appends `bytes` under the caller's writer lease, acquiring or renewing
    /// it. Returns the new file length. On error nothing is committed.
    pub fn append(&self, path: &str, bytes: &[u8], holder: &str) -> Result<u64, BlockStoreError> {
        let entry = {
            let mut ns = self.namespace.lock();
            Arc::clone(ns.files.entry(path.to_string()).or_insert_with(|| {
                Arc::new(Mutex::new(FileEntry {
                    path: path.to_string(),
                    blocks: Vec::new(),
                    length: 0,
                    writer_lease: None,
                }))
            }))
        };
        let mut file = entry.lock();
        let now_ms = self.clock.now_ms();
        if let Some(lease) = &file.writer_lease {
            if lease.holder != holder && lease.expires_ms > now_ms {
                return Err(BlockStoreError::LeaseHeld {
                    path: path.to_string(),
                    holder: lease.holder.clone(),
                });
            }
        }
        file.writer_lease = Some(Lease {
            holder: holder.to_string(),
            expires_ms: now_ms + self.config.lease_ttl.as_millis() as u64,
        });
        if bytes.is_empty() {
            return Ok(file.length);
        }

        let block_size = self.config.block_size;
        let mut staged: Vec<(BlockInfo, Vec<u8>)> = Vec::new();
        let mut replaces_last = false;
        let mut rest = bytes;

        if let Some(last) = file.blocks.last().filter(|b| b.len < block_size) {
            let pipeline_live = last
                .pipeline
                .iter()
                .all(|id| self.node(id).map(|n| n.is_alive()).unwrap_or(false));
            if pipeline_live {
                let mut data = self.read_block(path, last)?;
                let take = rest.len().min(block_size - data.len());
                data.extend_from_slice(&rest[..take]);
                rest = &rest[take..];
                staged.push((
                    BlockInfo {
                        block_id: self.allocate_block(),
                        seq: last.seq,
                        len: data.len(),
                        checksum: crc32fast::hash(&data),
                        pipeline: last.pipeline.clone(),
                    },
                    data,
                ));
                replaces_last = true;
            }
            // Otherwise the partial block is sealed as is and writing
            // continues in a fresh block on a live pipeline.
        }
        let mut seq = file.blocks.len();
        while !rest.is_empty() {
            let take = rest.len().min(block_size);
            let data = rest[..take].to_vec();
            rest = &rest[take..];
            staged.push((
                BlockInfo {
                    block_id: self.allocate_block(),
                    seq,
                    len: data.len(),
                    checksum: crc32fast::hash(&data),
                    pipeline: self.pick_pipeline()?,
                },
                data,
            ));
            seq += 1;
        }

        let mut written: Vec<(BlockId, String)> = Vec::new();
        for (info, data) in &staged {
            for id in &info.pipeline {
                let result = self.node(id).and_then(|n| n.write(info.block_id, data));
                if let Err(e) = result {
                    for (block, node) in &written {
                        if let Ok(n) = self.node(node) {
                            n.delete(*block);
                        }
                    }
                    tracing::warn!(path, error = %e, "append aborted");
                    return Err(e);
                }
                written.push((info.block_id, id.clone()));
            }
        }

        let mut new_file = file.clone();
        let mut superseded = None;
        for (i, (info, _)) in staged.into_iter().enumerate() {
            if i == 0 && replaces_last {
                superseded = new_file.blocks.pop();
            }
            new_file.blocks.push(info);
        }
        new_file.length += bytes.len() as u64;
        if let Err(e) = self.persist(&new_file) {
            for (block, node) in &written {
                if let Ok(n) = self.node(node) {
                    n.delete(*block);
                }
            }
            return Err(e);
        }
        *file = new_file;
        if let Some(old) = superseded {
            for id in &old.pipeline {
                if let Ok(n) = self.node(id) {
                    n.delete(old.block_id);
                }
            }
        }
        Ok(file.length)
    }

    pub fn release_lease(&self, path: &str, holder: &str) -> Result<(), BlockStoreError> {
        let entry = self.file(path)?;
        let mut file = entry.lock();
        if file.writer_lease.as_ref().is_some_and(|l| l.holder == holder) {
            file.writer_lease = None;
        }
        Ok(())
    }

    fn read_block(&self, path: &str, info: &BlockInfo) -> Result<Vec<u8>, BlockStoreError> {
        let mut holders: Vec<&Arc<DataNode>> = info
            .pipeline
            .iter()
            .filter_map(|id| self.node(id).ok())
            .filter(|n| n.is_alive())
            .collect();
        let mut corrupt = false;
        while !holders.is_empty() {
            let pick = self.rng.lock().random_range(0..holders.len());
            let node = holders.swap_remove(pick);
            match node.read(info.block_id) {
                Some(data) if crc32fast::hash(&data) == info.checksum => return Ok(data),
                Some(_) => {
                    tracing::warn!(node = %node.id, block = %info.block_id, "checksum mismatch");
                    corrupt = true;
                }
                None => {}
            }
        }
        if corrupt {
            Err(BlockStoreError::ChecksumMismatch(info.block_id))
        } else {
            Err(BlockStoreError::Unavailable {
                path: path.to_string(),
                block: info.block_id,
            })
        }
    }

    /// Reads the whole file, choosing a random live replica per block and
    /// falling back to the others when one is unreadable.
    pub fn read(&self, path: &str) -> Result<Vec<u8>, BlockStoreError> {
        let blocks = self.file(path)?.lock().blocks.clone();
        let mut out = Vec::new();
        for info in &blocks {
            out.extend(self.read_block(path, info)?);
        }
        Ok(out)
    }

    fn persist(&self, changed: &FileEntry) -> Result<(), BlockStoreError> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let next_block = self.namespace.lock().next_block;
        let mut committed = self.committed.lock();
        committed.insert(changed.path.clone(), changed.clone());
        let manifest = Manifest {
            next_block,
            files: committed.values().cloned().collect(),
        };
        let tmp = root.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
        fs::rename(tmp, root.join(MANIFEST))?;
        Ok(())
    }

    /// Placement audit: block id -> nodes that currently hold a replica.
    pub fn replica_map(&self, path: &str) -> Result<HashMap<BlockId, Vec<String>>, BlockStoreError> {
        let blocks = self.file(path)?.lock().blocks.clone();
        Ok(blocks
            .iter()
            .map(|b| {
                let holders = self
                    .nodes
                    .iter()
                    .filter(|n| n.holds(b.block_id))
                    .map(|n| n.id.clone())
                    .collect();
                (b.block_id, holders)
            })
            .collect())
    }
}
