use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use parking_lot::RwLock;

use super::{BlockId, BlockStoreError};

/// A simulated DataNode. Dead nodes keep their blocks but serve nothing.
#[derive(Debug)]
pub(crate) struct DataNode {
    pub id: String,
    alive: AtomicBool,
    crash_on_next_write: AtomicBool,
    blocks: RwLock<HashMap<BlockId, Vec<u8>>>,
    dir: Option<PathBuf>,
}

impl DataNode {
    pub fn new(id: String, dir: Option<PathBuf>) -> Result<Self, BlockStoreError> {
        let mut blocks = HashMap::new();
        if let Some(dir) = &dir {
            fs::create_dir_all(dir)?;
            for entry in fs::read_dir(dir)? {
                let entry = entry?;
                let name = entry.file_name();
                let Some(n) = name.to_str().and_then(|n| n.strip_prefix("blk_")) else {
                    continue;
                };
                if let Ok(n) = n.parse::<u64>() {
                    blocks.insert(BlockId(n), fs::read(entry.path())?);
                }
            }
        }
        Ok(Self {
            id,
            alive: AtomicBool::new(true),
            crash_on_next_write: AtomicBool::new(false),
            blocks: RwLock::new(blocks),
            dir,
        })
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    pub fn set_alive(&self, alive: bool) {
        self.alive.store(alive, Ordering::SeqCst);
    }

    pub fn arm_crash(&self) {
        self.crash_on_next_write.store(true, Ordering::SeqCst);
    }

    pub fn write(&self, block: BlockId, data: &[u8]) -> Result<(), BlockStoreError> {
        let down = || BlockStoreError::PipelineFailed {
            node: self.id.clone(),
            block,
        };
        if !self.is_alive() {
            return Err(down());
        }
        if self.crash_on_next_write.swap(false, Ordering::SeqCst) {
            self.set_alive(false);
            return Err(down());
        }
        if let Some(dir) = &self.dir {
            fs::write(dir.join(block.file_name()), data)?;
        }
        self.blocks.write().insert(block, data.to_vec());
        Ok(())
    }

    /// `None` when the node is dead or lacks the block.
    pub fn read(&self, block: BlockId) -> Option<Vec<u8>> {
        if !self.is_alive() {
            return None;
        }
        self.blocks.read().get(&block).cloned()
    }

    pub fn holds(&self, block: BlockId) -> bool {
        self.blocks.read().contains_key(&block)
    }

    pub fn delete(&self, block: BlockId) {
        if self.blocks.write().remove(&block).is_some() {
            if let Some(dir) = &self.dir {
                let _ = fs::remove_file(dir.join(block.file_name()));
            }
        }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.read().len()
    }

    pub fn corrupt(&self, block: BlockId) -> bool {
        match self.blocks.write().get_mut(&block) {
            Some(data) if !data.is_empty() => {
                data[0] ^= 0xff;
                true
            }
            _ => false,
        }
    }
}
