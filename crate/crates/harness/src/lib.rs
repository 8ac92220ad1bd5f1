//! Scenario runner, chaos controls and network gateway for the platform.

pub mod gateway;
pub mod runner;
pub mod scenario;
pub mod transcript;

use mip::blockstore::{BlockStoreError, JournalError};
use mip::platform::PlatformError;
use thiserror::Error;

pub use runner::{run_scenario, RunOptions, CHAOS_ACK_TIMEOUT};
pub use scenario::{Chaos, ChannelSpec, Scenario, Step};
pub use transcript::{Conservation, DecisionSummary, FinalMetrics, Latencies, StepRecord, Transcript};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("boot failed: {0}")]
    Boot(#[from] PlatformError),
    #[error("step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: PlatformError,
    },
    #[error(transparent)]
    BlockStore(#[from] BlockStoreError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
