//! End-to-end orchestration: dataset ingestion, sequential memory
//! construction with checkpoints, synthetic QA generation, rollout-and-reward
//! evaluation, question answering, and benchmark scoring.
//!
//! Sessions are processed strictly in order because each depends on the
//! previous bank. Everything the pipeline writes (bank snapshots, qa.jsonl,
//! rewards.jsonl, report.csv) is deterministic given the config seed and mock
//! backends.

pub mod answer;
pub mod build;
pub mod config;
pub mod dialogue;
pub mod evaluate;
pub mod qa;
pub mod rollout;

pub use answer::{answer_question, AnswerTrace};
pub use build::{build_memory, load_snapshot, sessions_done, BuildOutcome, ReferenceTokens};
pub use config::{GatewaysConfig, PathsConfig, PipelineCtx, RunConfig, ToyRunConfig};
pub use dialogue::{ingest, DatasetFormat, Dialogue, IngestStats, Question, Session, Turn};
pub use evaluate::{evaluate, EvalReport};
pub use qa::{generate_session_qa, load_qa_jsonl, write_qa_jsonl, QaType, SessionQaSet, SyntheticQa};
pub use rollout::{append_rewards_jsonl, rollout_and_reward, RolloutOutcome};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("decode: {0}")]
    Decode(String),
    #[error("unknown dataset format {0:?}")]
    UnknownFormat(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("gateway: {0}")]
    Gateway(#[from] crate::gateway::GatewayError),
    #[error("memory: {0}")]
    Memory(#[from] crate::memory::MemoryError),
    #[error("store: {0}")]
    Store(#[from] crate::store::StoreError),
    #[error("reward: {0}")]
    Reward(#[from] crate::reward::RewardError),
    #[error("prompts: {0}")]
    Prompt(#[from] crate::prompts::PromptError),
    #[error("adrpo: {0}")]
    Adrpo(#[from] crate::adrpo::AdrpoError),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
}

/// Stable derived seed for one model call, so every chat request is
/// reproducible and rollout variants stay distinct.
pub fn derive_seed(base: u64, dialogue_id: &str, session_index: usize, role: &str, nonce: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(dialogue_id.as_bytes());
    hasher.update([0x1f]);
    hasher.update((session_index as u64).to_le_bytes());
    hasher.update(role.as_bytes());
    hasher.update(nonce.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
