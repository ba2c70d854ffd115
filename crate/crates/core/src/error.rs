//! Error types shared across the simulator.

use thiserror::Error;

use crate::types::{Phase, SeqId, Stage};

/// Violations of the sequence / batch domain contracts.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
    #[error("max_new_tokens must be at least 1")]
    ZeroMaxNewTokens,
    #[error("batch must have at least one member")]
    EmptyBatch,
    #[error("batch of {size} exceeds maximum batch size {max}")]
    OverCapacity { size: usize, max: usize },
    #[error("sequence {id} is in phase {found:?}, batch expects {expected:?}")]
    MixedPhase { id: SeqId, expected: Phase, found: Phase },
    #[error("sequence {id} is not stage-aligned with the rest of the batch")]
    Misaligned { id: SeqId },
    #[error("sequence {id} already finished")]
    AlreadyFinished { id: SeqId },
    #[error("sequence {id} cannot accept more than {max} generated tokens")]
    TokenLimit { id: SeqId, max: usize },
    #[error("checkpoint for sequence {id} violates the expert partition at token {token}")]
    CheckpointPartition { id: SeqId, token: usize },
}

/// Errors raised by the compute core and the cache.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("state corruption for sequence {seq} at layer {layer}: expected {expected} cached entries, found {found}")]
    StateCorruption { seq: SeqId, layer: usize, expected: usize, found: usize },
    #[error("duplicate expert queue entry (seq {seq}, token {token}, layer {layer}, expert {expert})")]
    DuplicateQueueEntry { seq: SeqId, token: usize, layer: usize, expert: usize },
    #[error("token {token} of sequence {seq} still has {pending} pending experts")]
    PartialToken { seq: SeqId, token: usize, pending: usize },
    #[error("admission refused for sequence {seq}: need {needed} bytes, {available} available")]
    AdmissionRefused { seq: SeqId, needed: u64, available: u64 },
    #[error("cache capacity exceeded while appending for sequence {seq}")]
    CapacityExceeded { seq: SeqId },
    #[error("unknown cache handle for sequence {0}")]
    UnknownHandle(SeqId),
}

/// Errors raised while driving batches through the engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid cost model: {0}")]
    InvalidCosts(String),
    #[error("checkpoints are at mixed positions: ({0}, {1:?}) vs ({2}, {3:?})")]
    MixedCheckpoints(usize, Stage, usize, Stage),
    #[error("sequence {0} has no checkpoint to restore")]
    MissingCheckpoint(SeqId),
    #[error("engine is already running a batch")]
    Busy,
    #[error("engine has no running batch")]
    Idle,
    #[error("target iteration range [{lo}, {hi}] ms is infeasible")]
    InfeasibleCalibration { lo: f64, hi: f64 },
}

/// Scheduler-side failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedError {
    #[error("sequence {0} was already admitted")]
    DuplicateAdmission(SeqId),
    #[error("sequence {0} is not in the prefill phase")]
    NotPrefill(SeqId),
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("unknown scheduler `{0}`")]
    UnknownScheduler(String),
    #[error("sequence {0} missing from the sequence store")]
    MissingSequence(SeqId),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<ModelError> for SchedError {
    fn from(e: ModelError) -> Self {
        SchedError::Engine(EngineError::Model(e))
    }
}

/// Trace ingestion and export errors.
#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: arrival {arrival} precedes previous arrival {previous}")]
    OutOfOrder { line: usize, arrival: f64, previous: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Measurement errors.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("sequence {0} has not finished")]
    Unfinished(SeqId),
    #[error("sequence {0} was already recorded")]
    Duplicate(SeqId),
    #[error("cannot aggregate an empty record set")]
    Empty,
}
