//! Domain types shared by the model, engine and schedulers.
//!
//! A [`Sequence`] owns every piece of per-job state (prompt, generated tokens,
//! phase, timestamps and an optional mid-iteration [`Checkpoint`]). A
//! [`Batch`] is only an ordered view over sequence ids plus a common execution
//! cursor, so batch composition can change without touching sequence state.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

pub type SeqId = u64;
pub type TokenId = u32;
pub type ExpertId = usize;
pub type BatchId = u64;

/// Reserved token id that terminates generation early.
pub const EOS_TOKEN: TokenId = 0;

/// Job priority class. `LatencySensitive` orders above `BestEffort`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Priority {
    #[serde(rename = "BE")]
    BestEffort,
    #[serde(rename = "LS")]
    LatencySensitive,
}

impl Priority {
    pub fn is_ls(self) -> bool {
        self == Priority::LatencySensitive
    }

    pub fn label(self) -> &'static str {
        match self {
            Priority::LatencySensitive => "LS",
            Priority::BestEffort => "BE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode,
    Finished,
}

impl Phase {
    /// Phases only move forward; staying put is allowed.
    pub fn can_become(self, next: Phase) -> bool {
        next >= self
    }
}

/// Execution stage within a layer. Used both as a cursor (next stage to run)
/// and in engine reports (stage just completed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Attention,
    Router,
    Experts,
    LayerDone,
    IterationDone,
}

/// Where a batch (or a checkpoint) resumes: the layer and the next stage to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cursor {
    pub layer: usize,
    pub stage: Stage,
}

impl Cursor {
    pub const START: Cursor = Cursor { layer: 0, stage: Stage::Attention };

    pub fn new(layer: usize, stage: Stage) -> Self {
        Cursor { layer, stage }
    }
}

/// Mid-iteration state of a single token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenState {
    /// Input to the next stage: the layer input before attention, the attention
    /// output afterwards, the combined output once the layer completes.
    pub hidden: Vec<f64>,
    /// Attention output kept for the residual connection around the experts.
    pub residual: Vec<f64>,
    /// Top-k routing for the current layer, present once the router has run.
    pub routing: Option<Vec<(ExpertId, f64)>>,
    pub completed: BTreeMap<ExpertId, Vec<f64>>,
    pub pending: BTreeSet<ExpertId>,
}

impl TokenState {
    pub fn new(hidden: Vec<f64>) -> Self {
        TokenState {
            residual: Vec::new(),
            hidden,
            routing: None,
            completed: BTreeMap::new(),
            pending: BTreeSet::new(),
        }
    }

    /// completed ∪ pending equals the routed set, and the two are disjoint.
    pub fn partition_holds(&self) -> bool {
        match &self.routing {
            None => self.completed.is_empty() && self.pending.is_empty(),
            Some(routes) => {
                let routed: BTreeSet<ExpertId> = routes.iter().map(|&(e, _)| e).collect();
                let done: BTreeSet<ExpertId> = self.completed.keys().copied().collect();
                done.is_disjoint(&self.pending)
                    && done.union(&self.pending).copied().collect::<BTreeSet<_>>() == routed
            }
        }
    }
}

/// Snapshot of a sequence's in-flight iteration. The engine uses the same
/// shape for live progress, so checkpointing is a move, not a transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layer_index: usize,
    pub stage: Stage,
    pub tokens: Vec<TokenState>,
}

impl Checkpoint {
    pub fn cursor(&self) -> Cursor {
        Cursor::new(self.layer_index, self.stage)
    }

    pub fn validate(&self, id: SeqId) -> Result<(), CoreError> {
        for (i, t) in self.tokens.iter().enumerate() {
            let routed_ok = match self.stage {
                Stage::Attention | Stage::Router => t.routing.is_none(),
                _ => true,
            };
            if !routed_ok || !t.partition_holds() {
                return Err(CoreError::CheckpointPartition { id, token: i });
            }
        }
        Ok(())
    }

    /// Bytes held by the checkpoint beyond the KV cache (accounted, never offloaded).
    pub fn footprint_bytes(&self) -> u64 {
        let per_vec = |v: &Vec<f64>| (v.len() * 8) as u64;
        self.tokens
            .iter()
            .map(|t| {
                per_vec(&t.hidden)
                    + per_vec(&t.residual)
                    + t.routing.as_ref().map_or(0, |r| (r.len() * 16) as u64)
                    + t.completed.values().map(per_vec).sum::<u64>()
            })
            .sum()
    }
}

/// Key into the unified dynamic cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheHandle(pub SeqId);

/// One inference job.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub id: SeqId,
    pub priority: Priority,
    pub arrival_time: f64,
    pub prompt: Vec<TokenId>,
    pub max_new_tokens: usize,
    pub cache_handle: CacheHandle,
    generated: Vec<TokenId>,
    phase: Phase,
    checkpoint: Option<Checkpoint>,
    first_token_time: Option<f64>,
    finish_time: Option<f64>,
}

impl Sequence {
    pub fn new(
        id: SeqId,
        prompt: Vec<TokenId>,
        priority: Priority,
        max_new_tokens: usize,
        arrival_time: f64,
    ) -> Result<Self, CoreError> {
        if prompt.is_empty() {
            return Err(CoreError::EmptyPrompt);
        }
        if max_new_tokens == 0 {
            return Err(CoreError::ZeroMaxNewTokens);
        }
        Ok(Sequence {
            id,
            priority,
            arrival_time,
            prompt,
            max_new_tokens,
            cache_handle: CacheHandle(id),
            generated: Vec::new(),
            phase: Phase::Prefill,
            checkpoint: None,
            first_token_time: None,
            finish_time: None,
        })
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.generated
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoint.as_ref()
    }

    pub fn checkpoint_cursor(&self) -> Option<Cursor> {
        self.checkpoint.as_ref().map(Checkpoint::cursor)
    }

    pub fn first_token_time(&self) -> Option<f64> {
        self.first_token_time
    }

    pub fn finish_time(&self) -> Option<f64> {
        self.finish_time
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }

    /// Tokens whose KV entries exist at every layer once the current
    /// iteration has completed: the prompt plus every generated token that
    /// has been fed back (all but the most recent one).
    pub fn tokens_processed(&self) -> usize {
        self.prompt.len() + self.generated.len().saturating_sub(1)
    }

    pub fn set_checkpoint(&mut self, ckpt: Checkpoint) -> Result<(), CoreError> {
        ckpt.validate(self.id)?;
        self.checkpoint = Some(ckpt);
        Ok(())
    }

    pub fn take_checkpoint(&mut self) -> Option<Checkpoint> {
        self.checkpoint.take()
    }

    /// Appends one emitted token. Returns `true` when the sequence finished.
    pub fn push_token(&mut self, token: TokenId, now: f64) -> Result<bool, CoreError> {
        if self.phase == Phase::Finished {
            return Err(CoreError::AlreadyFinished { id: self.id });
        }
        if self.generated.len() >= self.max_new_tokens {
            return Err(CoreError::TokenLimit { id: self.id, max: self.max_new_tokens });
        }
        self.generated.push(token);
        if self.first_token_time.is_none() {
            self.first_token_time = Some(now);
        }
        if token == EOS_TOKEN || self.generated.len() == self.max_new_tokens {
            self.phase = Phase::Finished;
            self.finish_time = Some(now);
            Ok(true)
        } else {
            self.phase = Phase::Decode;
            Ok(false)
        }
    }
}

/// Ordered view over co-executed sequences sharing one execution cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub id: BatchId,
    members: Vec<SeqId>,
    phase: Phase,
    cursor: Cursor,
}

impl Batch {
    /// Validates homogeneity and stage alignment. The cursor is the common
    /// checkpoint position, or the iteration start when nobody is checkpointed.
    pub fn form(
        id: BatchId,
        members: &[&Sequence],
        phase: Phase,
        max_batch: usize,
    ) -> Result<Batch, CoreError> {
        let first = members.first().ok_or(CoreError::EmptyBatch)?;
        if members.len() > max_batch {
            return Err(CoreError::OverCapacity { size: members.len(), max: max_batch });
        }
        let cursor = first.checkpoint_cursor().unwrap_or(Cursor::START);
        for s in members {
            if s.phase() != phase {
                return Err(CoreError::MixedPhase { id: s.id, expected: phase, found: s.phase() });
            }
            if s.checkpoint_cursor().unwrap_or(Cursor::START) != cursor {
                return Err(CoreError::Misaligned { id: s.id });
            }
        }
        Ok(Batch { id, members: members.iter().map(|s| s.id).collect(), phase, cursor })
    }

    pub fn members(&self) -> &[SeqId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn cursor(&self) -> Cursor {
        self.cursor
    }

    pub fn layer_cursor(&self) -> usize {
        self.cursor.layer
    }

    pub fn stage_cursor(&self) -> Stage {
        self.cursor.stage
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerDirective {
    Continue,
    PreemptAtNextBoundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberProgress {
    pub id: SeqId,
    pub priority: Priority,
    pub phase: Phase,
    pub tokens: usize,
    pub pending_experts: usize,
}

/// Status update sent to the scheduler after every attention stage, router
/// stage and individual expert drain.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineReport {
    pub batch_id: BatchId,
    pub stage: Stage,
    /// Set for expert drains within the `Experts` stage.
    pub expert: Option<ExpertId>,
    pub layer: usize,
    pub time: f64,
    pub members: Vec<MemberProgress>,
}

impl EngineReport {
    pub fn has_ls_member(&self) -> bool {
        self.members.iter().any(|m| m.priority.is_ls())
    }
}
