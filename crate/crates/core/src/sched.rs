//! The priority-aware preemptive scheduler.
//!
//! Arrivals land in one of four FCFS queues by priority and phase. Batches
//! are chosen by [`QueueSet::get_next_batch`]; while a batch runs, every
//! engine report is handed to a [`Policy`] that may stop it at that boundary.
//! Preempted members go back to the head of their queues as a resume group
//! and are co-scheduled again until their interrupted iteration completes.

use std::collections::{HashMap, VecDeque};

use crate::engine::{EngineEvent, IterationOutcome};
use crate::error::SchedError;
use crate::sim::{Scheduler, SimCore, StepOutcome};
use crate::types::{Cursor, EngineReport, Phase, Priority, SchedulerDirective, SeqId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueueKind {
    LsPrefill,
    BePrefill,
    LsDecode,
    BeDecode,
}

impl QueueKind {
    pub fn of(priority: Priority, phase: Phase) -> QueueKind {
        match (priority, phase) {
            (Priority::LatencySensitive, Phase::Prefill) => QueueKind::LsPrefill,
            (Priority::BestEffort, Phase::Prefill) => QueueKind::BePrefill,
            (Priority::LatencySensitive, _) => QueueKind::LsDecode,
            (Priority::BestEffort, _) => QueueKind::BeDecode,
        }
    }
}

/// A queued sequence; `resume` is its checkpoint position when preempted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueuedJob {
    pub id: SeqId,
    pub resume: Option<Cursor>,
}

/// Which rule picked a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    LsDecodeFull,
    LsPrefill,
    LsDecode,
    BeDecode,
    BePrefill,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub branch: Branch,
    pub phase: Phase,
    pub members: Vec<SeqId>,
    pub resume: Option<Cursor>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueSnapshot {
    pub ls_prefill: usize,
    pub be_prefill: usize,
    pub ls_decode: usize,
    pub be_decode: usize,
}

impl QueueSnapshot {
    pub fn ls_waiting(&self) -> bool {
        self.ls_prefill + self.ls_decode > 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct QueueSet {
    ls_prefill: VecDeque<QueuedJob>,
    be_prefill: VecDeque<QueuedJob>,
    ls_decode: VecDeque<QueuedJob>,
    be_decode: VecDeque<QueuedJob>,
    members: HashMap<SeqId, QueueKind>,
}

impl QueueSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn queue(&self, kind: QueueKind) -> &VecDeque<QueuedJob> {
        match kind {
            QueueKind::LsPrefill => &self.ls_prefill,
            QueueKind::BePrefill => &self.be_prefill,
            QueueKind::LsDecode => &self.ls_decode,
            QueueKind::BeDecode => &self.be_decode,
        }
    }

    fn queue_mut(&mut self, kind: QueueKind) -> &mut VecDeque<QueuedJob> {
        match kind {
            QueueKind::LsPrefill => &mut self.ls_prefill,
            QueueKind::BePrefill => &mut self.be_prefill,
            QueueKind::LsDecode => &mut self.ls_decode,
            QueueKind::BeDecode => &mut self.be_decode,
        }
    }

    pub fn len(&self, kind: QueueKind) -> usize {
        self.queue(kind).len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn total(&self) -> usize {
        self.members.len()
    }

    pub fn kind_of(&self, id: SeqId) -> Option<QueueKind> {
        self.members.get(&id).copied()
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        QueueSnapshot {
            ls_prefill: self.ls_prefill.len(),
            be_prefill: self.be_prefill.len(),
            ls_decode: self.ls_decode.len(),
            be_decode: self.be_decode.len(),
        }
    }

    /// Appends a fresh sequence at the tail of `kind`.
    pub fn push_back(&mut self, kind: QueueKind, id: SeqId) -> Result<(), SchedError> {
        if self.members.insert(id, kind).is_some() {
            return Err(SchedError::DuplicateAdmission(id));
        }
        self.queue_mut(kind).push_back(QueuedJob { id, resume: None });
        Ok(())
    }

    /// Inserts a preempted group at the head of `kind`, behind any resume
    /// groups already waiting there.
    pub fn push_resume(&mut self, kind: QueueKind, ids: &[SeqId], cursor: Option<Cursor>) -> Result<(), SchedError> {
        for &id in ids {
            if self.members.insert(id, kind).is_some() {
                return Err(SchedError::DuplicateAdmission(id));
            }
        }
        let q = self.queue_mut(kind);
        let at = q.iter().position(|j| j.resume.is_none()).unwrap_or(q.len());
        for (i, &id) in ids.iter().enumerate() {
            q.insert(at + i, QueuedJob { id, resume: cursor });
        }
        Ok(())
    }

    /// Pops up to `room` consecutive head entries resuming at `cursor`.
    fn pop_compatible(&mut self, kind: QueueKind, cursor: Option<Cursor>, room: usize, out: &mut Vec<SeqId>) {
        let mut taken = Vec::new();
        {
            let q = self.queue_mut(kind);
            while taken.len() < room && q.front().is_some_and(|j| j.resume == cursor) {
                taken.push(q.pop_front().unwrap().id);
            }
        }
        for id in &taken {
            self.members.remove(id);
        }
        out.extend(taken);
    }

    /// The head group of `kind` (a resume group, or fresh entries), then
    /// compatible entries from `fill` while room remains.
    fn take(&mut self, branch: Branch, kind: QueueKind, fill: Option<QueueKind>, max: usize, phase: Phase) -> Selection {
        let cursor = self.queue(kind).front().and_then(|j| j.resume);
        let mut members = Vec::new();
        self.pop_compatible(kind, cursor, max, &mut members);
        if let Some(f) = fill {
            let room = max - members.len();
            self.pop_compatible(f, cursor, room, &mut members);
        }
        Selection { branch, phase, members, resume: cursor }
    }

    /// Batch selection:
    /// 1. at least `max` LS decode jobs: a full LS decode batch;
    /// 2. else any LS prefill: LS prefill batch topped up with BE prefill;
    /// 3. else any LS decode: LS decode batch topped up with BE decode;
    /// 4. else any BE decode: BE decode batch;
    /// 5. else any BE prefill: BE prefill batch;
    /// 6. else nothing.
    pub fn get_next_batch(&mut self, max: usize) -> Option<Selection> {
        use QueueKind::*;
        if max == 0 {
            return None;
        }
        let sel = if self.ls_decode.len() >= max {
            self.take(Branch::LsDecodeFull, LsDecode, None, max, Phase::Decode)
        } else if !self.ls_prefill.is_empty() {
            self.take(Branch::LsPrefill, LsPrefill, Some(BePrefill), max, Phase::Prefill)
        } else if !self.ls_decode.is_empty() {
            self.take(Branch::LsDecode, LsDecode, Some(BeDecode), max, Phase::Decode)
        } else if !self.be_decode.is_empty() {
            self.take(Branch::BeDecode, BeDecode, None, max, Phase::Decode)
        } else if !self.be_prefill.is_empty() {
            self.take(Branch::BePrefill, BePrefill, None, max, Phase::Prefill)
        } else {
            return None;
        };
        Some(sel)
    }
}

/// Decides, at every engine report, whether the running batch yields.
pub trait Policy {
    fn name(&self) -> &str;
    fn decide(&mut self, report: &EngineReport, queues: &QueueSnapshot) -> SchedulerDirective;
}

/// Preempts a batch with no LS member as soon as an LS job is waiting.
#[derive(Debug, Clone, Copy, Default)]
pub struct QllmPolicy;

impl Policy for QllmPolicy {
    fn name(&self) -> &str {
        "qllm"
    }

    fn decide(&mut self, report: &EngineReport, queues: &QueueSnapshot) -> SchedulerDirective {
        if queues.ls_waiting() && !report.has_ls_member() {
            SchedulerDirective::PreemptAtNextBoundary
        } else {
            SchedulerDirective::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NeverPreempt;

impl Policy for NeverPreempt {
    fn name(&self) -> &str {
        "never-preempt"
    }

    fn decide(&mut self, _: &EngineReport, _: &QueueSnapshot) -> SchedulerDirective {
        SchedulerDirective::Continue
    }
}

pub fn policy_by_name(name: &str) -> Result<Box<dyn Policy>, SchedError> {
    match name {
        "qllm" => Ok(Box::new(QllmPolicy)),
        "never-preempt" => Ok(Box::new(NeverPreempt)),
        other => Err(SchedError::UnknownPolicy(other.to_string())),
    }
}

pub struct QllmScheduler {
    queues: QueueSet,
    policy: Box<dyn Policy>,
    name: String,
}

impl QllmScheduler {
    pub fn new(policy: Box<dyn Policy>) -> Self {
        let name = policy.name().to_string();
        QllmScheduler { queues: QueueSet::new(), policy, name }
    }

    pub fn queues(&self) -> &QueueSet {
        &self.queues
    }

    pub fn dispatch_arrival(&mut self, core: &SimCore, id: SeqId) -> Result<(), SchedError> {
        let seq = core.sequence(id).ok_or(SchedError::MissingSequence(id))?;
        if seq.phase() != Phase::Prefill {
            return Err(SchedError::NotPrefill(id));
        }
        self.queues.push_back(QueueKind::of(seq.priority, Phase::Prefill), id)
    }

    fn ingest(&mut self, core: &mut SimCore) -> Result<(), SchedError> {
        for id in core.take_arrivals()? {
            self.dispatch_arrival(core, id)?;
        }
        Ok(())
    }

    /// Requeues members of a completed iteration that still have tokens to
    /// generate, per class in sequence-id order.
    fn route_outputs(&mut self, core: &mut SimCore, res: crate::engine::IterationResult, tokens: Vec<(SeqId, u32)>) -> Result<(), SchedError> {
        let mut survivors = Vec::new();
        for (seq, (id, tok)) in res.members.into_iter().zip(tokens) {
            debug_assert_eq!(seq.id, id);
            let priority = seq.priority;
            if !core.complete(seq, tok)? {
                survivors.push((priority, id));
            }
        }
        survivors.sort_by_key(|&(_, id)| id);
        for (priority, id) in survivors {
            self.queues.push_back(QueueKind::of(priority, Phase::Decode), id)?;
        }
        Ok(())
    }

    fn on_preempted(&mut self, core: &mut SimCore, res: crate::engine::IterationResult, cursor: Cursor) -> Result<(), SchedError> {
        let discard = cursor == Cursor::START;
        let resume = if discard { None } else { Some(cursor) };
        let mut groups: Vec<(QueueKind, Vec<SeqId>)> = Vec::new();
        for seq in res.members {
            let kind = QueueKind::of(seq.priority, seq.phase());
            let id = seq.id;
            core.park(seq);
            if discard {
                core.discard_checkpoint(id);
            }
            match groups.iter_mut().find(|(k, _)| *k == kind) {
                Some((_, ids)) => ids.push(id),
                None => groups.push((kind, vec![id])),
            }
        }
        for (kind, ids) in groups {
            self.queues.push_resume(kind, &ids, resume)?;
        }
        Ok(())
    }
}

impl Scheduler for QllmScheduler {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, core: &mut SimCore) -> Result<StepOutcome, SchedError> {
        self.ingest(core)?;
        let Some(sel) = self.queues.get_next_batch(core.engine.max_batch()) else {
            return Ok(if core.idle_until_next_arrival() { StepOutcome::Ran } else { StepOutcome::Drained });
        };
        core.start_batch(&sel.members)?;
        let mut directive = SchedulerDirective::Continue;
        loop {
            match core.advance(directive)? {
                EngineEvent::Report(report) => {
                    self.ingest(core)?;
                    directive = self.policy.decide(&report, &self.queues.snapshot());
                }
                EngineEvent::Done(res) => {
                    match res.outcome.clone() {
                        IterationOutcome::Completed { tokens } => self.route_outputs(core, res, tokens)?,
                        IterationOutcome::Preempted { cursor } => self.on_preempted(core, res, cursor)?,
                    }
                    return Ok(StepOutcome::Ran);
                }
            }
        }
    }
}
