//! Priority-oblivious FCFS continuous batching.
//!
//! At every iteration boundary the scheduler admits arrivals into free batch
//! slots (prefilling them first), then runs one whole decode iteration.
//! Reports are always answered with `Continue`.

use std::collections::VecDeque;

use crate::engine::IterationOutcome;
use crate::error::SchedError;
use crate::sim::{Scheduler, SimCore, StepOutcome};
use crate::types::SeqId;

#[derive(Debug, Default)]
pub struct BaselineScheduler {
    pending: VecDeque<SeqId>,
    running: Vec<SeqId>,
}

impl BaselineScheduler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending(&self) -> &VecDeque<SeqId> {
        &self.pending
    }

    pub fn running(&self) -> &[SeqId] {
        &self.running
    }

    /// Runs `ids` to the end of one iteration and returns those still generating.
    fn run(&mut self, core: &mut SimCore, ids: &[SeqId]) -> Result<Vec<SeqId>, SchedError> {
        core.start_batch(ids)?;
        let res = core.run_uninterrupted()?;
        let IterationOutcome::Completed { tokens } = res.outcome.clone() else {
            unreachable!("an uninterrupted iteration always completes");
        };
        let mut alive = Vec::new();
        for (seq, (id, tok)) in res.members.into_iter().zip(tokens) {
            if !core.complete(seq, tok)? {
                alive.push(id);
            }
        }
        Ok(alive)
    }
}

impl Scheduler for BaselineScheduler {
    fn name(&self) -> &str {
        "baseline"
    }

    fn step(&mut self, core: &mut SimCore) -> Result<StepOutcome, SchedError> {
        self.pending.extend(core.take_arrivals()?);
        let max = core.engine.max_batch();
        let free = max.saturating_sub(self.running.len());
        if free > 0 && !self.pending.is_empty() {
            let take = free.min(self.pending.len());
            let ids: Vec<SeqId> = self.pending.drain(..take).collect();
            let alive = self.run(core, &ids)?;
            self.running.extend(alive);
        }
        if !self.running.is_empty() {
            let ids = std::mem::take(&mut self.running);
            self.running = self.run(core, &ids)?;
            return Ok(StepOutcome::Ran);
        }
        if !self.pending.is_empty() {
            return Ok(StepOutcome::Ran);
        }
        Ok(if core.idle_until_next_arrival() { StepOutcome::Ran } else { StepOutcome::Drained })
    }
}
