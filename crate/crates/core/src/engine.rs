//! Batch execution on a virtual clock.
//!
//! The engine runs one batch at a time, stage by stage. After every
//! Attention stage, every Router stage and every non-empty expert drain it
//! hands an [`EngineReport`] back to the caller and waits for a directive.
//! Answering `PreemptAtNextBoundary` stops the batch right at that boundary
//! and moves each member's in-flight state into its [`Checkpoint`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, ModelError};
use crate::model::{ExpertQueueEntry, ExpertQueues, ModelConfig, MoeModel, UnifiedDynamicCache};
use crate::types::{
    Batch, BatchId, Checkpoint, Cursor, EngineReport, MemberProgress, Phase, SchedulerDirective,
    SeqId, Sequence, Stage, TokenId, TokenState,
};

/// Linear per-stage costs in virtual milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub attn_base: f64,
    pub attn_per_token: f64,
    pub attn_per_cached: f64,
    pub router_cost: f64,
    pub expert_base: f64,
    pub expert_per_entry: f64,
    pub checkpoint_cost: f64,
    pub restore_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            attn_base: 1.5,
            attn_per_token: 0.002,
            attn_per_cached: 0.0001,
            router_cost: 0.2,
            expert_base: 0.9,
            expert_per_entry: 0.0005,
            checkpoint_cost: 2.0,
            restore_cost: 2.0,
        }
    }
}

/// Cached entries per member assumed by [`CostModel::decode_iteration`]
/// when calibrating.
pub const CALIBRATION_CONTEXT: usize = 256;
pub const CALIBRATION_BATCH: usize = 32;
pub const CALIBRATION_LAYERS: usize = 32;

impl CostModel {
    pub fn validate(&self) -> Result<(), EngineError> {
        let fields = [
            ("attn_base", self.attn_base),
            ("attn_per_token", self.attn_per_token),
            ("attn_per_cached", self.attn_per_cached),
            ("router_cost", self.router_cost),
            ("expert_base", self.expert_base),
            ("expert_per_entry", self.expert_per_entry),
            ("checkpoint_cost", self.checkpoint_cost),
            ("restore_cost", self.restore_cost),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(EngineError::InvalidCosts(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn attention(&self, tokens: usize, cached: usize) -> f64 {
        self.attn_base + self.attn_per_token * tokens as f64 + self.attn_per_cached * cached as f64
    }

    pub fn router(&self) -> f64 {
        self.router_cost
    }

    /// Zero for an empty queue: no work, no charge.
    pub fn expert(&self, entries: usize) -> f64 {
        if entries == 0 {
            0.0
        } else {
            self.expert_base + self.expert_per_entry * entries as f64
        }
    }

    /// Closed-form cost of one decode iteration where every member has
    /// `context` cached entries per layer and routed entries spread over
    /// as many experts as possible.
    pub fn decode_iteration(&self, batch: usize, layers: usize, cfg: &ModelConfig, context: usize) -> f64 {
        let entries = batch * cfg.top_k;
        let busy = entries.min(cfg.num_experts);
        let experts = busy as f64 * self.expert_base + self.expert_per_entry * entries as f64;
        let per_layer = self.attention(batch, batch * context) + self.router() + experts;
        per_layer * layers as f64
    }

    /// The compute terms multiplied by `s`; checkpoint and restore untouched.
    pub fn scaled(&self, s: f64) -> CostModel {
        CostModel {
            attn_base: self.attn_base * s,
            attn_per_token: self.attn_per_token * s,
            attn_per_cached: self.attn_per_cached * s,
            router_cost: self.router_cost * s,
            expert_base: self.expert_base * s,
            expert_per_entry: self.expert_per_entry * s,
            ..*self
        }
    }
}

/// Scales `template` so the reference decode iteration lands at the middle of
/// `[lo, hi]`, then confirms it by running one real iteration.
pub fn calibrate(template: &CostModel, cfg: &ModelConfig, lo: f64, hi: f64) -> Result<CostModel, EngineError> {
    template.validate()?;
    if !(lo.is_finite() && hi.is_finite()) || lo > hi || hi <= 0.0 {
        return Err(EngineError::InfeasibleCalibration { lo, hi });
    }
    let base = template.decode_iteration(CALIBRATION_BATCH, CALIBRATION_LAYERS, cfg, CALIBRATION_CONTEXT);
    if base <= 0.0 {
        return Err(EngineError::InfeasibleCalibration { lo, hi });
    }
    let costs = template.scaled((lo.max(0.0) + hi) / 2.0 / base);
    let measured = measure_decode_iteration(&costs, cfg)?;
    if measured < lo || measured > hi {
        return Err(EngineError::InfeasibleCalibration { lo, hi });
    }
    Ok(costs)
}

/// Runs one real batch-32 decode iteration over 32 layers and returns the
/// virtual time it took. Members are first prefilled with
/// `CALIBRATION_CONTEXT - 1` prompt tokens so the decode step scans exactly
/// `CALIBRATION_CONTEXT` entries per layer once its own entry is included.
pub fn measure_decode_iteration(costs: &CostModel, cfg: &ModelConfig) -> Result<f64, EngineError> {
    let cfg = ModelConfig { num_layers: CALIBRATION_LAYERS, ..cfg.clone() };
    let mut engine = Engine::new(cfg.clone(), *costs, u64::MAX, CALIBRATION_BATCH)?;
    let vocab = cfg.vocab_size as TokenId;
    let mut seqs = Vec::new();
    for id in 0..CALIBRATION_BATCH as SeqId {
        // avoid the end-of-sequence id so everyone survives prefill
        let prompt = (0..CALIBRATION_CONTEXT - 1).map(|i| 1 + ((id as usize * 31 + i * 7) as TokenId) % (vocab - 1)).collect();
        let seq = Sequence::new(id, prompt, crate::types::Priority::BestEffort, 2, 0.0)?;
        engine.admit(&seq)?;
        seqs.push(seq);
    }
    let IterationResult { members, outcome, .. } = engine.run_to_completion(0, seqs)?;
    let mut seqs = members;
    if let IterationOutcome::Completed { tokens } = outcome {
        for (s, (_, t)) in seqs.iter_mut().zip(tokens) {
            // force a decode step even if the model emitted the end token
            let t = if t == crate::types::EOS_TOKEN { 1 } else { t };
            s.push_token(t, 0.0)?;
        }
    }
    let start = engine.clock().now();
    engine.run_to_completion(1, seqs)?;
    Ok(engine.clock().now() - start)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VirtualClock {
    now: f64,
    charged: f64,
    idle: f64,
}

impl VirtualClock {
    pub fn now(&self) -> f64 {
        self.now
    }

    /// Sum of every stage, checkpoint and restore charge.
    pub fn charged(&self) -> f64 {
        self.charged
    }

    pub fn idle(&self) -> f64 {
        self.idle
    }

    pub fn charge(&mut self, ms: f64) {
        debug_assert!(ms >= 0.0);
        self.now += ms;
        self.charged += ms;
    }

    /// Jumps forward to an event timestamp; earlier timestamps are ignored.
    pub fn advance_to(&mut self, t: f64) {
        if t > self.now {
            self.idle += t - self.now;
            self.now = t;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EngineStats {
    pub reports: u64,
    pub iterations_started: u64,
    pub iterations_completed: u64,
    pub preemptions: u64,
    pub restores: u64,
    /// Token-level checks that nothing crosses a layer boundary with pending experts.
    pub gating_checks: u64,
    pub gating_violations: u64,
    pub max_stage_cost: f64,
    pub stage_time: f64,
    pub checkpoint_time: f64,
    pub restore_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IterationOutcome {
    /// One emitted token per member, in member order.
    Completed { tokens: Vec<(SeqId, TokenId)> },
    /// Members carry their checkpoints at `cursor`.
    Preempted { cursor: Cursor },
}

#[derive(Debug, Clone)]
pub struct IterationResult {
    pub batch: Batch,
    pub members: Vec<Sequence>,
    pub outcome: IterationOutcome,
    pub started_at: f64,
    pub finished_at: f64,
}

#[derive(Debug, Clone)]
pub enum EngineEvent {
    Report(EngineReport),
    Done(IterationResult),
}

#[derive(Debug)]
struct Slot {
    seq: Sequence,
    tokens: Vec<TokenState>,
}

#[derive(Debug)]
struct Running {
    batch: Batch,
    slots: Vec<Slot>,
    index: HashMap<SeqId, usize>,
    cursor: Cursor,
    next_expert: usize,
    started_at: f64,
    /// Set once the first stage has run; the first `advance` has no report to answer.
    reported: bool,
}

pub struct Engine {
    model: MoeModel,
    cache: UnifiedDynamicCache,
    queues: ExpertQueues,
    costs: CostModel,
    clock: VirtualClock,
    stats: EngineStats,
    max_batch: usize,
    running: Option<Running>,
}

impl Engine {
    pub fn new(cfg: ModelConfig, costs: CostModel, cache_bytes: u64, max_batch: usize) -> Result<Self, EngineError> {
        costs.validate()?;
        let model = MoeModel::new(cfg.clone())?;
        Ok(Engine {
            cache: UnifiedDynamicCache::new(cfg.hidden_dim, cfg.num_layers, cache_bytes),
            queues: ExpertQueues::new(cfg.num_layers, cfg.num_experts),
            model,
            costs,
            clock: VirtualClock::default(),
            stats: EngineStats::default(),
            max_batch,
            running: None,
        })
    }

    pub fn model(&self) -> &MoeModel {
        &self.model
    }

    pub fn cache(&self) -> &UnifiedDynamicCache {
        &self.cache
    }

    pub fn costs(&self) -> &CostModel {
        &self.costs
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn clock_mut(&mut self) -> &mut VirtualClock {
        &mut self.clock
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn max_batch(&self) -> usize {
        self.max_batch
    }

    pub fn is_busy(&self) -> bool {
        self.running.is_some()
    }

    pub fn queues(&self) -> &ExpertQueues {
        &self.queues
    }

    /// Reserves cache room for the sequence's worst-case length.
    pub fn admit(&mut self, seq: &Sequence) -> Result<(), ModelError> {
        self.cache.admit(seq.id, seq.prompt.len() + seq.max_new_tokens)?;
        Ok(())
    }

    pub fn evict(&mut self, seq: &Sequence) -> Result<u64, ModelError> {
        self.cache.evict(seq.cache_handle)
    }

    /// Forms a batch from the given sequences and makes it the running batch.
    /// Members carrying checkpoints are restored at their common position.
    pub fn start(&mut self, id: BatchId, members: Vec<Sequence>) -> Result<Batch, EngineError> {
        if self.running.is_some() {
            return Err(EngineError::Busy);
        }
        let first = members.first().ok_or(crate::error::CoreError::EmptyBatch)?;
        let phase = first.phase();
        let cursor = first.checkpoint_cursor();
        if let Some(c) = cursor {
            for s in &members {
                match s.checkpoint_cursor() {
                    Some(o) if o != c => {
                        return Err(EngineError::MixedCheckpoints(c.layer, c.stage, o.layer, o.stage))
                    }
                    None => return Err(EngineError::MissingCheckpoint(s.id)),
                    _ => {}
                }
            }
        }
        let refs: Vec<&Sequence> = members.iter().collect();
        let batch = Batch::form(id, &refs, phase, self.max_batch)?;
        let mut slots = Vec::with_capacity(members.len());
        for mut seq in members {
            let tokens = match seq.take_checkpoint() {
                Some(ckpt) => ckpt.tokens,
                None => self.fresh_tokens(&seq),
            };
            slots.push(Slot { seq, tokens });
        }
        let index = slots.iter().enumerate().map(|(i, s)| (s.seq.id, i)).collect();
        let mut run = Running {
            batch: batch.clone(),
            slots,
            index,
            cursor: batch.cursor(),
            next_expert: 0,
            started_at: self.clock.now(),
            reported: false,
        };
        self.stats.iterations_started += 1;
        if cursor.is_some() {
            self.restore_state(&mut run)?;
        }
        self.running = Some(run);
        Ok(batch)
    }

    fn fresh_tokens(&self, seq: &Sequence) -> Vec<TokenState> {
        match seq.generated().last() {
            Some(&t) => vec![TokenState::new(self.model.embed(t))],
            None => seq.prompt.iter().map(|&t| TokenState::new(self.model.embed(t))).collect(),
        }
    }

    /// Re-enqueues pending expert work of a batch resumed inside its Experts stage.
    fn restore_state(&mut self, run: &mut Running) -> Result<(), EngineError> {
        self.clock.charge(self.costs.restore_cost);
        self.stats.restore_time += self.costs.restore_cost;
        self.stats.restores += 1;
        if run.cursor.stage == Stage::Experts {
            let layer = run.cursor.layer;
            let mut entries = Vec::new();
            for slot in &run.slots {
                for (ti, t) in slot.tokens.iter().enumerate() {
                    for &(e, w) in t.routing.iter().flatten() {
                        if t.pending.contains(&e) {
                            entries.push(ExpertQueueEntry { seq: slot.seq.id, token: ti, layer, expert: e, weight: w });
                        }
                    }
                }
            }
            self.queues.enqueue(&entries)?;
        }
        Ok(())
    }

    /// Answers the previous report with `directive` (ignored before the first
    /// stage), then runs the next stage.
    pub fn advance(&mut self, directive: SchedulerDirective) -> Result<EngineEvent, EngineError> {
        let mut run = self.running.take().ok_or(EngineError::Idle)?;
        let result = self.advance_inner(&mut run, directive);
        match result {
            Ok(Some(report)) => {
                self.running = Some(run);
                Ok(EngineEvent::Report(report))
            }
            Ok(None) => Ok(EngineEvent::Done(self.finish(run)?)),
            Err(e) => Err(e),
        }
    }

    /// Drives the running batch to an outcome, consulting `decide` at every report.
    pub fn execute(
        &mut self,
        id: BatchId,
        members: Vec<Sequence>,
        mut decide: impl FnMut(&EngineReport) -> SchedulerDirective,
    ) -> Result<IterationResult, EngineError> {
        self.start(id, members)?;
        let mut directive = SchedulerDirective::Continue;
        loop {
            match self.advance(directive)? {
                EngineEvent::Report(r) => directive = decide(&r),
                EngineEvent::Done(res) => return Ok(res),
            }
        }
    }

    pub fn run_to_completion(&mut self, id: BatchId, members: Vec<Sequence>) -> Result<IterationResult, EngineError> {
        self.execute(id, members, |_| SchedulerDirective::Continue)
    }

    /// `Some(report)` after a stage ran, `None` when the batch is done
    /// (completed or preempted). On preemption the cursor is left at the boundary.
    fn advance_inner(
        &mut self,
        run: &mut Running,
        directive: SchedulerDirective,
    ) -> Result<Option<EngineReport>, EngineError> {
        if run.reported && directive == SchedulerDirective::PreemptAtNextBoundary && run.cursor.stage != Stage::IterationDone {
            self.preempt(run)?;
            return Ok(None);
        }
        run.reported = true;
        loop {
            let Cursor { layer, stage } = run.cursor;
            match stage {
                Stage::Attention => {
                    let tokens: usize = run.slots.iter().map(|s| s.tokens.len()).sum();
                    let mut cached = 0;
                    for slot in run.slots.iter_mut() {
                        let prior = match slot.seq.phase() {
                            Phase::Prefill => 0,
                            _ => slot.seq.tokens_processed(),
                        };
                        cached += prior;
                        let (id, handle) = (slot.seq.id, slot.seq.cache_handle);
                        self.model.attention_for_sequence(&mut self.cache, id, handle, layer, prior, &mut slot.tokens)?;
                    }
                    let cost = self.costs.attention(tokens, cached);
                    run.cursor = Cursor::new(layer, Stage::Router);
                    return Ok(Some(self.report(run, Stage::Attention, None, layer, cost)));
                }
                Stage::Router => {
                    let mut entries = Vec::new();
                    for slot in run.slots.iter_mut() {
                        for (ti, t) in slot.tokens.iter_mut().enumerate() {
                            let routes = self.model.route(layer, &t.hidden);
                            for &(e, w) in &routes {
                                entries.push(ExpertQueueEntry { seq: slot.seq.id, token: ti, layer, expert: e, weight: w });
                                t.pending.insert(e);
                            }
                            t.routing = Some(routes);
                        }
                    }
                    self.queues.enqueue(&entries)?;
                    run.cursor = Cursor::new(layer, Stage::Experts);
                    run.next_expert = 0;
                    let cost = self.costs.router();
                    return Ok(Some(self.report(run, Stage::Router, None, layer, cost)));
                }
                Stage::Experts => {
                    let num_experts = self.queues.num_experts();
                    while run.next_expert < num_experts && self.queues.len(layer, run.next_expert) == 0 {
                        run.next_expert += 1;
                    }
                    if run.next_expert == num_experts {
                        self.finish_layer(run, layer)?;
                        continue;
                    }
                    let e = run.next_expert;
                    run.next_expert += 1;
                    let drained = self.queues.drain(layer, e);
                    let outputs = {
                        let slots = &run.slots;
                        let index = &run.index;
                        self.model.run_expert(e, &drained, |q| &slots[index[&q.seq]].tokens[q.token].hidden)
                    };
                    for (q, out) in drained.iter().zip(outputs) {
                        let t = &mut run.slots[run.index[&q.seq]].tokens[q.token];
                        t.pending.remove(&e);
                        t.completed.insert(e, out);
                    }
                    let cost = self.costs.expert(drained.len());
                    // a boundary that ends the layer is reported from its end state
                    while run.next_expert < num_experts && self.queues.len(layer, run.next_expert) == 0 {
                        run.next_expert += 1;
                    }
                    if run.next_expert == num_experts {
                        self.finish_layer(run, layer)?;
                    }
                    return Ok(Some(self.report(run, Stage::Experts, Some(e), layer, cost)));
                }
                Stage::LayerDone => unreachable!("layer completion advances the cursor directly"),
                Stage::IterationDone => return Ok(None),
            }
        }
    }

    /// Combines expert outputs into next-layer hidden states once nothing is pending.
    fn finish_layer(&mut self, run: &mut Running, layer: usize) -> Result<(), EngineError> {
        debug_assert!(self.queues.layer_is_empty(layer));
        for slot in run.slots.iter_mut() {
            for (ti, t) in slot.tokens.iter_mut().enumerate() {
                self.stats.gating_checks += 1;
                if !t.pending.is_empty() {
                    self.stats.gating_violations += 1;
                }
                let next = self.model.combine(slot.seq.id, ti, t)?;
                *t = TokenState::new(next);
            }
        }
        let num_layers = self.model.config().num_layers;
        run.cursor = if layer + 1 == num_layers {
            Cursor::new(layer, Stage::IterationDone)
        } else {
            Cursor::new(layer + 1, Stage::Attention)
        };
        Ok(())
    }

    fn report(&mut self, run: &Running, stage: Stage, expert: Option<usize>, layer: usize, cost: f64) -> EngineReport {
        self.clock.charge(cost);
        self.stats.stage_time += cost;
        self.stats.max_stage_cost = self.stats.max_stage_cost.max(cost);
        self.stats.reports += 1;
        EngineReport {
            batch_id: run.batch.id,
            stage,
            expert,
            layer,
            time: self.clock.now(),
            members: run
                .slots
                .iter()
                .map(|s| MemberProgress {
                    id: s.seq.id,
                    priority: s.seq.priority,
                    phase: s.seq.phase(),
                    tokens: s.tokens.len(),
                    pending_experts: s.tokens.iter().map(|t| t.pending.len()).sum(),
                })
                .collect(),
        }
    }

    fn preempt(&mut self, run: &mut Running) -> Result<(), EngineError> {
        let cursor = run.cursor;
        self.queues.clear_layer(cursor.layer);
        for slot in run.slots.iter_mut() {
            let ckpt = Checkpoint { layer_index: cursor.layer, stage: cursor.stage, tokens: std::mem::take(&mut slot.tokens) };
            slot.seq.set_checkpoint(ckpt)?;
        }
        self.clock.charge(self.costs.checkpoint_cost);
        self.stats.checkpoint_time += self.costs.checkpoint_cost;
        self.stats.preemptions += 1;
        Ok(())
    }

    fn finish(&mut self, run: Running) -> Result<IterationResult, EngineError> {
        let outcome = if run.cursor.stage == Stage::IterationDone {
            self.stats.iterations_completed += 1;
            let tokens = run
                .slots
                .iter()
                .map(|s| {
                    let last = s.tokens.last().expect("every member has at least one token");
                    (s.seq.id, self.model.emit(&last.hidden))
                })
                .collect();
            IterationOutcome::Completed { tokens }
        } else {
            IterationOutcome::Preempted { cursor: run.cursor }
        };
        Ok(IterationResult {
            batch: run.batch,
            members: run.slots.into_iter().map(|s| s.seq).collect(),
            outcome,
            started_at: run.started_at,
            finished_at: self.clock.now(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Priority;

    fn small_cfg() -> ModelConfig {
        ModelConfig { num_layers: 4, ..ModelConfig::default() }
    }

    fn engine(cfg: ModelConfig) -> Engine {
        Engine::new(cfg, CostModel::default(), u64::MAX, 32).unwrap()
    }

    fn seq(id: SeqId, prompt: Vec<TokenId>, max: usize) -> Sequence {
        Sequence::new(id, prompt, Priority::BestEffort, max, 0.0).unwrap()
    }

    /// Generates until every member finishes, preempting wherever `preempt` says so.
    fn generate(
        e: &mut Engine,
        mut seqs: Vec<Sequence>,
        mut preempt: impl FnMut(&EngineReport) -> bool,
    ) -> HashMap<SeqId, Vec<TokenId>> {
        for s in &seqs {
            e.admit(s).unwrap();
        }
        let mut out = HashMap::new();
        let mut batch_id = 0;
        while !seqs.is_empty() {
            batch_id += 1;
            let res = e
                .execute(batch_id, seqs, |r| {
                    if preempt(r) {
                        SchedulerDirective::PreemptAtNextBoundary
                    } else {
                        SchedulerDirective::Continue
                    }
                })
                .unwrap();
            seqs = Vec::new();
            let mut members = res.members;
            if let IterationOutcome::Completed { tokens } = res.outcome {
                for (s, (id, t)) in members.iter_mut().zip(tokens) {
                    assert_eq!(s.id, id);
                    s.push_token(t, e.clock().now()).unwrap();
                }
            }
            for s in members {
                if s.is_finished() {
                    assert_eq!(e.cache().entries(s.cache_handle, 0).unwrap(), s.tokens_processed());
                    e.evict(&s).unwrap();
                    out.insert(s.id, s.generated().to_vec());
                } else {
                    seqs.push(s);
                }
            }
        }
        out
    }

    #[test]
    fn defaults_are_calibrated() {
        let c = CostModel::default();
        let analytic = c.decode_iteration(32, 32, &ModelConfig::default(), CALIBRATION_CONTEXT);
        assert!((300.0..=400.0).contains(&analytic), "{analytic}");
        let measured = measure_decode_iteration(&c, &ModelConfig::default()).unwrap();
        assert!((300.0..=400.0).contains(&measured), "{measured}");
    }

    #[test]
    fn calibrate_hits_target_and_rejects_infeasible() {
        let cfg = ModelConfig::default();
        let c = calibrate(&CostModel::default(), &cfg, 100.0, 120.0).unwrap();
        let m = measure_decode_iteration(&c, &cfg).unwrap();
        assert!((100.0..=120.0).contains(&m), "{m}");
        assert!(matches!(
            calibrate(&CostModel::default(), &cfg, 0.0, 0.0),
            Err(EngineError::InfeasibleCalibration { .. })
        ));
    }

    #[test]
    fn invalid_costs_rejected() {
        let c = CostModel { router_cost: -1.0, ..CostModel::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_cost_rules() {
        let c = CostModel::default();
        assert_eq!(c.expert(0), 0.0);
        let d1 = c.attention(10, 0) - c.attention(0, 0);
        let d2 = c.attention(20, 0) - c.attention(0, 0);
        assert_eq!(d2, 2.0 * d1);
    }

    #[test]
    fn report_counts_per_layer() {
        let mut e = engine(small_cfg());
        let s: Vec<_> = (0..5).map(|i| seq(i, vec![3 + i as TokenId, 7], 4)).collect();
        for x in &s {
            e.admit(x).unwrap();
        }
        let mut per_layer: HashMap<usize, (usize, std::collections::BTreeSet<usize>)> = HashMap::new();
        e.execute(1, s, |r| {
            let entry = per_layer.entry(r.layer).or_default();
            entry.0 += 1;
            if let Some(x) = r.expert {
                entry.1.insert(x);
            }
            SchedulerDirective::Continue
        })
        .unwrap();
        assert_eq!(per_layer.len(), 4);
        for (reports, experts) in per_layer.values() {
            assert_eq!(*reports, 2 + experts.len());
        }
        assert!(e.queues().is_empty());
    }

    #[test]
    fn clock_equals_sum_of_charges() {
        let mut e = engine(small_cfg());
        let s: Vec<_> = (0..3).map(|i| seq(i, vec![9, 4, 1 + i as TokenId], 6)).collect();
        let mut n = 0;
        generate(&mut e, s, |_| {
            n += 1;
            n % 5 == 0
        });
        let st = e.stats();
        let total = st.stage_time + st.checkpoint_time + st.restore_time;
        assert!((e.clock().charged() - total).abs() < 1e-9);
        assert_eq!(e.clock().now(), e.clock().charged());
        assert!(st.preemptions > 0);
        assert_eq!(st.gating_violations, 0);
        assert_eq!(e.cache().usage(), 0);
    }

    #[test]
    fn preempt_at_first_report_checkpoints_after_attention() {
        let mut e = engine(small_cfg());
        let s = seq(1, vec![7, 3], 4);
        e.admit(&s).unwrap();
        let before = e.clock().now();
        let res = e.execute(1, vec![s], |_| SchedulerDirective::PreemptAtNextBoundary).unwrap();
        assert_eq!(res.outcome, IterationOutcome::Preempted { cursor: Cursor::new(0, Stage::Router) });
        let ck = res.members[0].checkpoint().unwrap();
        assert_eq!(ck.tokens.len(), 2);
        assert!(ck.tokens.iter().all(|t| t.routing.is_none()));
        let attn = e.costs().attention(2, 0);
        assert!((e.clock().now() - before - attn - e.costs().checkpoint_cost).abs() < 1e-12);
    }

    #[test]
    fn resumed_batch_cursor_equals_checkpoint_cursor() {
        let mut e = engine(small_cfg());
        let s: Vec<_> = (0..4).map(|i| seq(i, vec![2 + i as TokenId, 5, 8], 5)).collect();
        for x in &s {
            e.admit(x).unwrap();
        }
        let res = e
            .execute(1, s, |r| {
                if r.layer == 3 && r.stage == Stage::Router {
                    SchedulerDirective::PreemptAtNextBoundary
                } else {
                    SchedulerDirective::Continue
                }
            })
            .unwrap();
        let refs: Vec<&Sequence> = res.members.iter().collect();
        let b = Batch::form(2, &refs, Phase::Prefill, 32).unwrap();
        assert_eq!((b.layer_cursor(), b.stage_cursor()), (3, Stage::Experts));
        assert!(e.queues().is_empty());
        let batch = e.start(2, res.members).unwrap();
        assert_eq!(batch.cursor(), Cursor::new(3, Stage::Experts));
        let pending: usize = (0..8).map(|x| e.queues().len(3, x)).sum();
        assert_eq!(pending, 4 * 3 * 2);
    }

    #[test]
    fn restore_reenqueues_only_pending_work() {
        let mut e = engine(ModelConfig { num_layers: 2, ..ModelConfig::default() });
        let s = seq(1, vec![42], 3);
        e.admit(&s).unwrap();
        let mut first_expert = None;
        let res = e
            .execute(1, vec![s], |r| {
                if r.stage == Stage::Experts && r.layer == 0 {
                    first_expert = r.expert;
                    SchedulerDirective::PreemptAtNextBoundary
                } else {
                    SchedulerDirective::Continue
                }
            })
            .unwrap();
        let done = first_expert.unwrap();
        let ck = res.members[0].checkpoint().unwrap().clone();
        let t = &ck.tokens[0];
        assert_eq!(t.completed.len(), 1);
        assert!(t.completed.contains_key(&done));
        let other = *t.pending.iter().next().unwrap();
        e.start(2, res.members).unwrap();
        for x in 0..8 {
            assert_eq!(e.queues().len(0, x), usize::from(x == other));
        }
    }

    #[test]
    fn mixed_checkpoints_rejected() {
        let mut e = engine(small_cfg());
        let a = seq(1, vec![4, 4], 3);
        let b = seq(2, vec![5, 6], 3);
        e.admit(&a).unwrap();
        e.admit(&b).unwrap();
        let ra = e.execute(1, vec![a], |_| SchedulerDirective::PreemptAtNextBoundary).unwrap();
        let mut n = 0;
        let rb = e
            .execute(2, vec![b], |_| {
                n += 1;
                if n == 2 {
                    SchedulerDirective::PreemptAtNextBoundary
                } else {
                    SchedulerDirective::Continue
                }
            })
            .unwrap();
        let members = vec![ra.members.into_iter().next().unwrap(), rb.members.into_iter().next().unwrap()];
        assert!(matches!(e.start(3, members), Err(EngineError::MixedCheckpoints(..))));
    }

    #[test]
    fn preempted_runs_match_unpreempted_oracle() {
        let prompts: Vec<Vec<TokenId>> = vec![vec![7, 3], vec![11, 2, 9, 40], vec![1], vec![200, 13, 13]];
        let mk = || prompts.iter().enumerate().map(|(i, p)| seq(i as SeqId, p.clone(), 12)).collect::<Vec<_>>();
        let oracle = generate(&mut engine(small_cfg()), mk(), |_| false);
        for period in [1usize, 2, 3, 7, 11] {
            let mut n = 0;
            let got = generate(&mut engine(small_cfg()), mk(), |r| {
                n += 1;
                n % period == 0 || (r.layer == 2 && r.expert == Some(2))
            });
            assert_eq!(got, oracle, "period {period}");
        }
    }

    #[test]
    fn final_layer_completes_regardless_of_directive() {
        let mut e = engine(ModelConfig { num_layers: 1, ..ModelConfig::default() });
        let s = seq(1, vec![3], 2);
        e.admit(&s).unwrap();
        let mut last = None;
        let res = e
            .execute(1, vec![s], |r| {
                last = Some(r.clone());
                SchedulerDirective::Continue
            })
            .unwrap();
        assert!(matches!(res.outcome, IterationOutcome::Completed { .. }));
        assert_eq!(last.unwrap().stage, Stage::Experts);
    }

    #[test]
    fn golden_prefill_outputs() {
        let m = MoeModel::new(ModelConfig::default()).unwrap();
        let mut cache = UnifiedDynamicCache::new(16, 8, u64::MAX);
        let h = cache.admit(1, 4).unwrap();
        let mut toks: Vec<_> = [7u32, 3].iter().map(|&t| TokenState::new(m.embed(t))).collect();
        m.attention_for_sequence(&mut cache, 1, h, 0, 0, &mut toks).unwrap();
        let got: Vec<String> = toks[1].hidden.iter().take(4).map(|x| format!("{x:.12}")).collect();
        let fixture = include_str!("../tests/fixtures/golden_attention.txt").trim();
        assert_eq!(got.join(","), fixture);
        let mut e = engine(ModelConfig::default());
        let out = generate(&mut e, vec![seq(1, vec![7, 3], 8)], |_| false);
        let first = include_str!("../tests/fixtures/golden_first_token.txt").trim();
        assert_eq!(out[&1][0].to_string(), first);
    }
}
