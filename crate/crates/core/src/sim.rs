//! The simulation loop shared by every scheduler.
//!
//! [`SimCore`] owns the engine, the sequences that are not currently
//! executing, the future arrivals and all measurement probes. A
//! [`Scheduler`] drives it one step at a time.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{CostModel, Engine, EngineEvent, EngineStats, IterationResult};
use crate::error::{ModelError, SchedError};
use crate::metrics::{JobRecord, Recorder};
use crate::model::ModelConfig;
use crate::types::{Batch, BatchId, Phase, SchedulerDirective, SeqId, Sequence, TokenId};
use crate::workload::TraceRecord;

/// Number of instants at which the cache ledger is audited per run.
pub const CACHE_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub costs: CostModel,
    pub max_batch: usize,
    pub cache_bytes: u64,
    /// Stop at this virtual time instead of draining every job.
    pub horizon_ms: Option<f64>,
    /// Seeds the cache audit instants.
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            model: ModelConfig::default(),
            costs: CostModel::default(),
            max_batch: 32,
            cache_bytes: 1 << 40,
            horizon_ms: None,
            seed: 0,
        }
    }
}

/// Arrival and prefill start of one latency-sensitive job.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsProbe {
    pub id: SeqId,
    pub arrival: f64,
    pub prefill_start: Option<f64>,
}

/// One engine run of a batch, completed or preempted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub start: f64,
    pub end: f64,
    pub has_ls: bool,
    pub phase: Phase,
    pub completed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheSample {
    pub time: f64,
    pub ledger: u64,
    pub recount: u64,
}

pub struct SimCore {
    pub engine: Engine,
    store: BTreeMap<SeqId, Sequence>,
    arrivals: VecDeque<Sequence>,
    running: usize,
    pub recorder: Recorder,
    outputs: BTreeMap<SeqId, Vec<TokenId>>,
    admitted: usize,
    ls_probes: BTreeMap<SeqId, LsProbe>,
    iterations: Vec<IterationLog>,
    samples: Vec<CacheSample>,
    sample_times: VecDeque<f64>,
    next_batch: BatchId,
    current: Option<(f64, bool, Phase)>,
}

impl SimCore {
    pub fn new(cfg: &SimConfig, trace: &[TraceRecord]) -> Result<Self, SchedError> {
        let engine = Engine::new(cfg.model.clone(), cfg.costs, cfg.cache_bytes, cfg.max_batch)?;
        let vocab = cfg.model.vocab_size;
        let arrivals = trace
            .iter()
            .enumerate()
            .map(|(i, r)| r.to_sequence(i as SeqId, vocab))
            .collect::<Result<VecDeque<_>, _>>()?;
        let last = trace.last().map_or(0.0, |r| r.arrival_ms);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_CAC4E);
        let mut times: Vec<f64> = (0..CACHE_SAMPLES).map(|_| rng.gen_range(0.0..=last)).collect();
        times.sort_by(f64::total_cmp);
        Ok(SimCore {
            engine,
            store: BTreeMap::new(),
            arrivals,
            running: 0,
            recorder: Recorder::default(),
            outputs: BTreeMap::new(),
            admitted: 0,
            ls_probes: BTreeMap::new(),
            iterations: Vec::new(),
            samples: Vec::new(),
            sample_times: times.into(),
            next_batch: 0,
            current: None,
        })
    }

    pub fn now(&self) -> f64 {
        self.engine.clock().now()
    }

    pub fn admitted(&self) -> usize {
        self.admitted
    }

    /// Jobs admitted but not yet finished.
    pub fn in_system(&self) -> usize {
        self.store.len() + self.running
    }

    pub fn sequence(&self, id: SeqId) -> Option<&Sequence> {
        self.store.get(&id)
    }

    /// Admits every arrival with `arrival_time <= now`. Jobs the cache cannot
    /// reserve room for are dropped and counted as refused.
    pub fn take_arrivals(&mut self) -> Result<Vec<SeqId>, SchedError> {
        let mut out = Vec::new();
        while self.arrivals.front().is_some_and(|s| s.arrival_time <= self.now()) {
            let seq = self.arrivals.pop_front().unwrap();
            match self.engine.admit(&seq) {
                Ok(()) => {}
                Err(ModelError::AdmissionRefused { .. }) => {
                    self.recorder.refused += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            }
            self.admitted += 1;
            if seq.priority.is_ls() {
                self.ls_probes.insert(seq.id, LsProbe { id: seq.id, arrival: seq.arrival_time, prefill_start: None });
            }
            out.push(seq.id);
            if self.store.insert(seq.id, seq).is_some() {
                return Err(SchedError::DuplicateAdmission(*out.last().unwrap()));
            }
        }
        Ok(out)
    }

    pub fn next_arrival(&self) -> Option<f64> {
        self.arrivals.front().map(|s| s.arrival_time)
    }

    /// Moves the clock to the next arrival. Returns `false` when none is left.
    pub fn idle_until_next_arrival(&mut self) -> bool {
        match self.next_arrival() {
            Some(t) => {
                self.engine.clock_mut().advance_to(t);
                self.sample_cache();
                true
            }
            None => false,
        }
    }

    /// Starts a batch from waiting sequences, in the given order.
    pub fn start_batch(&mut self, ids: &[SeqId]) -> Result<Batch, SchedError> {
        let now = self.now();
        let mut members = Vec::with_capacity(ids.len());
        for id in ids {
            let seq = self.store.remove(id).ok_or(SchedError::MissingSequence(*id))?;
            if seq.phase() == Phase::Prefill && seq.checkpoint().is_none() {
                if let Some(p) = self.ls_probes.get_mut(id) {
                    p.prefill_start.get_or_insert(now);
                }
            }
            members.push(seq);
        }
        let has_ls = members.iter().any(|s| s.priority.is_ls());
        let phase = members.first().map_or(Phase::Prefill, |s| s.phase());
        self.running = members.len();
        self.next_batch += 1;
        self.current = Some((now, has_ls, phase));
        Ok(self.engine.start(self.next_batch, members)?)
    }

    pub fn advance(&mut self, directive: SchedulerDirective) -> Result<EngineEvent, SchedError> {
        let ev = self.engine.advance(directive)?;
        self.sample_cache();
        if let EngineEvent::Done(res) = &ev {
            let (start, has_ls, phase) = self.current.take().expect("a batch was running");
            self.iterations.push(IterationLog {
                start,
                end: res.finished_at,
                has_ls,
                phase,
                completed: matches!(res.outcome, crate::engine::IterationOutcome::Completed { .. }),
            });
            self.running = 0;
        }
        Ok(ev)
    }

    /// Runs the started batch to its end without ever preempting.
    pub fn run_uninterrupted(&mut self) -> Result<IterationResult, SchedError> {
        loop {
            if let EngineEvent::Done(res) = self.advance(SchedulerDirective::Continue)? {
                return Ok(res);
            }
        }
    }

    /// Appends an emitted token. Finished sequences are evicted and recorded;
    /// others are returned to the waiting store.
    pub fn complete(&mut self, mut seq: Sequence, token: TokenId) -> Result<bool, SchedError> {
        let finished = seq.push_token(token, self.now())?;
        if finished {
            self.engine.evict(&seq)?;
            self.recorder.record(&seq)?;
            self.outputs.insert(seq.id, seq.generated().to_vec());
        } else {
            self.store.insert(seq.id, seq);
        }
        Ok(finished)
    }

    /// Returns a preempted sequence to the waiting store.
    pub fn park(&mut self, seq: Sequence) {
        self.store.insert(seq.id, seq);
    }

    pub fn discard_checkpoint(&mut self, id: SeqId) {
        if let Some(s) = self.store.get_mut(&id) {
            s.take_checkpoint();
        }
    }

    fn sample_cache(&mut self) {
        let now = self.now();
        while self.sample_times.front().is_some_and(|&t| t <= now) {
            self.sample_times.pop_front();
            let cache = self.engine.cache();
            self.samples.push(CacheSample { time: now, ledger: cache.usage(), recount: cache.recount() });
        }
    }

    fn finish(mut self, scheduler: &str, horizon: Option<f64>) -> SimOutput {
        // audit instants past the end of the run see the drained cache
        while self.sample_times.pop_front().is_some() {
            let cache = self.engine.cache();
            self.samples.push(CacheSample { time: self.now(), ledger: cache.usage(), recount: cache.recount() });
        }
        let duration_ms = horizon.unwrap_or_else(|| self.now());
        SimOutput {
            scheduler: scheduler.to_string(),
            records: self.recorder.sorted(),
            outputs: self.outputs,
            refused: self.recorder.refused,
            admitted: self.admitted,
            unfinished: self.store.len() + self.running + self.arrivals.len(),
            duration_ms,
            stats: self.engine.stats().clone(),
            costs: *self.engine.costs(),
            final_usage: self.engine.cache().usage(),
            final_recount: self.engine.cache().recount(),
            clock_charged: self.engine.clock().charged(),
            clock_idle: self.engine.clock().idle(),
            ls_probes: self.ls_probes.into_values().collect(),
            iterations: self.iterations,
            cache_samples: self.samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Ran,
    Drained,
}

pub trait Scheduler {
    fn name(&self) -> &str;
    /// Performs one scheduling decision and runs the resulting batch.
    fn step(&mut self, core: &mut SimCore) -> Result<StepOutcome, SchedError>;
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub scheduler: String,
    pub records: Vec<JobRecord>,
    /// Generated tokens of every finished job.
    pub outputs: BTreeMap<SeqId, Vec<TokenId>>,
    pub admitted: usize,
    pub refused: usize,
    pub unfinished: usize,
    pub duration_ms: f64,
    pub stats: EngineStats,
    pub costs: CostModel,
    pub final_usage: u64,
    pub final_recount: u64,
    pub clock_charged: f64,
    pub clock_idle: f64,
    pub ls_probes: Vec<LsProbe>,
    pub iterations: Vec<IterationLog>,
    pub cache_samples: Vec<CacheSample>,
}

impl SimOutput {
    /// The logged iteration whose interval contains `t`, if the engine was busy.
    pub fn iteration_at(&self, t: f64) -> Option<&IterationLog> {
        let i = self.iterations.partition_point(|it| it.end < t);
        self.iterations.get(i).filter(|it| it.start <= t)
    }

    /// Ledger and recount agree at every audit and the cache ends empty.
    pub fn cache_consistent(&self) -> bool {
        self.cache_samples.iter().all(|s| s.ledger == s.recount)
            && (self.unfinished > 0 || (self.final_usage == 0 && self.final_recount == 0))
    }
}

/// Runs `scheduler` over `trace` until every job finished, or until the
/// configured horizon.
pub fn simulate(cfg: &SimConfig, trace: &[TraceRecord], scheduler: &mut dyn Scheduler) -> Result<SimOutput, SchedError> {
    let mut core = SimCore::new(cfg, trace)?;
    loop {
        if cfg.horizon_ms.is_some_and(|h| core.now() >= h) {
            break;
        }
        if scheduler.step(&mut core)? == StepOutcome::Drained {
            break;
        }
    }
    let name = scheduler.name().to_string();
    Ok(core.finish(&name, cfg.horizon_ms))
}
