#![allow(dead_code)]

use expertq::model::ModelConfig;
use expertq::sched::{NeverPreempt, Policy, QllmScheduler, QueueSnapshot};
use expertq::sim::{simulate, SimConfig, SimOutput};
use expertq::types::{EngineReport, SchedulerDirective};
use expertq::workload::{generate, LengthDist, TraceRecord, WorkloadSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Preempts at each report with probability `p`, independent of the queues.
pub struct RandomPreempt {
    rng: ChaCha8Rng,
    p: f64,
}

impl RandomPreempt {
    pub fn new(seed: u64, p: f64) -> Self {
        RandomPreempt { rng: ChaCha8Rng::seed_from_u64(seed), p }
    }
}

impl Policy for RandomPreempt {
    fn name(&self) -> &str {
        "random"
    }

    fn decide(&mut self, _: &EngineReport, _: &QueueSnapshot) -> SchedulerDirective {
        if self.rng.gen_bool(self.p) {
            SchedulerDirective::PreemptAtNextBoundary
        } else {
            SchedulerDirective::Continue
        }
    }
}

pub fn small_model(seed: u64) -> ModelConfig {
    ModelConfig { num_layers: 3, hidden_dim: 4, num_experts: 4, top_k: 2, vocab_size: 64, seed }
}

pub fn small_sim(seed: u64, max_batch: usize) -> SimConfig {
    SimConfig { model: small_model(seed), max_batch, seed, ..SimConfig::default() }
}

pub fn small_trace(seed: u64, rate: f64, duration_s: f64) -> Vec<TraceRecord> {
    generate(&WorkloadSpec {
        rate,
        ls_fraction: 0.3,
        prompt: LengthDist { mean: 10.0, sigma: 0.6, min: 1, max: 40 },
        output: LengthDist { mean: 6.0, sigma: 0.6, min: 1, max: 20 },
        duration_s,
        seed,
    })
    .unwrap()
}

/// Every job run alone, one at a time, never preempted.
pub fn solo_oracle(cfg: &SimConfig, trace: &[TraceRecord]) -> SimOutput {
    let cfg = SimConfig { max_batch: 1, ..cfg.clone() };
    simulate(&cfg, trace, &mut QllmScheduler::new(Box::new(NeverPreempt))).unwrap()
}

pub fn run_random(cfg: &SimConfig, trace: &[TraceRecord], seed: u64, p: f64) -> SimOutput {
    simulate(cfg, trace, &mut QllmScheduler::new(Box::new(RandomPreempt::new(seed, p)))).unwrap()
}
