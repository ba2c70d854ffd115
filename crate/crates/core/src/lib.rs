//! Discrete-event simulator for priority-aware, expert-level preemptive
//! scheduling of mixture-of-experts inference, alongside an FCFS
//! continuous-batching baseline.

pub mod baseline;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod sched;
pub mod sim;
pub mod types;
pub mod workload;

use error::SchedError;
use sim::Scheduler;

/// Scheduler names accepted by [`scheduler_by_name`].
pub const SCHEDULERS: [&str; 3] = ["qllm", "baseline", "never-preempt"];

pub fn scheduler_by_name(name: &str) -> Result<Box<dyn Scheduler>, SchedError> {
    match name {
        "baseline" => Ok(Box::new(baseline::BaselineScheduler::new())),
        "qllm" | "never-preempt" => Ok(Box::new(sched::QllmScheduler::new(sched::policy_by_name(name)?))),
        other => Err(SchedError::UnknownScheduler(other.to_string())),
    }
}
