//! Experiment configuration and the scheduler × rate sweep.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{calibrate, CostModel};
use crate::error::{EngineError, SchedError, WorkloadError};
use crate::metrics::{self, aggregate, AggregateReport, SummaryRow};
use crate::model::ModelConfig;
use crate::sim::{simulate, SimConfig, SimOutput};
use crate::workload::{self, TraceRecord, WorkloadSpec};
use crate::{scheduler_by_name, SCHEDULERS};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("simulation failed: {0}")]
    Sim(#[from] SchedError),
    #[error("calibration failed: {0}")]
    Calibration(#[from] EngineError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// Invariant violations inside a simulation, as opposed to bad input.
    pub fn is_simulation_failure(&self) -> bool {
        matches!(self, ExperimentError::Sim(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedulers: Vec<String>,
    pub rates: Vec<f64>,
    pub max_batch: usize,
    pub slo_ms: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub cache_bytes: u64,
    /// Stop each run at this virtual time instead of draining every job.
    pub horizon_s: Option<f64>,
    /// Replay this trace instead of generating one per rate.
    pub trace: Option<PathBuf>,
    pub model: ModelConfig,
    pub costs: CostModel,
    /// `rate` and `seed` are taken from the sweep and the global seed.
    pub workload: WorkloadSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schedulers: vec!["qllm".into(), "baseline".into()],
            rates: (1..=7).map(f64::from).collect(),
            max_batch: 32,
            slo_ms: 3000.0,
            seed: 0,
            out_dir: PathBuf::from("out"),
            cache_bytes: 1 << 40,
            horizon_s: None,
            trace: None,
            model: ModelConfig::default(),
            costs: CostModel::default(),
            workload: WorkloadSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.max_batch == 0 {
            return bad("max_batch: must be >= 1".into());
        }
        if self.schedulers.is_empty() {
            return bad("schedulers: name at least one scheduler".into());
        }
        for s in &self.schedulers {
            if !SCHEDULERS.contains(&s.as_str()) {
                return bad(format!("schedulers: unknown scheduler `{s}` (expected one of {})", SCHEDULERS.join(", ")));
            }
        }
        if self.trace.is_none() && self.rates.is_empty() {
            return bad("rates: give at least one arrival rate".into());
        }
        if let Some(r) = self.rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return bad(format!("rates: {r} is not a positive rate"));
        }
        if !(self.slo_ms.is_finite() && self.slo_ms >= 0.0) {
            return bad("slo_ms: must be >= 0".into());
        }
        if let Some(h) = self.horizon_s {
            if !(h.is_finite() && h > 0.0) {
                return bad("horizon_s: must be > 0".into());
            }
        }
        self.model.validate().map_err(|e| ExperimentError::Config(format!("model: {e}")))?;
        self.costs.validate().map_err(|e| ExperimentError::Config(format!("costs: {e}")))?;
        let probe = WorkloadSpec { rate: 1.0, ..self.workload.clone() };
        probe.validate().map_err(|e| ExperimentError::Config(format!("workload: {e}")))?;
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            model: self.model.clone(),
            costs: self.costs,
            max_batch: self.max_batch,
            cache_bytes: self.cache_bytes,
            horizon_ms: self.horizon_s.map(|h| h * 1000.0),
            seed: self.seed,
        }
    }

    pub fn workload_for(&self, rate: f64) -> WorkloadSpec {
        WorkloadSpec { rate, seed: self.seed, ..self.workload.clone() }
    }

    /// The traces to run: one per configured rate, or the replayed file.
    pub fn traces(&self) -> Result<Vec<(f64, Vec<TraceRecord>)>, ExperimentError> {
        if let Some(path) = &self.trace {
            let recs = workload::load_trace(path)?;
            let span = recs.last().map_or(0.0, |r| r.arrival_ms) / 1000.0;
            let rate = if span > 0.0 { recs.len() as f64 / span } else { 0.0 };
            return Ok(vec![(rate, recs)]);
        }
        self.rates.iter().map(|&r| Ok((r, workload::generate(&self.workload_for(r))?))).collect()
    }
}

/// One simulation of the sweep together with its aggregate report.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub scheduler: String,
    pub rate: f64,
    pub output: SimOutput,
    pub report: AggregateReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
}

impl ExperimentResult {
    pub fn run(&self, scheduler: &str, rate: f64) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.scheduler == scheduler && r.rate == rate)
    }

    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.runs
            .iter()
            .map(|r| SummaryRow {
                scheduler: r.scheduler.clone(),
                rate: r.rate,
                admitted: r.output.admitted,
                refused: r.output.refused,
                preemptions: r.output.stats.preemptions,
                report: r.report.clone(),
            })
            .collect()
    }
}

/// Runs every scheduler at every rate. BE slowdown is reported against the
/// baseline at the same rate when the baseline is part of the sweep.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    let sim_cfg = cfg.sim_config();
    let mut runs = Vec::new();
    for (rate, trace) in cfg.traces()? {
        let mut outputs = Vec::new();
        for name in &cfg.schedulers {
            let mut sched = scheduler_by_name(name)?;
            outputs.push((name.clone(), simulate(&sim_cfg, &trace, sched.as_mut())?));
        }
        let reference = match outputs.iter().find(|(n, _)| n == "baseline") {
            Some((_, out)) if !out.records.is_empty() => aggregate(&out.records, cfg.slo_ms, out.duration_ms, None).ok(),
            _ => None,
        };
        for (name, output) in outputs {
            let report = aggregate(&output.records, cfg.slo_ms, output.duration_ms, reference.as_ref()).map_err(|_| {
                ExperimentError::Config(format!("{name} at rate {rate}: no job finished; raise horizon_s or duration_s"))
            })?;
            runs.push(RunResult { scheduler: name, rate, output, report });
        }
    }
    Ok(ExperimentResult { runs })
}

pub fn rate_label(rate: f64) -> String {
    format!("rate-{rate}")
}

/// Writes `summary.csv` and `<scheduler>/rate-<r>/jobs.csv` under `out_dir`.
pub fn write_outputs(result: &ExperimentResult, out_dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for run in &result.runs {
        let dir = out_dir.join(&run.scheduler).join(rate_label(run.rate));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join("jobs.csv");
        metrics::write_jobs_csv(&path, &run.output.records).map_err(io_err(&path))?;
    }
    let path = out_dir.join("summary.csv");
    metrics::write_summary_csv(&path, &result.summary_rows()).map_err(io_err(&path))?;
    Ok(())
}

/// Per-rate ratios of `candidate` against `reference`.
pub fn ratio_table(result: &ExperimentResult, candidate: &str, reference: &str, out: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "{candidate} vs {reference}")?;
    writeln!(
        out,
        "{:>5} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "rate", "ls_ttft_x", "ls_turn_x", "be_ttft_x", "be_slowdown", "jobs/s_ratio"
    )?;
    let mut rates: Vec<f64> = result.runs.iter().map(|r| r.rate).collect();
    rates.dedup();
    for rate in rates {
        let (Some(c), Some(r)) = (result.run(candidate, rate), result.run(reference, rate)) else { continue };
        let ratio = |f: fn(&AggregateReport) -> Option<f64>| match (f(&r.report), f(&c.report)) {
            (Some(a), Some(b)) if b > 0.0 => format!("{:.2}", a / b),
            _ => "-".to_string(),
        };
        let slow = match (r.report.be.as_ref(), c.report.be.as_ref()) {
            (Some(a), Some(b)) if a.turnaround_mean > 0.0 => format!("{:.2}", b.turnaround_mean / a.turnaround_mean),
            _ => "-".to_string(),
        };
        writeln!(
            out,
            "{:>5} {:>12} {:>12} {:>12} {:>12} {:>12.3}",
            rate,
            ratio(|a| a.ls.as_ref().map(|c| c.ttft_mean)),
            ratio(|a| a.ls.as_ref().map(|c| c.turnaround_mean)),
            ratio(|a| a.be.as_ref().map(|c| c.ttft_mean)),
            slow,
            c.report.completion_rate / r.report.completion_rate,
        )?;
    }
    Ok(())
}

/// Scales the configured costs so the reference decode iteration lands in `[lo, hi]`.
pub fn calibrate_config(cfg: &ExperimentConfig, lo: f64, hi: f64) -> Result<CostModel, ExperimentError> {
    cfg.model.validate().map_err(|e| ExperimentError::Config(format!("model: {e}")))?;
    Ok(calibrate(&cfg.costs, &cfg.model, lo, hi)?)
}
