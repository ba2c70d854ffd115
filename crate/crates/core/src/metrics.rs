//! Per-job records, aggregate reports and CSV output.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::MetricsError;
use crate::types::{Priority, SeqId, Sequence};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobRecord {
    pub id: SeqId,
    pub priority: Priority,
    pub arrival: f64,
    pub first_token: f64,
    pub finish: f64,
    pub prompt_len: usize,
    pub output_len: usize,
}

impl JobRecord {
    pub fn ttft(&self) -> f64 {
        self.first_token - self.arrival
    }

    pub fn turnaround(&self) -> f64 {
        self.finish - self.arrival
    }
}

/// Append-only store of finished jobs.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    records: Vec<JobRecord>,
    seen: HashSet<SeqId>,
    /// Jobs turned away because the cache could not reserve room for them.
    pub refused: usize,
}

impl Recorder {
    pub fn record(&mut self, seq: &Sequence) -> Result<&JobRecord, MetricsError> {
        let (Some(first_token), Some(finish)) = (seq.first_token_time(), seq.finish_time()) else {
            return Err(MetricsError::Unfinished(seq.id));
        };
        if !self.seen.insert(seq.id) {
            return Err(MetricsError::Duplicate(seq.id));
        }
        self.records.push(JobRecord {
            id: seq.id,
            priority: seq.priority,
            arrival: seq.arrival_time,
            first_token,
            finish,
            prompt_len: seq.prompt.len(),
            output_len: seq.generated().len(),
        });
        Ok(self.records.last().unwrap())
    }

    pub fn records(&self) -> &[JobRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records ordered by sequence id.
    pub fn sorted(&self) -> Vec<JobRecord> {
        let mut v = self.records.clone();
        v.sort_by_key(|r| r.id);
        v
    }
}

/// Nearest-rank percentile: the value at rank `ceil(p * n)` (1-based) of the
/// ascending sample. `p` is a fraction in (0, 1].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    pub count: usize,
    pub ttft_mean: f64,
    pub ttft_median: f64,
    pub ttft_p99: f64,
    pub turnaround_mean: f64,
    pub turnaround_p99: f64,
    pub slo_attainment: f64,
}

impl ClassStats {
    fn from_records<'a>(records: impl Iterator<Item = &'a JobRecord>, slo_ms: f64) -> Option<ClassStats> {
        let mut ttft = Vec::new();
        let mut turn = Vec::new();
        for r in records {
            ttft.push(r.ttft());
            turn.push(r.turnaround());
        }
        if ttft.is_empty() {
            return None;
        }
        let attained = ttft.iter().filter(|&&t| t <= slo_ms).count() as f64 / ttft.len() as f64;
        let (tm, rm) = (mean(&ttft), mean(&turn));
        ttft.sort_by(f64::total_cmp);
        turn.sort_by(f64::total_cmp);
        Some(ClassStats {
            count: ttft.len(),
            ttft_mean: tm,
            ttft_median: percentile(&ttft, 0.5),
            ttft_p99: percentile(&ttft, 0.99),
            turnaround_mean: rm,
            turnaround_p99: percentile(&turn, 0.99),
            slo_attainment: attained,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub ls: Option<ClassStats>,
    pub be: Option<ClassStats>,
    pub all: ClassStats,
    pub finished: usize,
    pub duration_ms: f64,
    /// Finished jobs per virtual second.
    pub completion_rate: f64,
    pub slo_ms: f64,
    /// Mean BE turnaround over the reference run's mean BE turnaround.
    pub be_slowdown: Option<f64>,
}

pub fn aggregate(
    records: &[JobRecord],
    slo_ms: f64,
    duration_ms: f64,
    reference: Option<&AggregateReport>,
) -> Result<AggregateReport, MetricsError> {
    let all = ClassStats::from_records(records.iter(), slo_ms).ok_or(MetricsError::Empty)?;
    let ls = ClassStats::from_records(records.iter().filter(|r| r.priority.is_ls()), slo_ms);
    let be = ClassStats::from_records(records.iter().filter(|r| !r.priority.is_ls()), slo_ms);
    let be_slowdown = match (reference.and_then(|r| r.be.as_ref()), be.as_ref()) {
        (Some(base), Some(cur)) if base.turnaround_mean > 0.0 => Some(cur.turnaround_mean / base.turnaround_mean),
        _ => None,
    };
    let completion_rate = if duration_ms > 0.0 { records.len() as f64 / (duration_ms / 1000.0) } else { 0.0 };
    Ok(AggregateReport {
        ls,
        be,
        all,
        finished: records.len(),
        duration_ms,
        completion_rate,
        slo_ms,
        be_slowdown,
    })
}

pub const JOBS_HEADER: [&str; 7] = ["id", "priority", "arrival_ms", "ttft_ms", "turnaround_ms", "prompt_len", "output_len"];

pub fn write_jobs_csv(path: &Path, records: &[JobRecord]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(JOBS_HEADER)?;
    for r in records {
        w.write_record([
            r.id.to_string(),
            r.priority.label().to_string(),
            format!("{:.3}", r.arrival),
            format!("{:.3}", r.ttft()),
            format!("{:.3}", r.turnaround()),
            r.prompt_len.to_string(),
            r.output_len.to_string(),
        ])?;
    }
    w.flush()
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scheduler: String,
    pub rate: f64,
    pub admitted: usize,
    pub refused: usize,
    pub preemptions: u64,
    pub report: AggregateReport,
}

pub const SUMMARY_HEADER: [&str; 25] = [
    "scheduler",
    "rate",
    "admitted",
    "finished",
    "refused",
    "duration_ms",
    "completion_rate",
    "preemptions",
    "ls_count",
    "ls_ttft_mean_ms",
    "ls_ttft_median_ms",
    "ls_ttft_p99_ms",
    "ls_turnaround_mean_ms",
    "ls_turnaround_p99_ms",
    "ls_slo_attainment",
    "be_count",
    "be_ttft_mean_ms",
    "be_ttft_median_ms",
    "be_ttft_p99_ms",
    "be_turnaround_mean_ms",
    "be_turnaround_p99_ms",
    "be_slo_attainment",
    "all_ttft_mean_ms",
    "all_turnaround_mean_ms",
    "be_slowdown",
];

fn class_fields(c: Option<&ClassStats>) -> Vec<String> {
    match c {
        Some(c) => vec![
            c.count.to_string(),
            format!("{:.3}", c.ttft_mean),
            format!("{:.3}", c.ttft_median),
            format!("{:.3}", c.ttft_p99),
            format!("{:.3}", c.turnaround_mean),
            format!("{:.3}", c.turnaround_p99),
            format!("{:.4}", c.slo_attainment),
        ],
        None => vec!["0".into(), String::new(), String::new(), String::new(), String::new(), String::new(), String::new()],
    }
}

impl SummaryRow {
    pub fn fields(&self) -> Vec<String> {
        let r = &self.report;
        let mut v = vec![
            self.scheduler.clone(),
            format!("{}", self.rate),
            self.admitted.to_string(),
            r.finished.to_string(),
            self.refused.to_string(),
            format!("{:.3}", r.duration_ms),
            format!("{:.4}", r.completion_rate),
            self.preemptions.to_string(),
        ];
        v.extend(class_fields(r.ls.as_ref()));
        v.extend(class_fields(r.be.as_ref()));
        v.push(format!("{:.3}", r.all.ttft_mean));
        v.push(format!("{:.3}", r.all.turnaround_mean));
        v.push(r.be_slowdown.map(|s| format!("{s:.4}")).unwrap_or_default());
        v
    }
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for row in rows {
        w.write_record(row.fields())?;
    }
    w.flush()
}

/// Side-by-side LS/BE comparison of every scheduler at every rate.
pub fn comparison_table(rows: &[SummaryRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "{:<14} {:>5} {:>8} {:>12} {:>12} {:>12} {:>12} {:>9} {:>8}",
        "scheduler", "rate", "finished", "ls_ttft_ms", "ls_turn_ms", "be_ttft_ms", "be_turn_ms", "jobs/s", "ls_slo"
    )?;
    let opt = |c: Option<&ClassStats>, f: fn(&ClassStats) -> f64| c.map_or("-".to_string(), |c| format!("{:.1}", f(c)));
    for row in rows {
        let r = &row.report;
        writeln!(
            out,
            "{:<14} {:>5} {:>8} {:>12} {:>12} {:>12} {:>12} {:>9.3} {:>8}",
            row.scheduler,
            row.rate,
            r.finished,
            opt(r.ls.as_ref(), |c| c.ttft_mean),
            opt(r.ls.as_ref(), |c| c.turnaround_mean),
            opt(r.be.as_ref(), |c| c.ttft_mean),
            opt(r.be.as_ref(), |c| c.turnaround_mean),
            r.completion_rate,
            r.ls.as_ref().map_or("-".to_string(), |c| format!("{:.3}", c.slo_attainment)),
        )?;
    }
    Ok(())
}
