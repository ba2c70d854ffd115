//! Synthetic Poisson workloads and JSONL trace files.
//!
//! A trace file holds one JSON object per line with the fields
//! `arrival_ms, priority, prompt_len, output_len, seed` in that order.
//! `priority` is `"LS"` or `"BE"`; `seed` determines the prompt token ids.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, WorkloadError};
use crate::types::{Priority, SeqId, Sequence, TokenId};

/// Lognormal length distribution given by its mean and log-space sigma,
/// rounded and clamped to `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthDist {
    pub mean: f64,
    pub sigma: f64,
    pub min: usize,
    pub max: usize,
}

impl LengthDist {
    fn validate(&self, name: &str) -> Result<(), WorkloadError> {
        if !(self.mean > 0.0 && self.sigma >= 0.0 && self.sigma.is_finite()) || self.min == 0 || self.min > self.max {
            return Err(WorkloadError::InvalidSpec(format!("{name}: need mean > 0, sigma >= 0, 1 <= min <= max")));
        }
        Ok(())
    }

    /// Log-space location giving the configured arithmetic mean.
    pub fn mu(&self) -> f64 {
        self.mean.ln() - self.sigma * self.sigma / 2.0
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let d = LogNormal::new(self.mu(), self.sigma).expect("validated");
        let x: f64 = d.sample(rng);
        (x.round() as usize).clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Jobs per virtual second.
    pub rate: f64,
    pub ls_fraction: f64,
    pub prompt: LengthDist,
    pub output: LengthDist,
    /// Arrivals are generated over `[0, duration_s)` virtual seconds.
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            rate: 1.0,
            ls_fraction: 0.2,
            prompt: LengthDist { mean: 180.0, sigma: 0.8, min: 4, max: 2048 },
            output: LengthDist { mean: 220.0, sigma: 0.9, min: 1, max: 512 },
            duration_s: 60.0,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(WorkloadError::InvalidSpec("rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ls_fraction) {
            return Err(WorkloadError::InvalidSpec("ls_fraction must be in [0, 1]".into()));
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(WorkloadError::InvalidSpec("duration_s must be >= 0".into()));
        }
        self.prompt.validate("prompt")?;
        self.output.validate("output")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub arrival_ms: f64,
    pub priority: Priority,
    pub prompt_len: usize,
    pub output_len: usize,
    pub seed: u64,
}

impl TraceRecord {
    /// Prompt token ids drawn from `1..vocab` so prompts never contain the
    /// end-of-sequence id.
    pub fn prompt_tokens(&self, vocab: usize) -> Vec<TokenId> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.prompt_len).map(|_| rng.gen_range(1..vocab.max(2)) as TokenId).collect()
    }

    pub fn to_sequence(&self, id: SeqId, vocab: usize) -> Result<Sequence, CoreError> {
        Sequence::new(id, self.prompt_tokens(vocab), self.priority, self.output_len, self.arrival_ms)
    }
}

pub fn generate(spec: &WorkloadSpec) -> Result<Vec<TraceRecord>, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gap = Exp::new(spec.rate).expect("validated");
    let horizon_ms = spec.duration_s * 1000.0;
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t += gap.sample(&mut rng) * 1000.0;
        if t >= horizon_ms {
            break;
        }
        let priority = if rng.gen_bool(spec.ls_fraction) { Priority::LatencySensitive } else { Priority::BestEffort };
        let prompt_len = spec.prompt.sample(&mut rng);
        let output_len = spec.output.sample(&mut rng);
        out.push(TraceRecord { arrival_ms: t, priority, prompt_len, output_len, seed: rng.gen() });
    }
    Ok(out)
}

fn check_record(r: &TraceRecord, line: usize) -> Result<(), WorkloadError> {
    let bad = |m: &str| Err(WorkloadError::Parse { line, message: m.to_string() });
    if !(r.arrival_ms.is_finite() && r.arrival_ms >= 0.0) {
        return bad("arrival_ms must be finite and >= 0");
    }
    if r.prompt_len == 0 {
        return bad("prompt_len must be >= 1");
    }
    if r.output_len == 0 {
        return bad("output_len must be >= 1");
    }
    Ok(())
}

/// Parses JSONL trace text. Blank lines are skipped; lines are 1-based in errors.
pub fn parse_trace(reader: impl BufRead) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut out: Vec<TraceRecord> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TraceRecord =
            serde_json::from_str(&line).map_err(|e| WorkloadError::Parse { line: line_no, message: e.to_string() })?;
        check_record(&r, line_no)?;
        if let Some(prev) = out.last() {
            if r.arrival_ms < prev.arrival_ms {
                return Err(WorkloadError::OutOfOrder { line: line_no, arrival: r.arrival_ms, previous: prev.arrival_ms });
            }
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>, WorkloadError> {
    parse_trace(BufReader::new(File::open(path)?))
}

pub fn save_trace(records: &[TraceRecord], path: &Path) -> Result<(), WorkloadError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| WorkloadError::Parse { line: 0, message: e.to_string() })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}
