use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use expertq::experiment::{self, ExperimentConfig, ExperimentError};
use expertq::metrics;
use expertq::workload;

/// Discrete-event simulator for priority-aware MoE serving.
#[derive(Debug, Parser)]
#[command(name = "expertq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every scheduler at every rate and write CSV results.
    Run(RunArgs),
    /// Run qllm and the baseline and print per-rate ratios.
    Compare(RunArgs),
    /// Scale the cost model so one reference decode iteration lands in a range.
    Calibrate(CalibrateArgs),
    /// Generate a synthetic trace as JSON lines.
    GenTrace(GenTraceArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed (workload and audits).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Scheduler to run; repeat for several.
    #[arg(long = "scheduler")]
    schedulers: Vec<String>,
    /// Arrival rate in jobs/s; repeat for several.
    #[arg(long = "rate")]
    rates: Vec<f64>,
    /// Replay a trace file instead of generating workloads.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 300.0)]
    lo: f64,
    #[arg(long, default_value_t = 400.0)]
    hi: f64,
    /// Write the calibrated costs back into the config file.
    #[arg(long, requires = "config")]
    write: bool,
}

#[derive(Debug, Args)]
struct GenTraceArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    rate: f64,
    /// Trace length in seconds; overrides the config.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn load(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn configure(args: RunArgs) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = load(&args.common)?;
    if !args.schedulers.is_empty() {
        cfg.schedulers = args.schedulers;
    }
    if !args.rates.is_empty() {
        cfg.rates = args.rates;
    }
    if args.trace.is_some() {
        cfg.trace = args.trace;
    }
    if let Some(o) = args.out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn run(cmd: Command) -> Result<(), ExperimentError> {
    let mut stdout = io::stdout().lock();
    let out_err = |e: io::Error| ExperimentError::Io { path: PathBuf::from("<stdout>"), source: e };
    match cmd {
        Command::Run(args) => {
            let cfg = configure(args)?;
            let res = experiment::run_experiment(&cfg)?;
            experiment::write_outputs(&res, &cfg.out_dir)?;
            metrics::comparison_table(&res.summary_rows(), &mut stdout).map_err(out_err)?;
            writeln!(stdout, "results written to {}", cfg.out_dir.display()).map_err(out_err)?;
        }
        Command::Compare(args) => {
            let mut cfg = configure(args)?;
            for s in ["qllm", "baseline"] {
                if !cfg.schedulers.iter().any(|x| x == s) {
                    cfg.schedulers.push(s.to_string());
                }
            }
            let res = experiment::run_experiment(&cfg)?;
            experiment::write_outputs(&res, &cfg.out_dir)?;
            metrics::comparison_table(&res.summary_rows(), &mut stdout).map_err(out_err)?;
            writeln!(stdout).map_err(out_err)?;
            experiment::ratio_table(&res, "qllm", "baseline", &mut stdout).map_err(out_err)?;
        }
        Command::Calibrate(args) => {
            let mut cfg = load(&args.common)?;
            cfg.costs = experiment::calibrate_config(&cfg, args.lo, args.hi)?;
            let table = toml::to_string_pretty(&cfg.costs).expect("costs serialize");
            writeln!(stdout, "[costs]\n{table}").map_err(out_err)?;
            if args.write {
                let path = args.common.config.expect("clap requires --config");
                std::fs::write(&path, cfg.to_toml()).map_err(|source| ExperimentError::Io { path: path.clone(), source })?;
                writeln!(stdout, "updated {}", path.display()).map_err(out_err)?;
            }
        }
        Command::GenTrace(args) => {
            let cfg = load(&args.common)?;
            let mut spec = cfg.workload_for(args.rate);
            if let Some(d) = args.duration {
                spec.duration_s = d;
            }
            let recs = workload::generate(&spec)?;
            workload::save_trace(&recs, &args.out)?;
            writeln!(stdout, "{} jobs written to {}", recs.len(), args.out.display()).map_err(out_err)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_simulation_failure() { 2 } else { 1 })
        }
    }
}
