use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
schedulers = ["qllm", "baseline"]
rates = [2.0, 4.0]
seed = 3

[model]
num_layers = 2
hidden_dim = 4
num_experts = 4
vocab_size = 64

[workload]
duration_s = 4.0
prompt = { mean = 12.0, sigma = 0.5, min = 2, max = 40 }
output = { mean = 8.0, sigma = 0.5, min = 1, max = 24 }
"#;

fn expertq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_expertq")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_writes_one_jobs_file_per_scheduler_and_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let o = expertq(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.contains("ls_ttft_ms") && stdout.contains("be_ttft_ms"));
    for s in ["qllm", "baseline"] {
        for r in ["rate-2", "rate-4"] {
            assert!(out.join(s).join(r).join("jobs.csv").is_file(), "{s}/{r}");
        }
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
}

#[test]
fn flags_override_the_config_and_runs_are_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = expertq(&["run", "--config", &cfg, "--scheduler", "baseline", "--rate", "3", "--seed", "9", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        assert!(!out.join("qllm").exists());
        bytes.push(fs::read(out.join("baseline/rate-3/jobs.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn compare_prints_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let o = expertq(&["compare", "--config", &cfg, "--scheduler", "qllm", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.contains("qllm vs baseline"));
    assert!(stdout.contains("be_slowdown"));
}

#[test]
fn invalid_config_exits_1_with_the_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "max_batch = 0\n").unwrap();
    let o = expertq(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("max_batch"));

    fs::write(&p, "max_batchh = 3\n").unwrap();
    let o = expertq(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("max_batchh"));

    let o = expertq(&["run", "--scheduler", "lifo"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("lifo"));

    let o = expertq(&["run", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn generated_traces_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let trace = dir.path().join("t.jsonl");
    let o = expertq(&["gen-trace", "--config", &cfg, "--rate", "5", "--duration", "3", "--out", trace.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let body = fs::read_to_string(&trace).unwrap();
    assert!(body.lines().count() > 3);
    assert!(body.lines().next().unwrap().contains("\"arrival_ms\""));
    let out = dir.path().join("out");
    let o = expertq(&["run", "--config", &cfg, "--trace", trace.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);

    fs::write(&trace, "{\"arrival_ms\": 5.0, \"priority\": \"LS\", \"prompt_len\": 0, \"output_len\": 3, \"seed\": 1}\n").unwrap();
    let o = expertq(&["run", "--config", &cfg, "--trace", trace.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("line 1"));
}

#[test]
fn calibrate_reports_and_writes_costs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = expertq(&["calibrate", "--config", &cfg, "--lo", "0", "--hi", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("infeasible"));

    let o = expertq(&["calibrate", "--config", &cfg, "--lo", "100", "--hi", "120", "--write"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("[costs]"));
    let written = fs::read_to_string(&cfg).unwrap();
    assert!(written.contains("[costs]"));
    // the rewritten file is still a valid config
    let o = expertq(&["gen-trace", "--config", &cfg, "--rate", "1", "--out", dir.path().join("x.jsonl").to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
}
