//! A runner that replays canned reports, used to exercise the whole pipeline
//! without a language-specific test harness.
//!
//! The suite directory holds `suite.json`:
//!
//! ```json
//! {
//!   "suite_id": "training1",
//!   "default": "all_pass",
//!   "reports": { "all_pass": { "schema_version": 1, "status": "ok", ... } }
//! }
//! ```
//!
//! A student file selects a report with a line `# fixture: <name>`; without
//! one the `default` report is used. Names starting with `hostile:` make the
//! runner itself misbehave inside the sandbox:
//!
//! | directive              | behaviour                                         |
//! |------------------------|---------------------------------------------------|
//! | `hostile:infinite_loop`| spins forever                                     |
//! | `hostile:memory_bomb`  | allocates and touches memory until refused        |
//! | `hostile:disk_filler`  | appends to a file forever                         |
//! | `hostile:fork`         | leaves sleeping children behind, then reports     |
//! | `hostile:read:<path>`  | tries to read `<path>`, reports what happened     |
//! | `hostile:env`          | reports its environment                           |
//! | `hostile:no_report`    | exits 0 without writing a report                  |
//! | `hostile:runner_error` | exits 3                                           |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::model::{QuestionResult, ReportStatus, TestReport};
use crate::runner::report_to_json;

pub const SUITE_FILE: &str = "suite.json";
const DIRECTIVE: &str = "# fixture:";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureSuite {
    suite_id: String,
    default: Option<String>,
    reports: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Default)]
struct Args {
    suite: Option<String>,
    dir: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn parse_args(args: &[String]) -> Result<Args, String> {
    let mut parsed = Args::default();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let mut value = || it.next().cloned().ok_or_else(|| format!("{flag} needs a value"));
        match flag.as_str() {
            "--suite" => parsed.suite = Some(value()?),
            "--dir" => parsed.dir = Some(value()?.into()),
            "--out" => parsed.out = Some(value()?.into()),
            other => return Err(format!("unknown argument {other:?}")),
        }
    }
    Ok(parsed)
}

/// Find the first `# fixture:` directive in the student files.
fn directive(dir: &Path) -> Option<String> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != SUITE_FILE))
        .collect();
    files.sort();
    for f in files {
        let Ok(bytes) = fs::read(&f) else { continue };
        let text = String::from_utf8_lossy(&bytes);
        if let Some(line) = text.lines().find(|l| l.trim_start().starts_with(DIRECTIVE)) {
            return Some(line.trim_start()[DIRECTIVE.len()..].trim().to_string());
        }
    }
    None
}

fn probe_report(output: String) -> TestReport {
    TestReport {
        status: ReportStatus::Ok,
        questions: vec![QuestionResult {
            name: "probe".into(),
            passed: false,
            traceback: output,
        }],
        style_error_count: 0,
        duration_s: 0.0,
        detail: None,
    }
}

fn write_out(out: &Path, text: &str) -> i32 {
    match fs::write(out, text) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fixture-runner: cannot write {}: {e}", out.display());
            2
        }
    }
}

fn hostile(kind: &str, dir: &Path, out: &Path) -> i32 {
    match kind {
        "infinite_loop" => {
            let mut x: u64 = 0;
            loop {
                x = std::hint::black_box(x.wrapping_add(1));
            }
        }
        "memory_bomb" => {
            let mut hoard: Vec<Vec<u8>> = Vec::new();
            loop {
                hoard.push(vec![1u8; 16 << 20]);
                std::hint::black_box(&hoard);
            }
        }
        "disk_filler" => {
            let path = dir.join("filler.dat");
            let mut f = match fs::File::create(&path) {
                Ok(f) => f,
                Err(_) => return 2,
            };
            let block = vec![b'x'; 1 << 16];
            loop {
                if f.write_all(&block).is_err() {
                    // Without SIGXFSZ, keep hammering like a naive loop would.
                    std::thread::yield_now();
                }
            }
        }
        "fork" => {
            for _ in 0..4 {
                let _ = std::process::Command::new("sleep").arg("1000").spawn();
            }
            write_out(out, &report_to_json(&probe_report("forked".into())))
        }
        "env" => {
            let mut vars: Vec<String> = std::env::vars().map(|(k, v)| format!("{k}={v}")).collect();
            vars.sort();
            write_out(out, &report_to_json(&probe_report(vars.join("\n"))))
        }
        "no_report" => 0,
        "runner_error" => 3,
        other if other.starts_with("read:") => {
            let target = &other["read:".len()..];
            let text = match fs::read_to_string(target) {
                Ok(content) => format!("READ OK: {content}"),
                Err(e) => format!("READ DENIED: {e}"),
            };
            write_out(out, &report_to_json(&probe_report(text)))
        }
        other => {
            eprintln!("fixture-runner: unknown hostile behaviour {other:?}");
            2
        }
    }
}

/// Entry point; returns the process exit status.
pub fn run(args: &[String]) -> i32 {
    let args = match parse_args(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("fixture-runner: {e}");
            return 2;
        }
    };
    let (Some(suite_id), Some(dir), Some(out)) = (args.suite, args.dir, args.out) else {
        eprintln!("usage: --suite <id> --dir <sandbox> --out <report.json>");
        return 2;
    };
    let suite: FixtureSuite = match fs::read(dir.join(SUITE_FILE))
        .map_err(|e| e.to_string())
        .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()))
    {
        Ok(s) => s,
        Err(e) => {
            eprintln!("fixture-runner: cannot load {SUITE_FILE}: {e}");
            return 2;
        }
    };
    if suite.suite_id != suite_id {
        eprintln!("fixture-runner: suite {suite_id} requested, {} staged", suite.suite_id);
        return 2;
    }
    let Some(name) = directive(&dir).or(suite.default) else {
        eprintln!("fixture-runner: no directive and no default report");
        return 2;
    };
    if let Some(kind) = name.strip_prefix("hostile:") {
        return hostile(kind, &dir, &out);
    }
    match suite.reports.get(&name) {
        Some(report) => write_out(&out, &serde_json::to_string_pretty(report).unwrap_or_default()),
        None => {
            eprintln!("fixture-runner: no canned report {name:?}");
            2
        }
    }
}
