//! Runner plugins and the report file they leave behind.
//!
//! A runner is any program launched as
//! `<command...> --suite <suite_id> --dir <sandbox> --out <report>` (the
//! exact argument template is configurable). It talks to the pipeline only
//! through its exit status and `report.json`:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "status": "ok",
//!   "questions": [{"name": "test_distance", "passed": true, "traceback": ""}],
//!   "style_error_count": 0,
//!   "duration_s": 0.42,
//!   "detail": null
//! }
//! ```
//!
//! `status` is one of `ok`, `syntax_error`, `resource_killed`,
//! `encoding_undeclared`. `detail` is optional. Exit status 0 means the run
//! completed (failed tests included); anything else is a runner malfunction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunnerConfig;
use crate::error::{Error, Result};
use crate::model::{QuestionResult, ReportStatus, TestReport};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportDoc {
    schema_version: u32,
    status: ReportStatus,
    questions: Vec<QuestionResult>,
    style_error_count: u32,
    duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    detail: Option<String>,
}

pub fn parse_report(bytes: &[u8]) -> Result<TestReport> {
    let raw: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| Error::Report(format!("not JSON: {e}")))?;
    let version = raw.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(REPORT_SCHEMA_VERSION as u64) {
        return Err(Error::SchemaVersion {
            context: "runner report".into(),
            found: version.unwrap_or(0) as u32,
            expected: REPORT_SCHEMA_VERSION,
        });
    }
    let doc: ReportDoc =
        serde_json::from_value(raw).map_err(|e| Error::Report(format!("bad report: {e}")))?;
    let report = TestReport {
        status: doc.status,
        questions: doc.questions,
        style_error_count: doc.style_error_count,
        duration_s: doc.duration_s,
        detail: doc.detail,
    };
    report.check_invariants()?;
    Ok(report)
}

pub fn report_to_json(report: &TestReport) -> String {
    let doc = ReportDoc {
        schema_version: REPORT_SCHEMA_VERSION,
        status: report.status,
        questions: report.questions.clone(),
        style_error_count: report.style_error_count,
        duration_s: report.duration_s,
        detail: report.detail.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("report serializes")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunnerPlugin {
    pub id: String,
    pub command: Vec<String>,
    pub report_name: String,
}

impl RunnerPlugin {
    pub fn from_config(id: &str, cfg: &RunnerConfig) -> Self {
        RunnerPlugin {
            id: id.to_string(),
            command: cfg.command.clone(),
            report_name: cfg.report.clone(),
        }
    }

    pub fn report_path(&self, sandbox: &Path) -> PathBuf {
        sandbox.join(&self.report_name)
    }

    /// Substitute `{suite}`, `{dir}` and `{out}` in the command template.
    pub fn argv(&self, suite_id: &str, sandbox: &Path) -> Vec<String> {
        let dir = sandbox.display().to_string();
        let out = self.report_path(sandbox).display().to_string();
        self.command
            .iter()
            .map(|a| {
                a.replace("{suite}", suite_id)
                    .replace("{dir}", &dir)
                    .replace("{out}", &out)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_minimal_report() {
        let r = parse_report(
            br#"{"schema_version":1,"status":"ok","questions":[{"name":"a","passed":true,"traceback":""}],"style_error_count":2,"duration_s":0.5}"#,
        )
        .unwrap();
        assert_eq!(r.status, ReportStatus::Ok);
        assert_eq!(r.style_error_count, 2);
        assert_eq!(r.detail, None);
    }

    #[test]
    fn rejects_bad_reports() {
        assert!(parse_report(b"not json").is_err());
        assert!(matches!(
            parse_report(br#"{"schema_version":2,"status":"ok","questions":[],"style_error_count":0,"duration_s":0}"#),
            Err(Error::SchemaVersion { found: 2, .. })
        ));
        assert!(parse_report(br#"{"schema_version":1,"status":"weird","questions":[],"style_error_count":0,"duration_s":0}"#).is_err());
        assert!(parse_report(br#"{"schema_version":1,"status":"ok","questions":[],"style_error_count":-1,"duration_s":0}"#).is_err());
        assert!(parse_report(br#"{"schema_version":1,"status":"ok","questions":[],"style_error_count":0,"duration_s":0,"extra":1}"#).is_err());
    }

    #[test]
    fn argv_substitution() {
        let p = RunnerPlugin {
            id: "py".into(),
            command: vec!["runner".into(), "--suite".into(), "{suite}".into(), "--out={out}".into()],
            report_name: "report.json".into(),
        };
        assert_eq!(
            p.argv("lab4", Path::new("/sb/1")),
            vec!["runner", "--suite", "lab4", "--out=/sb/1/report.json"]
        );
    }

    fn arb_report() -> impl Strategy<Value = TestReport> {
        let status = prop_oneof![
            Just(ReportStatus::Ok),
            Just(ReportStatus::SyntaxError),
            Just(ReportStatus::ResourceKilled),
            Just(ReportStatus::EncodingUndeclared),
        ];
        let q = ("[a-z_]{1,12}", any::<bool>(), ".{0,40}").prop_map(|(name, passed, tb)| QuestionResult {
            name,
            passed,
            traceback: if passed { String::new() } else { tb },
        });
        (status, prop::collection::vec(q, 0..6), any::<u32>(), 0u32..100_000, proptest::option::of(".{0,20}"))
            .prop_map(|(status, questions, n, ms, detail)| TestReport {
                status,
                questions,
                style_error_count: n,
                duration_s: ms as f64 / 1000.0,
                detail,
            })
    }

    proptest! {
        #[test]
        fn report_round_trips(report in arb_report()) {
            prop_assert_eq!(parse_report(report_to_json(&report).as_bytes()).unwrap(), report);
        }
    }
}
