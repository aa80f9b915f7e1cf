//! The testing processor: run each queued submission against its suite and
//! turn the outcome into a mark and a message.
//!
//! Per job, in queue order:
//!
//! 1. stage a fresh `sandbox/<submission>/` holding the suite files and the
//!    student's files, nothing else;
//! 2. refuse files with non-ASCII bytes and no encoding declaration;
//! 3. run the suite's runner under the sandbox limits;
//! 4. archive the report and logs in `results/<submission>/`;
//! 5. journal the outcome and, for completed runs, the mark;
//! 6. queue feedback (or an invitation to re-submit);
//! 7. remove the job.
//!
//! A job whose runner misbehaves (nonzero exit, missing or invalid report)
//! is flagged for an administrator and never produces a student-visible
//! mark. Staging failures are retried on later passes, then flagged.

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::bytes::Regex;
use serde::Serialize;

use crate::config::LatePolicy;
use crate::course::{path_component, Course};
use crate::error::{Error, IoContext, Result};
use crate::faults::CrashPoint;
use crate::fsqueue::{LockHandle, Next, QueueItem};
use crate::ingest::{queue_holds, TestJob};
use crate::model::{
    AssignmentKind, AssignmentSpec, MarkRecord, Points, ReportStatus, Student, SubmissionStatus, TestReport,
};
use crate::outbox::{MessageCategory, OutboundMessage};
use crate::render::{self, FeedbackContext, FeedbackRow};
use crate::runner::{parse_report, report_to_json, RunnerPlugin};
use crate::sandbox::{chown_tree, run_limited, RunLogs, RunOutcome};
use crate::scoring::{compute_assignment_mark, compute_lateness, penalized_percent};
use crate::store::{Artifact, JournalRecord, ResultsStore};

const RESULT_REPORT: &str = "report.json";

fn coding_declaration() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"coding[:=]\s*([-\w.]+)").expect("valid regex"))
}

/// The first file with non-ASCII bytes but no `coding:` declaration on its
/// first two lines.
pub fn preflight_checks<'a>(files: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> Option<String> {
    files.into_iter().find_map(|(name, bytes)| {
        if bytes.is_ascii() {
            return None;
        }
        let declared = bytes
            .split(|&b| b == b'\n')
            .take(2)
            .any(|line| coding_declaration().is_match(line));
        (!declared).then(|| name.to_string())
    })
}

pub fn sandbox_dir(course: &Course, job: &TestJob) -> PathBuf {
    course
        .path(&course.config.sandbox.sandbox_root)
        .join(path_component(&job.submission_id))
}

pub fn results_dir(course: &Course, submission_id: &str) -> PathBuf {
    course.root.join("results").join(path_component(submission_id))
}

fn copy_dir_contents(from: &Path, to: &Path) -> Result<()> {
    for entry in fs::read_dir(from).at(from)? {
        let entry = entry.at(from)?;
        let target = to.join(entry.file_name());
        if entry.path().is_dir() {
            fs::create_dir_all(&target).at(&target)?;
            copy_dir_contents(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), &target).at(&target)?;
        }
    }
    Ok(())
}

/// Create a fresh job directory with the suite and the student's files.
/// Student files never replace suite files or the report.
pub fn prepare_sandbox(course: &Course, job: &TestJob, spec: &AssignmentSpec, runner: &RunnerPlugin) -> Result<PathBuf> {
    let suite_id = spec
        .suite_id
        .as_deref()
        .ok_or_else(|| Error::contract(format!("{} has no suite", spec.subject_key)))?;
    let suite = course.suite_dir(suite_id);
    if !suite.is_dir() {
        return Err(Error::Sandbox(format!("suite directory {} missing", suite.display())));
    }
    let dir = sandbox_dir(course, job);
    if dir.exists() {
        fs::remove_dir_all(&dir).at(&dir)?;
    }
    fs::create_dir_all(&dir).at(&dir)?;
    fs::set_permissions(&dir, fs::Permissions::from_mode(0o700)).at(&dir)?;
    copy_dir_contents(&suite, &dir)?;
    for rel in &job.files {
        let src = course.root.join(rel);
        let Some(name) = src.file_name() else { continue };
        let target = dir.join(name);
        if target.exists() || name.to_str() == Some(runner.report_name.as_str()) {
            log::warn!("{}: student file {rel} clashes with a suite file, not staged", job.submission_id);
            continue;
        }
        fs::copy(&src, &target).at(&src)?;
    }
    if let Some(user) = &course.config.sandbox.run_as_user {
        chown_tree(&dir, user)?;
    }
    Ok(dir)
}

/// Outcome of one runner invocation.
#[derive(Debug)]
pub enum RunResult {
    Report(TestReport, RunOutcome),
    /// The runner itself failed; no student-visible result.
    Malfunction(String, Option<RunOutcome>),
}

fn tail(path: &Path, lines: usize) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let all: Vec<&str> = text.lines().collect();
    all[all.len().saturating_sub(lines)..].join("\n")
}

/// Run the suite in `sandbox`, writing the child's output to `logs_dir`.
pub fn run_sandboxed(course: &Course, sandbox: &Path, runner: &RunnerPlugin, suite_id: &str, logs_dir: &Path) -> Result<RunResult> {
    fs::create_dir_all(logs_dir).at(logs_dir)?;
    let stdout = logs_dir.join("stdout.log");
    let stderr = logs_dir.join("stderr.log");
    let argv = runner.argv(suite_id, sandbox);
    let outcome = match run_limited(
        &argv,
        sandbox,
        &course.config.sandbox,
        &[],
        RunLogs {
            stdout: &stdout,
            stderr: &stderr,
        },
    ) {
        Ok(o) => o,
        Err(Error::Sandbox(e)) => return Ok(RunResult::Malfunction(e, None)),
        Err(e) => return Err(e),
    };
    if outcome.termination.is_abnormal() {
        let report = TestReport::killed(outcome.termination.resource(), outcome.wall_seconds);
        return Ok(RunResult::Report(report, outcome));
    }
    let report_path = runner.report_path(sandbox);
    if outcome.termination != crate::sandbox::Termination::Exited(0) {
        let why = format!(
            "runner {} ended with {}; stderr:\n{}",
            runner.id,
            outcome.termination.resource(),
            tail(&stderr, 20)
        );
        return Ok(RunResult::Malfunction(why, Some(outcome)));
    }
    let parsed = fs::read(&report_path)
        .map_err(|e| format!("no report at {}: {e}", report_path.display()))
        .and_then(|bytes| parse_report(&bytes).map_err(|e| e.to_string()));
    Ok(match parsed {
        Ok(report) => RunResult::Report(report, outcome),
        Err(why) => RunResult::Malfunction(format!("runner {}: {why}", runner.id), Some(outcome)),
    })
}

fn status_for(report: &TestReport) -> SubmissionStatus {
    match report.status {
        ReportStatus::Ok => SubmissionStatus::Tested,
        ReportStatus::SyntaxError => SubmissionStatus::InvalidSyntax,
        ReportStatus::EncodingUndeclared => SubmissionStatus::EncodingUndeclared,
        ReportStatus::ResourceKilled => SubmissionStatus::Killed {
            resource: report.detail.clone().unwrap_or_else(|| "resource".into()),
        },
    }
}

/// Match report results to the assignment's questions, in manifest order.
/// Questions the report does not mention count as failed.
pub fn feedback_rows(spec: &AssignmentSpec, report: &TestReport) -> Vec<FeedbackRow> {
    for q in &report.questions {
        if !spec.questions.iter().any(|s| s.name == q.name) {
            log::warn!("{}: report has unknown question {}", spec.subject_key, q.name);
        }
    }
    spec.questions
        .iter()
        .map(|q| match report.questions.iter().find(|r| r.name == q.name) {
            Some(r) => FeedbackRow {
                name: q.name.clone(),
                weight: q.weight,
                passed: r.passed,
                traceback: r.traceback.clone(),
            },
            None => FeedbackRow {
                name: q.name.clone(),
                weight: q.weight,
                passed: false,
                traceback: "No result was reported for this question.".into(),
            },
        })
        .collect()
}

/// Score a completed report against the assignment's questions.
pub fn assess(spec: &AssignmentSpec, report: &TestReport, student_name: &str, contact: &str) -> Result<FeedbackContext> {
    let rows = feedback_rows(spec, report);
    let inputs: Vec<(Points, bool)> = rows.iter().map(|r| (r.weight, r.passed)).collect();
    let mark = compute_assignment_mark(&inputs)?;
    Ok(FeedbackContext {
        student_name: student_name.to_string(),
        assignment_key: spec.subject_key.clone(),
        percent: penalized_percent(&mark, report.style_error_count, spec.style_policy),
        rows,
        points: mark.points,
        total: mark.total,
        style_error_count: report.style_error_count,
        style_penalized: spec.style_policy != crate::model::StylePolicy::Off,
        contact: contact.to_string(),
    })
}

/// Turn a report into an optional mark and the message for the student.
pub fn score_and_feedback(
    course: &Course,
    job: &TestJob,
    student: &Student,
    spec: &AssignmentSpec,
    report: &TestReport,
    store: &ResultsStore,
) -> Result<(Option<MarkRecord>, OutboundMessage)> {
    let contact = &course.config.contact;
    let msg = match report.status {
        ReportStatus::SyntaxError => {
            let detail = report.detail.as_deref().unwrap_or("(no details reported)");
            return Ok((None, render::syntax_invite(student, &spec.subject_key, detail, contact)));
        }
        ReportStatus::ResourceKilled => {
            let resource = report.detail.as_deref().unwrap_or("resource");
            return Ok((None, render::killed_invite(student, &spec.subject_key, resource, contact)));
        }
        ReportStatus::EncodingUndeclared => {
            let file = report.detail.as_deref().unwrap_or("your file");
            return Ok((None, render::encoding_suggestion(student, &spec.subject_key, file, contact)));
        }
        ReportStatus::Ok => {
            let ctx = assess(spec, report, &student.display_name, contact)?;
            let percent = ctx.percent;
            let late = spec
                .deadline_for(student.site)
                .and_then(|d| compute_lateness(d, job.received_at))
                .is_some();
            let recorded = spec.kind == AssignmentKind::Laboratory
                && store.recorded(&job.student_id, &job.assignment_key).is_none();
            let recorded_percent = recorded.then(|| match (late, course.config.policies.late) {
                (true, LatePolicy::RecordZero) => 0,
                _ => percent,
            });
            let record = MarkRecord {
                submission_id: job.submission_id.clone(),
                student_id: job.student_id.clone(),
                assignment_key: job.assignment_key.clone(),
                attempt: job.attempt,
                points: ctx.points,
                total: ctx.total,
                percent,
                style_error_count: report.style_error_count,
                late,
                recorded_for_grade: recorded,
                recorded_percent,
            };
            (Some(record), render::feedback(student, &ctx)?)
        }
    };
    Ok(msg)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TestSummary {
    pub skipped: bool,
    pub processed: usize,
    pub marks: usize,
    pub invites: usize,
    pub flagged: usize,
    /// Jobs left in the queue for a later pass.
    pub retried: usize,
}

enum JobOutcome {
    Marked,
    Invited,
    Flagged,
    Retry,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

fn flag_job(course: &Course, lock: &LockHandle, store: &mut ResultsStore, item: &QueueItem, job: Option<&TestJob>, why: &str) -> Result<()> {
    course.testing.flag(lock, &item.item_id, why)?;
    course.alert_once(
        &format!("testing-{}", item.item_id),
        &format!("testing job {} flagged", item.item_id),
        &format!("{why}\n\nRequeue with: gradepipe queue requeue testing {}", item.item_id),
    )?;
    if let Some(job) = job {
        if store.submission(&job.submission_id).is_some() {
            store.append(JournalRecord::Outcome {
                submission_id: job.submission_id.clone(),
                status: SubmissionStatus::Flagged { reason: why.to_string() },
                results_dir: None,
            })?;
        }
    }
    Ok(())
}

/// Load the archived result of an earlier, interrupted pass.
fn archived_report(dir: &Path) -> Option<TestReport> {
    fs::read(dir.join(RESULT_REPORT)).ok().and_then(|b| parse_report(&b).ok())
}

fn process_job(course: &Course, lock: &LockHandle, store: &mut ResultsStore, mut item: QueueItem) -> Result<JobOutcome> {
    store.refresh()?;
    let mut job: TestJob = match item.payload_as() {
        Ok(j) => j,
        Err(e) => {
            flag_job(course, lock, store, &item, None, &format!("unreadable job: {e}"))?;
            return Ok(JobOutcome::Flagged);
        }
    };
    let (Some(spec), Some(student)) = (course.manifest.get(&job.assignment_key), course.roster.get(&job.student_id)) else {
        flag_job(course, lock, store, &item, Some(&job), "assignment or student no longer configured")?;
        return Ok(JobOutcome::Flagged);
    };
    let results = results_dir(course, &job.submission_id);
    let report = match archived_report(&results) {
        Some(r) => r,
        None => {
            let runner = course.runner_for(spec.runner.as_deref())?;
            let sandbox = match prepare_sandbox(course, &job, spec, &runner) {
                Ok(d) => d,
                Err(e) => {
                    job.stage_failures += 1;
                    log::warn!("{}: staging failed ({}): {e}", job.submission_id, job.stage_failures);
                    if job.stage_failures >= course.config.policies.max_stage_attempts {
                        flag_job(course, lock, store, &item, Some(&job), &format!("staging failed {} times: {e}", job.stage_failures))?;
                        return Ok(JobOutcome::Flagged);
                    }
                    item.payload = serde_json::to_value(&job).map_err(|e| Error::json("test job", e))?;
                    item.attempts += 1;
                    course.testing.update(lock, &item)?;
                    return Ok(JobOutcome::Retry);
                }
            };
            let required: Vec<(String, Vec<u8>)> = spec
                .required_files
                .iter()
                .map(|f| (f.clone(), fs::read(sandbox.join(f)).unwrap_or_default()))
                .collect();
            let result = match preflight_checks(required.iter().map(|(n, b)| (n.as_str(), b.as_slice()))) {
                Some(file) => RunResult::Report(TestReport::encoding_undeclared(file), RunOutcome {
                    termination: crate::sandbox::Termination::Exited(0),
                    wall_seconds: 0.0,
                    confined: false,
                }),
                None => {
                    let suite_id = spec.suite_id.as_deref().unwrap_or_default();
                    run_sandboxed(course, &sandbox, &runner, suite_id, &results)?
                }
            };
            fs::create_dir_all(&results).at(&results)?;
            let raw = runner.report_path(&sandbox);
            if raw.is_file() {
                let _ = fs::copy(&raw, results.join("runner-report.json"));
            }
            let _ = fs::remove_dir_all(&sandbox);
            match result {
                RunResult::Malfunction(why, outcome) => {
                    if let Some(o) = outcome {
                        write_atomic(&results.join("run.json"), &serde_json::to_vec_pretty(&o).unwrap_or_default())?;
                    }
                    flag_job(course, lock, store, &item, Some(&job), &why)?;
                    return Ok(JobOutcome::Flagged);
                }
                RunResult::Report(report, outcome) => {
                    write_atomic(&results.join("run.json"), &serde_json::to_vec_pretty(&outcome).unwrap_or_default())?;
                    write_atomic(&results.join(RESULT_REPORT), report_to_json(&report).as_bytes())?;
                    report
                }
            }
        }
    };
    course.faults.hit(CrashPoint::TestAfterRun)?;

    let id = &job.submission_id;
    let status = status_for(&report);
    if store.results_dir(id).is_none() {
        let rel = results.strip_prefix(&course.root).unwrap_or(&results).display().to_string();
        store.append(JournalRecord::Outcome {
            submission_id: id.clone(),
            status: status.clone(),
            results_dir: Some(rel),
        })?;
    }
    let (mark, message) = score_and_feedback(course, &job, student, spec, &report, store)?;
    let marked = mark.is_some();
    if let Some(mark) = mark {
        if store.mark_for(id).is_none() {
            store.append(JournalRecord::Mark(mark))?;
        }
    }
    course.faults.hit(CrashPoint::TestAfterMark)?;

    if !store.has_marker(id, Artifact::Feedback) {
        let queued = queue_holds(&course.outgoing, "ref_id", id, Some(message.category))?;
        let item_id = if queued { "existing".to_string() } else { course.send(&message.with_ref(id.clone()))? };
        store.append(JournalRecord::Enqueued {
            submission_id: id.clone(),
            artifact: Artifact::Feedback,
            item_id,
        })?;
    }
    course.faults.hit(CrashPoint::TestAfterFeedback)?;
    course.testing.remove(&item.item_id)?;
    Ok(if marked { JobOutcome::Marked } else { JobOutcome::Invited })
}

/// One pass over the testing queue under its lock.
pub fn process_testing_queue(course: &Course) -> Result<TestSummary> {
    let Some(lock) = course.testing.acquire_lock()? else {
        return Ok(TestSummary {
            skipped: true,
            ..Default::default()
        });
    };
    let mut summary = TestSummary::default();
    let outcome = testing_pass(course, &lock, &mut summary);
    if matches!(&outcome, Err(e) if e.is_injected_crash()) {
        return outcome.map(|_| summary);
    }
    course.testing.release_lock(lock)?;
    outcome.map(|_| summary)
}

fn testing_pass(course: &Course, lock: &LockHandle, summary: &mut TestSummary) -> Result<()> {
    let mut store = course.store()?;
    let mut cursor: Option<String> = None;
    while let Some(next) = course.testing.dequeue_after(lock, cursor.as_deref())? {
        cursor = Some(next.item_id().to_string());
        let item = match next {
            Next::Item(item) => item,
            Next::Unreadable { item_id, error } => {
                course.testing.flag(lock, &item_id, &error.to_string())?;
                course.alert_once(&format!("testing-{item_id}"), &format!("unreadable testing job {item_id}"), &error.to_string())?;
                summary.flagged += 1;
                continue;
            }
        };
        let item_id = item.item_id.clone();
        summary.processed += 1;
        match process_job(course, lock, &mut store, item) {
            Ok(JobOutcome::Marked) => summary.marks += 1,
            Ok(JobOutcome::Invited) => summary.invites += 1,
            Ok(JobOutcome::Flagged) => summary.flagged += 1,
            Ok(JobOutcome::Retry) => summary.retried += 1,
            Err(e) if e.is_injected_crash() => return Err(e),
            Err(e) => {
                summary.retried += 1;
                log::error!("testing job {item_id}: {e}");
                course.alert_once(
                    &format!("testing-error-{item_id}"),
                    &format!("testing job {item_id} failed"),
                    &format!("{e}\n\nThe job stays queued and is retried every pass."),
                )?;
                store = course.store()?;
            }
        }
    }
    Ok(())
}

/// Category of the student-visible message a report leads to.
pub fn message_category(report: &TestReport) -> MessageCategory {
    match report.status {
        ReportStatus::Ok => MessageCategory::Feedback,
        _ => MessageCategory::Invite,
    }
}
