//! Outputs derived from the results journal: weekly summaries, reminders,
//! spreadsheet export, activity statistics, exam pre-marking and anonymised
//! samples for code review.
//!
//! Everything here reads a snapshot of the journal. The only records it
//! appends are `weekly_sent` markers.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, TimeZone};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::Serialize;

use crate::course::{path_component, Course};
use crate::error::{Error, IoContext, Result};
use crate::ingest::TestJob;
use crate::model::{now, AssignmentKind, ReportStatus, Student, Timestamp};
use crate::outbox::OutboundMessage;
use crate::render::{self, WeeklyContext, WeeklyLine, WeeklyStatus};
use crate::runner::report_to_json;
use crate::scoring::compute_lateness;
use crate::stats::{submission_histogram, submission_timelines, SubmissionEvent};
use crate::store::{JournalRecord, ResultsStore};
use crate::testexec::{self, prepare_sandbox, preflight_checks, run_sandboxed, RunResult};

/// Lines of a student's weekly summary: one per tested laboratory whose
/// deadline for the student's site is not after `as_of`, in manifest order.
pub fn weekly_lines(course: &Course, store: &ResultsStore, student: &Student, as_of: Timestamp) -> Vec<WeeklyLine> {
    let mut lines = Vec::new();
    for spec in course.manifest.assignments() {
        if spec.kind != AssignmentKind::Laboratory || spec.is_receive_only() {
            continue;
        }
        let Some(deadline) = spec.deadline_for(student.site) else { continue };
        if deadline > as_of {
            continue;
        }
        let recorded = store.recorded(&student.student_id, &spec.subject_key);
        let first = store
            .submissions_for(&student.student_id, &spec.subject_key)
            .into_iter()
            .next();
        let graded = recorded
            .and_then(|m| store.submission(&m.submission_id))
            .or(first);
        let status = match graded {
            None => WeeklyStatus::NotSubmitted,
            Some(sub) => match compute_lateness(deadline, sub.received_at) {
                None => WeeklyStatus::OnTime,
                Some(by) => WeeklyStatus::Late {
                    at: render::local_stamp(&sub.received_at.with_timezone(&course.tz)),
                    by,
                },
            },
        };
        lines.push(WeeklyLine {
            assignment_key: spec.subject_key.clone(),
            percent: recorded.map(|m| m.recorded_percent.unwrap_or(m.percent)).unwrap_or(0),
            status,
        });
    }
    lines
}

/// The weekly message for one student. A student who has never submitted
/// anything gets a reminder instead.
pub fn weekly_summary(course: &Course, store: &ResultsStore, student: &Student, as_of: Timestamp) -> Result<OutboundMessage> {
    let any = store.submissions().any(|s| s.student_id == student.student_id);
    if !any {
        return Ok(render::reminder(student, &course.config.course, &course.config.contact));
    }
    let ctx = WeeklyContext {
        student_name: student.display_name.clone(),
        course: course.config.course.clone(),
        as_of: as_of.with_timezone(&course.tz),
        lines: weekly_lines(course, store, student, as_of),
        contact: course.config.contact.clone(),
    };
    render::weekly_summary(student, &ctx)
}

/// Most recent weekly boundary not after `at`, if a schedule is configured.
pub fn weekly_boundary(course: &Course, at: Timestamp) -> Result<Option<Timestamp>> {
    let Some(schedule) = &course.config.policies.weekly else { return Ok(None) };
    let (weekday, time) = schedule.parse()?;
    let local = at.with_timezone(&course.tz);
    let back = (local.weekday().num_days_from_monday() + 7 - weekday.num_days_from_monday()) % 7;
    for extra in [0, 7] {
        let day = local.date_naive() - Duration::days(i64::from(back + extra));
        let Some(candidate) = course.tz.from_local_datetime(&day.and_time(time)).earliest() else {
            continue;
        };
        let candidate = candidate.with_timezone(&chrono::Utc);
        if candidate <= at {
            return Ok(Some(candidate));
        }
    }
    Ok(None)
}

/// Queue weekly summaries for every enrolled student, once per boundary.
/// Returns the number of messages queued.
pub fn send_weekly(course: &Course, store: &mut ResultsStore, boundary: Timestamp) -> Result<usize> {
    if store.weekly_sent(boundary) {
        return Ok(0);
    }
    let mut sent = 0;
    for student in course.roster.students() {
        course.send(&weekly_summary(course, store, student, boundary)?)?;
        sent += 1;
    }
    store.append(JournalRecord::WeeklySent { boundary })?;
    Ok(sent)
}

/// One reminder per enrolled student who has no accepted submission for a
/// laboratory whose deadline (at the student's site) has passed.
pub fn missing_submission_scan(course: &Course, store: &ResultsStore, as_of: Timestamp) -> Vec<OutboundMessage> {
    let mut out = Vec::new();
    for student in course.roster.students() {
        let missing: Vec<String> = course
            .manifest
            .assignments()
            .iter()
            .filter(|a| a.kind == AssignmentKind::Laboratory)
            .filter(|a| a.deadline_for(student.site).is_some_and(|d| d <= as_of))
            .filter(|a| store.attempts(&student.student_id, &a.subject_key) == 0)
            .map(|a| a.subject_key.clone())
            .collect();
        if !missing.is_empty() {
            out.push(render::missing_reminder(student, &course.config.course, &missing, &course.config.contact));
        }
    }
    out
}

#[derive(Debug, Serialize)]
struct ExportRow<'a> {
    student_id: &'a str,
    assignment: &'a str,
    attempts: u32,
    latest_percent: u32,
    recorded_percent: Option<u32>,
}

/// Current marks as CSV, optionally for one assignment.
pub fn export_marks_csv(store: &ResultsStore, assignment: Option<&str>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let rows = store.current_marks();
    let mut wrote = false;
    for m in rows.iter().filter(|m| assignment.is_none_or(|a| a == m.assignment_key)) {
        w.serialize(ExportRow {
            student_id: &m.student_id,
            assignment: &m.assignment_key,
            attempts: m.attempts,
            latest_percent: m.latest_percent,
            recorded_percent: m.recorded_percent,
        })?;
        wrote = true;
    }
    if !wrote {
        w.write_record(["student_id", "assignment", "attempts", "latest_percent", "recorded_percent"])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::contract(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Accepted submissions as activity events.
pub fn submission_events(store: &ResultsStore) -> Vec<SubmissionEvent> {
    store
        .submissions()
        .map(|s| SubmissionEvent {
            at: s.received_at,
            student_id: s.student_id.clone(),
            assignment_key: s.assignment_key.clone(),
        })
        .collect()
}

pub const STATS_FILES: [&str; 4] = ["histogram.csv", "timeline_unique.csv", "timeline_nonunique.csv", "annotations.csv"];

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().at(path)
}

/// Write the statistics CSVs for one assignment, or all, into `out_dir`.
pub fn stats_bundle(course: &Course, events: &[SubmissionEvent], assignment: Option<&str>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let specs: Vec<_> = course
        .manifest
        .assignments()
        .iter()
        .filter(|a| assignment.is_none_or(|k| k == a.subject_key))
        .collect();
    if let Some(k) = assignment {
        if specs.is_empty() {
            return Err(Error::config(format!("unknown assignment {k:?}")));
        }
    }
    let stamp = |t: Timestamp| t.with_timezone(&course.tz).to_rfc3339();
    let (mut hist, mut uniq, mut nonuniq, mut notes) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for spec in &specs {
        let key = &spec.subject_key;
        for (k, students) in submission_histogram(events, key) {
            hist.push(vec![key.clone(), k.to_string(), students.to_string()]);
        }
        let t = submission_timelines(events, key);
        uniq.extend(t.unique.iter().map(|(at, n)| vec![key.clone(), stamp(*at), n.to_string()]));
        nonuniq.extend(t.nonunique.iter().map(|(at, n)| vec![key.clone(), stamp(*at), n.to_string()]));
        for (site, at) in &spec.deadlines {
            notes.push(vec![key.clone(), "deadline".into(), site.to_string(), stamp(*at)]);
        }
        for at in &spec.sessions {
            notes.push(vec![key.clone(), "session".into(), String::new(), stamp(*at)]);
        }
    }
    let paths: Vec<PathBuf> = STATS_FILES.iter().map(|f| out_dir.join(f)).collect();
    write_csv(&paths[0], &["assignment", "submissions", "students"], hist)?;
    write_csv(&paths[1], &["assignment", "at", "students"], uniq)?;
    write_csv(&paths[2], &["assignment", "at", "submissions"], nonuniq)?;
    write_csv(&paths[3], &["assignment", "kind", "site", "at"], notes)?;
    Ok(paths)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PremarkSummary {
    pub candidates: usize,
    pub marked: usize,
    pub errors: usize,
    pub marks_csv: Option<PathBuf>,
    pub log_csv: PathBuf,
}

fn candidate_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Result column for one candidate: a percentage or an upper-case code.
fn premark_one(course: &Course, spec: &crate::model::AssignmentSpec, candidate: &str, files: &[PathBuf], out: &Path) -> Result<String> {
    let name = course
        .roster
        .get(candidate)
        .map(|s| s.display_name.clone())
        .unwrap_or_else(|| candidate.to_string());
    let job = TestJob {
        submission_id: format!("premark-{}", path_component(candidate)),
        student_id: candidate.to_string(),
        assignment_key: spec.subject_key.clone(),
        attempt: 0,
        files: files.iter().map(|p| p.display().to_string()).collect(),
        received_at: now(),
        stage_failures: 0,
    };
    let runner = course.runner_for(spec.runner.as_deref())?;
    let sandbox = prepare_sandbox(course, &job, spec, &runner)?;
    let mut required = Vec::new();
    for f in &spec.required_files {
        required.push((f.clone(), fs::read(sandbox.join(f)).unwrap_or_default()));
    }
    let result = match preflight_checks(required.iter().map(|(n, b)| (n.as_str(), b.as_slice()))) {
        Some(file) => Ok(crate::model::TestReport::encoding_undeclared(file)),
        None => {
            let suite = spec.suite_id.as_deref().unwrap_or_default();
            match run_sandboxed(course, &sandbox, &runner, suite, out) {
                Ok(RunResult::Report(r, _)) => Ok(r),
                Ok(RunResult::Malfunction(why, _)) => Err(Error::Sandbox(why)),
                Err(e) => Err(e),
            }
        }
    };
    let _ = fs::remove_dir_all(&sandbox);
    let report = result?;
    fs::write(out.join("report.json"), report_to_json(&report)).at(out)?;
    let (text, code) = match report.status {
        ReportStatus::Ok => {
            let ctx = testexec::assess(spec, &report, &name, &course.config.contact)?;
            (render::feedback_body(&ctx)?, ctx.percent.to_string())
        }
        ReportStatus::SyntaxError => (
            format!("{name}: syntax error\n\n{}\n", report.detail.as_deref().unwrap_or_default()),
            "SYNTAX".into(),
        ),
        ReportStatus::ResourceKilled => (
            format!("{name}: stopped after exceeding the {} limit\n", report.detail.as_deref().unwrap_or("resource")),
            "KILLED".into(),
        ),
        ReportStatus::EncodingUndeclared => (
            format!("{name}: {} has non-ASCII characters and no encoding declaration\n", report.detail.as_deref().unwrap_or("a file")),
            "ENCODING".into(),
        ),
    };
    fs::write(out.join("report.txt"), text).at(out)?;
    Ok(code)
}

/// Test a directory of offline-collected files, one subdirectory per
/// candidate, without email or journal records.
///
/// Writes `submissions.csv` (file timestamps), `marks.csv` (tested
/// assignments only), `<candidate>/report.{txt,json}` and `errors.txt`.
pub fn premark_batch(course: &Course, dir: &Path, assignment: &str, out_dir: &Path) -> Result<PremarkSummary> {
    let spec = course
        .manifest
        .get(assignment)
        .ok_or_else(|| Error::config(format!("unknown assignment {assignment:?}")))?;
    fs::create_dir_all(out_dir).at(out_dir)?;
    let mut candidates: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    candidates.sort();

    let mut summary = PremarkSummary {
        log_csv: out_dir.join("submissions.csv"),
        ..Default::default()
    };
    let mut log_rows = Vec::new();
    let mut marks = Vec::new();
    let mut errors = String::new();
    for cdir in &candidates {
        let candidate = cdir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        summary.candidates += 1;
        let files = candidate_files(cdir)?;
        for f in &files {
            let modified = fs::metadata(f).and_then(|m| m.modified()).at(f)?;
            let at = Timestamp::from(modified).with_timezone(&course.tz);
            let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
            log_rows.push(vec![candidate.clone(), name, render::local_stamp(&at)]);
        }
        if spec.is_receive_only() {
            continue;
        }
        let out = out_dir.join(path_component(&candidate));
        fs::create_dir_all(&out).at(&out)?;
        match premark_one(course, spec, &candidate, &files, &out) {
            Ok(code) => {
                summary.marked += 1;
                marks.push(vec![candidate, code]);
            }
            Err(e) => {
                summary.errors += 1;
                errors.push_str(&format!("{candidate}: {e}\n"));
                marks.push(vec![candidate, "ERROR".into()]);
            }
        }
    }
    write_csv(&summary.log_csv, &["candidate", "file", "modified"], log_rows)?;
    if !spec.is_receive_only() {
        let path = out_dir.join("marks.csv");
        write_csv(&path, &["candidate", "result"], marks)?;
        summary.marks_csv = Some(path);
    }
    let errors_path = out_dir.join("errors.txt");
    fs::write(&errors_path, errors).at(&errors_path)?;
    Ok(summary)
}

/// Replace every roster name, address and id in `text`, longest first.
pub fn anonymize(text: &str, course: &Course) -> String {
    let mut needles: Vec<(String, &str)> = Vec::new();
    for s in course.roster.students() {
        needles.push((s.display_name.clone(), "STUDENT"));
        for part in s.display_name.split_whitespace().filter(|p| p.len() > 2) {
            needles.push((part.to_string(), "STUDENT"));
        }
        for a in &s.email_addresses {
            needles.push((a.clone(), "student@example.invalid"));
        }
        needles.push((s.student_id.clone(), "STUDENT-ID"));
    }
    needles.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
    let mut out = text.to_string();
    for (needle, replacement) in needles {
        let pattern = format!("(?i){}", regex::escape(&needle));
        let re = regex::Regex::new(&pattern).expect("escaped pattern is valid");
        out = re.replace_all(&out, replacement).into_owned();
    }
    out
}

/// Copy `n` randomly chosen submissions into `out_dir/sample-<k>/`.
/// With `anonymize`, identifying strings in text files are replaced and no
/// mapping back to students is written.
pub fn sample(course: &Course, store: &ResultsStore, assignment: Option<&str>, n: usize, anonymize_text: bool, seed: Option<u64>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let pool: Vec<_> = store
        .submissions()
        .filter(|s| assignment.is_none_or(|a| a == s.assignment_key))
        .collect();
    let mut rng = match seed {
        Some(s) => rand::rngs::StdRng::seed_from_u64(s),
        None => rand::rngs::StdRng::from_entropy(),
    };
    let chosen: Vec<_> = pool.choose_multiple(&mut rng, n).collect();
    fs::create_dir_all(out_dir).at(out_dir)?;
    let mut dirs = Vec::new();
    let mut index = vec![];
    for (k, sub) in chosen.iter().enumerate() {
        let dir = out_dir.join(format!("sample-{:03}", k + 1));
        fs::create_dir_all(&dir).at(&dir)?;
        for f in &sub.files {
            let src = course.root.join(&f.archived_path);
            let bytes = fs::read(&src).at(&src)?;
            let name = if anonymize_text { anonymize(&f.filename, course) } else { f.filename.clone() };
            let target = dir.join(path_component(&name));
            match (anonymize_text, String::from_utf8(bytes)) {
                (true, Ok(text)) => fs::write(&target, anonymize(&text, course)).at(&target)?,
                (_, Ok(text)) => fs::write(&target, text).at(&target)?,
                (_, Err(raw)) => fs::write(&target, raw.into_bytes()).at(&target)?,
            }
        }
        if !anonymize_text {
            index.push(vec![dir.file_name().unwrap_or_default().to_string_lossy().into_owned(), sub.submission_id.clone()]);
        }
        dirs.push(dir);
    }
    if !anonymize_text {
        write_csv(&out_dir.join("index.csv"), &["sample", "submission_id"], index)?;
    }
    Ok(dirs)
}
