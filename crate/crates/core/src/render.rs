//! Text of every message the pipeline sends.
//!
//! Rendering is deterministic: the same context always yields the same
//! bytes. Times are shown in the course's local zone.

use std::fmt::Write as _;

use chrono::{DateTime, Duration};
use chrono_tz::Tz;

use crate::error::{Error, Result};
use crate::model::{Points, Student};
use crate::outbox::{MessageCategory, OutboundMessage};
use crate::scoring::{compute_average, format_hms};

/// Tracebacks longer than this are cut in feedback messages.
pub const MAX_TRACEBACK_LINES: usize = 200;

const RULE: &str = "-----------------------------------------------";
const CONTINUATION: &str = "                          ";

pub fn footer(contact: &str) -> String {
    format!(
        "{RULE}\n\nThis message has been generated  automatically. Should\n\
         you feel that you observe a malfunction of the system,\n\
         or if you wish to speak to a human, please contact the\n\
         course team ({contact}).\n"
    )
}

fn signed(body: String, contact: &str) -> String {
    format!("{body}\n{}", footer(contact))
}

/// Local wall-clock time as `2014-11-14 20:39:02`.
pub fn local_stamp(t: &DateTime<Tz>) -> String {
    t.format("%Y-%m-%d %H:%M:%S").to_string()
}

/// `Fri Jan 30 17:06:44 2015`.
pub fn ctime(t: &DateTime<Tz>) -> String {
    t.format("%a %b %e %H:%M:%S %Y").to_string()
}

/// `lab 2` is shown as `lab  2` so that numbers line up.
pub fn assignment_label(key: &str) -> String {
    match key.rsplit_once(' ') {
        Some((prefix, num)) if num.chars().all(|c| c.is_ascii_digit()) && !num.is_empty() => {
            format!("{prefix} {num:>2}")
        }
        _ => key.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackRow {
    pub name: String,
    pub weight: Points,
    pub passed: bool,
    pub traceback: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackContext {
    pub student_name: String,
    pub assignment_key: String,
    pub rows: Vec<FeedbackRow>,
    pub points: Points,
    pub total: Points,
    /// Final percentage, after any style penalty.
    pub percent: u32,
    pub style_error_count: u32,
    pub style_penalized: bool,
    pub contact: String,
}

fn truncate_lines(text: &str, max: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() <= max {
        return lines.join("\n");
    }
    let mut out = lines[..max].join("\n");
    let _ = write!(out, "\n[... {} more lines not shown ...]", lines.len() - max);
    out
}

pub fn feedback_body(ctx: &FeedbackContext) -> Result<String> {
    if ctx.rows.is_empty() {
        return Err(Error::contract("feedback without question results"));
    }
    let width = ctx.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut b = format!(
        "Dear {},\n\nTesting of your submitted code has been completed:\n\nOverview\n========\n\n",
        ctx.student_name
    );
    for r in &ctx.rows {
        let (word, score) = if r.passed { ("passed", 100) } else { ("failed", 0) };
        let _ = writeln!(b, "{:<width$} : {word} -> {score:>3}", r.name);
    }
    let terms: Vec<String> = ctx
        .rows
        .iter()
        .map(|r| if r.passed { r.weight.to_string() } else { "0".into() })
        .collect();
    let _ = write!(
        b,
        "\nTotal mark for this assignment: {} / {} = {}\n\n(Points computed as {} = {})\n",
        ctx.points,
        ctx.total,
        ctx.percent,
        terms.join(" + "),
        ctx.points
    );
    if ctx.style_penalized && ctx.style_error_count > 0 {
        let _ = write!(
            b,
            "\nStyle check: {} PEP 8 issue(s), penalty applied\n",
            ctx.style_error_count
        );
    }
    let failed: Vec<&FeedbackRow> = ctx.rows.iter().filter(|r| !r.passed).collect();
    if !failed.is_empty() {
        b.push_str("\nTest failure report\n====================\n");
        for r in failed {
            let _ = write!(
                b,
                "\n{}\n{}\n{}\n",
                r.name,
                "-".repeat(r.name.len()),
                truncate_lines(&r.traceback, MAX_TRACEBACK_LINES)
            );
        }
    }
    Ok(signed(b, &ctx.contact))
}

pub fn feedback(student: &Student, ctx: &FeedbackContext) -> Result<OutboundMessage> {
    Ok(OutboundMessage::new(
        [student.primary_address()],
        format!("Test results for {}", ctx.assignment_key),
        feedback_body(ctx)?,
        MessageCategory::Feedback,
    ))
}

pub fn receipt(
    student: &Student,
    assignment_key: &str,
    attempt: u32,
    received_at: &DateTime<Tz>,
    files: &[String],
    receive_only: bool,
    contact: &str,
) -> OutboundMessage {
    let next = if receive_only {
        "It has been stored for marking by the course team."
    } else {
        "It has been queued for testing; the results will follow by email."
    };
    let body = format!(
        "Dear {},\n\nYour submission for {assignment_key} was received at {} \
         (submission {attempt}).\n\nFiles received: {}\n\n{next}\n",
        student.display_name,
        local_stamp(received_at),
        files.join(", ")
    );
    OutboundMessage::new(
        [student.primary_address()],
        format!("Submission received: {assignment_key}"),
        signed(body, contact),
        MessageCategory::Receipt,
    )
}

pub fn rejection(to: &str, subject: &str, explanation: &str, contact: &str) -> OutboundMessage {
    let body = format!(
        "Dear sender,\n\nYour message with subject \"{subject}\" could not be accepted as a \
         submission:\n\n{explanation}\n\nNothing has been recorded for this message.\n"
    );
    OutboundMessage::new(
        [to],
        format!("Submission not accepted: {subject}"),
        signed(body, contact),
        MessageCategory::Rejection,
    )
}

pub fn syntax_invite(student: &Student, assignment_key: &str, detail: &str, contact: &str) -> OutboundMessage {
    let body = format!(
        "Dear {},\n\nYour submission for {assignment_key} could not be tested because it \
         could not be imported:\n\n{}\n\nPlease correct the error and re-submit. This \
         submission does not count towards your recorded mark.\n",
        student.display_name,
        truncate_lines(detail.trim_end(), MAX_TRACEBACK_LINES)
    );
    OutboundMessage::new(
        [student.primary_address()],
        format!("Please re-submit: {assignment_key}"),
        signed(body, contact),
        MessageCategory::Invite,
    )
}

pub fn killed_invite(student: &Student, assignment_key: &str, resource: &str, contact: &str) -> OutboundMessage {
    let body = format!(
        "Dear {},\n\nTesting of your submission for {assignment_key} was stopped by the \
         system because it exceeded its {resource} limit. A common cause is a loop that \
         never ends or a list that keeps growing.\n\nPlease check your code and re-submit. \
         This submission does not count towards your recorded mark.\n",
        student.display_name
    );
    OutboundMessage::new(
        [student.primary_address()],
        format!("Please re-submit: {assignment_key}"),
        signed(body, contact),
        MessageCategory::Invite,
    )
}

pub fn encoding_suggestion(student: &Student, assignment_key: &str, filename: &str, contact: &str) -> OutboundMessage {
    let body = format!(
        "Dear {},\n\nYour file {filename} for {assignment_key} contains non-ASCII characters \
         but does not declare its encoding. Please add the line\n\n    # -*- coding: utf-8 -*-\n\n\
         as the first or second line of {filename} and re-submit.\n",
        student.display_name
    );
    OutboundMessage::new(
        [student.primary_address()],
        format!("Please declare the encoding: {assignment_key}"),
        signed(body, contact),
        MessageCategory::Invite,
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeeklyStatus {
    OnTime,
    Late { at: String, by: Duration },
    NotSubmitted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeeklyLine {
    pub assignment_key: String,
    pub percent: u32,
    pub status: WeeklyStatus,
}

#[derive(Debug, Clone)]
pub struct WeeklyContext {
    pub student_name: String,
    pub course: String,
    pub as_of: DateTime<Tz>,
    pub lines: Vec<WeeklyLine>,
    pub contact: String,
}

pub fn weekly_body(ctx: &WeeklyContext) -> Result<String> {
    let mut b = format!(
        "Dear {},\n\nPlease find below your summary of submissions and\n\
         preliminary marks for the weekly laboratory sessions\n\
         for course {}, as of {}.\n\n",
        ctx.student_name,
        ctx.course,
        ctime(&ctx.as_of)
    );
    if ctx.lines.is_empty() {
        b.push_str("No laboratory deadlines have passed yet, so there are no marks to list.\n");
    } else {
        for l in &ctx.lines {
            let _ = writeln!(b, "{} : {:>3}", assignment_label(&l.assignment_key), l.percent);
            match &l.status {
                WeeklyStatus::OnTime => {
                    let _ = writeln!(b, "{CONTINUATION}submitted before deadline");
                }
                WeeklyStatus::Late { at, by } => {
                    let _ = writeln!(b, "{CONTINUATION}at {at} was");
                    let _ = writeln!(b, "{CONTINUATION}late by {}.", format_hms(*by));
                }
                WeeklyStatus::NotSubmitted => {
                    let _ = writeln!(b, "{CONTINUATION}not submitted");
                }
            }
        }
        let marks: Vec<u32> = ctx.lines.iter().map(|l| l.percent).collect();
        let _ = writeln!(b, "\nThe average mark over the listed labs is {}", compute_average(&marks)?);
    }
    let _ = write!(b, "\nWith kind regards,\n\nThe teaching team ({})\n", ctx.contact);
    Ok(b)
}

pub fn weekly_summary(student: &Student, ctx: &WeeklyContext) -> Result<OutboundMessage> {
    Ok(OutboundMessage::new(
        [student.primary_address()],
        format!("Weekly summary for {}", ctx.course),
        weekly_body(ctx)?,
        MessageCategory::WeeklySummary,
    ))
}

pub fn reminder(student: &Student, course: &str, contact: &str) -> OutboundMessage {
    let body = format!(
        "Dear {},\n\nOur records show that we have not yet received any work from you for \
         course {course}, although deadlines have passed. Please submit your work by email \
         as described in the course instructions.\n\nIf you are experiencing problems, \
         please contact the course leader ({contact}).\n\nWith kind regards,\n\n\
         The teaching team ({contact})\n",
        student.display_name
    );
    OutboundMessage::new(
        [student.primary_address()],
        format!("No submissions received for {course}"),
        body,
        MessageCategory::Reminder,
    )
}

/// Reminder naming the laboratories whose deadlines passed without a submission.
pub fn missing_reminder(student: &Student, course: &str, missing: &[String], contact: &str) -> OutboundMessage {
    let mut body = format!(
        "Dear {},\n\nOur records show that we have not received your submission for the \
         following work in course {course}, although the deadline has passed:\n\n",
        student.display_name
    );
    for key in missing {
        let _ = writeln!(body, "  {key}");
    }
    let _ = write!(
        body,
        "\nPlease submit your work by email as described in the course instructions.\n\n\
         If you are experiencing problems, please contact the course leader ({contact}).\n\n\
         With kind regards,\n\nThe teaching team ({contact})\n"
    );
    OutboundMessage::new(
        [student.primary_address()],
        format!("Missing submissions for {course}"),
        body,
        MessageCategory::Reminder,
    )
}

pub fn admin_alert(admin: &str, summary: &str, detail: &str) -> OutboundMessage {
    OutboundMessage::new(
        [admin],
        format!("[gradepipe] {summary}"),
        format!("{detail}\n"),
        MessageCategory::AdminAlert,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn row(name: &str, passed: bool, tb: &str) -> FeedbackRow {
        FeedbackRow {
            name: name.into(),
            weight: Points::integer(1),
            passed,
            traceback: tb.into(),
        }
    }

    #[test]
    fn labels_align_numbers() {
        assert_eq!(assignment_label("lab 2"), "lab  2");
        assert_eq!(assignment_label("lab 12"), "lab 12");
        assert_eq!(assignment_label("exam"), "exam");
    }

    #[test]
    fn all_pass_feedback_layout() {
        let ctx = FeedbackContext {
            student_name: "Ann Example".into(),
            assignment_key: "training 1".into(),
            rows: vec![row("test_a", true, ""), row("test_long_name", true, "")],
            points: Points::integer(2),
            total: Points::integer(2),
            percent: 100,
            style_error_count: 0,
            style_penalized: true,
            contact: "help@x".into(),
        };
        let expected = "Dear Ann Example,\n\nTesting of your submitted code has been completed:\n\n\
Overview\n========\n\n\
test_a         : passed -> 100\n\
test_long_name : passed -> 100\n\n\
Total mark for this assignment: 2 / 2 = 100\n\n\
(Points computed as 1 + 1 = 2)\n\n"
            .to_string()
            + &footer("help@x");
        assert_eq!(feedback_body(&ctx).unwrap(), expected);
    }

    #[test]
    fn failure_report_and_style_line() {
        let long: String = (0..250).map(|i| format!("l{i}\n")).collect();
        let ctx = FeedbackContext {
            student_name: "A".into(),
            assignment_key: "lab 1".into(),
            rows: vec![row("q1", false, &long), row("q2", true, "")],
            points: Points::integer(1),
            total: Points::integer(2),
            percent: 25,
            style_error_count: 1,
            style_penalized: true,
            contact: "c".into(),
        };
        let b = feedback_body(&ctx).unwrap();
        assert!(b.contains("\nStyle check: 1 PEP 8 issue(s), penalty applied\n"));
        assert!(b.contains("\nTest failure report\n====================\n\nq1\n--\nl0\n"));
        assert!(b.contains("l199\n[... 50 more lines not shown ...]\n\n-----"));
        assert!(!b.contains("l200"));
        assert!(feedback_body(&FeedbackContext { rows: vec![], ..ctx }).is_err());
    }

    #[test]
    fn weekly_without_lines_and_ctime_padding() {
        let ctx = WeeklyContext {
            student_name: "A".into(),
            course: "ABC".into(),
            as_of: chrono_tz::UTC.with_ymd_and_hms(2015, 1, 5, 7, 6, 44).unwrap(),
            lines: vec![],
            contact: "c".into(),
        };
        let b = weekly_body(&ctx).unwrap();
        assert!(b.contains("as of Mon Jan  5 07:06:44 2015.\n\nNo laboratory deadlines"));
        assert!(!b.contains("average"));
    }
}
