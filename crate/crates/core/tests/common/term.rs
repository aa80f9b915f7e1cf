//! A term of laboratory marks for one student, and the weekly summary it
//! should produce.

use gradepipe_core::model::{MarkRecord, Points, SubmissionRecord, SubmissionStatus, SubmittedFile, Timestamp};
use gradepipe_core::store::{JournalRecord, ResultsStore};

use super::at;

pub const NORA_WEEKLY: &str = "Dear Nora O'Shea,

Please find below your summary of submissions and
preliminary marks for the weekly laboratory sessions
for course ABC, as of Fri Jan 30 17:06:44 2015.

lab  2 :  25
                          submitted before deadline
lab  3 :  31
                          submitted before deadline
lab  4 :   0
                          at 2014-11-14 20:39:02 was
                          late by 4:39:02.
lab  5 :  80
                          submitted before deadline
lab  6 :  77
                          submitted before deadline
lab  7 :  75
                          submitted before deadline

The average mark over the listed labs is 48

With kind regards,

The teaching team (course-help@uni.email.address)
";

pub fn record(store: &mut ResultsStore, student: &str, lab: &str, attempt: u32, at: Timestamp, percent: u32, late: bool, recorded: Option<u32>) {
    let id = format!("{lab}-{student}-{attempt}");
    store
        .append(JournalRecord::Submission(SubmissionRecord {
            submission_id: id.clone(),
            student_id: student.into(),
            assignment_key: lab.into(),
            received_at: at,
            files: vec![SubmittedFile {
                filename: "x.py".into(),
                digest: "0".into(),
                archived_path: "x".into(),
            }],
            attempt,
            status: SubmissionStatus::Tested,
            content_digest: id.clone(),
            sender: format!("{student}@x"),
        }))
        .unwrap();
    store
        .append(JournalRecord::Mark(MarkRecord {
            submission_id: id,
            student_id: student.into(),
            assignment_key: lab.into(),
            attempt,
            points: Points::integer(u64::from(percent)),
            total: Points::integer(100),
            percent,
            style_error_count: 0,
            late,
            recorded_for_grade: recorded.is_some(),
            recorded_percent: recorded,
        }))
        .unwrap();
}

pub fn nora_term(store: &mut ResultsStore) {
    let marks = [(2, 25), (3, 31), (4, 67), (5, 80), (6, 77), (7, 75)];
    for (lab, pct) in marks {
        let deadline = at(2014, 10, 31, 16, 0, 0) + chrono::Duration::weeks(lab - 2);
        let (when, late, rec) = if lab == 4 {
            (at(2014, 11, 14, 20, 39, 2), true, 0)
        } else {
            (deadline - chrono::Duration::hours(3), false, pct)
        };
        record(store, "nos1g14", &format!("lab {lab}"), 1, when, pct, late, Some(rec));
    }
}
