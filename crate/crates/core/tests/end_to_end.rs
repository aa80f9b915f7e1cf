//! Whole-pipeline runs against the demo course and the fixture runner.

mod common;

use std::fs;
use std::time::Instant;

use common::*;
use gradepipe_core::model::SubmissionStatus;
use gradepipe_core::pipeline::tick;
use gradepipe_core::reporting::export_marks_csv;
use gradepipe_core::store::ResultsStore;

const GOOD: &str = "def distance(a, b):\n    return abs(a - b)\n";

#[test]
fn three_messages_two_ticks() {
    let demo = demo();
    post(&demo, "1", NORA, "Training 1", &[("training1.py", GOOD)], None);
    post(&demo, "2", STRANGER, "Training 1", &[("training1.py", GOOD)], None);
    post(&demo, "3", ADA, "training 1", &[("notes.txt", "hello")], None);

    let started = Instant::now();
    let mut transport = demo.transport();
    let first = tick(&demo.course, &mut transport).unwrap();
    assert_eq!(first.ingest.as_ref().unwrap().polled, 3);
    assert_eq!(first.ingest.as_ref().unwrap().accepted, 1);
    assert_eq!(first.ingest.as_ref().unwrap().rejected, 2);
    assert_eq!(first.testing.as_ref().unwrap().marks, 1);
    assert!(first.errors.is_empty(), "{:?}", first.errors);
    let second = tick(&demo.course, &mut transport).unwrap();
    assert!(second.is_idle(), "{second:?}");
    assert!(started.elapsed().as_secs_f64() < 5.0);

    let sent = outbox(&demo);
    assert_eq!(count(&sent, "receipt"), 1);
    assert_eq!(count(&sent, "feedback"), 1);
    assert_eq!(count(&sent, "rejection"), 2);
    assert_eq!(sent.len(), 4, "{sent:#?}");
    let feedback = sent.iter().find(|m| m.category == "feedback").unwrap();
    assert!(feedback.body.contains("Total mark for this assignment: 3 / 3 = 100"));
    assert_eq!(feedback.to, "n.oshea@uni.email.address");

    let store = demo.course.store().unwrap();
    assert_eq!(store.marks().len(), 1);
    assert!(queues_empty(&demo.course));
    assert!(fs::read_dir(demo.course.mail_dir()).unwrap().next().is_none());
}

#[test]
fn failing_question_renders_traceback() {
    let demo = demo();
    let src = "# fixture: q3_fail\ndef pyramid_volume(A, h):\n    return (A * h) / 3\n";
    post(&demo, "m", NORA, "Training 1", &[("training1.py", src)], None);
    let mut transport = demo.transport();
    tick(&demo.course, &mut transport).unwrap();
    let sent = outbox(&demo);
    let fb = sent.iter().find(|m| m.category == "feedback").unwrap();
    assert!(fb.body.contains("test_pyramid_volume : failed ->   0\n"));
    assert!(fb.body.contains("Total mark for this assignment: 2 / 3 = 67\n"));
    assert!(fb.body.contains("(Points computed as 1 + 1 + 0 = 2)\n"));
    assert!(fb.body.contains("E   assert 0.3333333333333333 < 1e-14"));
}

#[test]
fn syntax_error_invites_resubmission_and_the_next_attempt_counts() {
    let demo = demo();
    let mut transport = demo.transport();
    post(&demo, "a", NORA, "Lab 2", &[("lab2.py", "# fixture: syntax\ndef f(:\n")], Some(at(2014, 10, 30, 12, 0, 0)));
    tick(&demo.course, &mut transport).unwrap();
    post(&demo, "b", NORA, "Lab 2", &[("lab2.py", "# fixture: q3_fail\n")], Some(at(2014, 10, 30, 13, 0, 0)));
    tick(&demo.course, &mut transport).unwrap();
    post(&demo, "c", NORA, "Lab 2", &[("lab2.py", "# fixture: all_pass\n")], Some(at(2014, 10, 30, 14, 0, 0)));
    tick(&demo.course, &mut transport).unwrap();

    let sent = outbox(&demo);
    assert_eq!(count(&sent, "invite"), 1);
    assert!(sent.iter().any(|m| m.category == "invite" && m.body.contains("SyntaxError")));
    let store = demo.course.store().unwrap();
    let subs = store.submissions_for("nos1g14", "lab 2");
    assert_eq!(subs.len(), 3);
    assert_eq!(subs[0].status, SubmissionStatus::InvalidSyntax);
    let recorded = store.recorded("nos1g14", "lab 2").unwrap();
    assert_eq!((recorded.attempt, recorded.percent, recorded.recorded_percent), (2, 67, Some(67)));
    let csv = export_marks_csv(&store, None).unwrap();
    assert_eq!(csv, "student_id,assignment,attempts,latest_percent,recorded_percent\nnos1g14,lab 2,3,100,67\n");
}

#[test]
fn late_laboratory_records_zero_under_default_policy() {
    let demo = demo();
    let mut transport = demo.transport();
    // Deadline for site S is 16:00 GMT on 14 November.
    post(&demo, "a", NORA, "Lab 4", &[("lab4.py", "x = 1\n")], Some(at(2014, 11, 14, 20, 39, 2)));
    tick(&demo.course, &mut transport).unwrap();
    let store = demo.course.store().unwrap();
    let m = store.recorded("nos1g14", "lab 4").unwrap();
    assert!(m.late);
    assert_eq!((m.percent, m.recorded_percent), (100, Some(0)));

    let demo = demo_with(|t| *t = t.replace("late = \"record_zero\"", "late = \"record_actual\""));
    let mut transport = demo.transport();
    post(&demo, "a", NORA, "Lab 4", &[("lab4.py", "x = 1\n")], Some(at(2014, 11, 14, 20, 39, 2)));
    tick(&demo.course, &mut transport).unwrap();
    let m = demo.course.store().unwrap().recorded("nos1g14", "lab 4").cloned().unwrap();
    assert_eq!(m.recorded_percent, Some(100));
}

#[test]
fn style_penalty_and_non_ascii_files() {
    let demo = demo();
    let mut transport = demo.transport();
    post(&demo, "a", NORA, "Lab 3", &[("lab3.py", "# fixture: style\n")], Some(at(2014, 11, 1, 9, 0, 0)));
    post(&demo, "b", ADA, "Lab 3", &[("lab3.py", "s = 'caf\u{e9}'\n")], Some(at(2014, 11, 1, 9, 0, 1)));
    tick(&demo.course, &mut transport).unwrap();
    let store = demo.course.store().unwrap();
    // 100 * 2^-3 = 12.5, rounded half away from zero.
    assert_eq!(store.recorded("nos1g14", "lab 3").unwrap().percent, 13);
    let ada = store.submissions_for("ab1g14", "lab 3");
    assert_eq!(ada[0].status, SubmissionStatus::EncodingUndeclared);
    assert!(store.recorded("ab1g14", "lab 3").is_none());
    let sent = outbox(&demo);
    assert!(sent.iter().any(|m| m.category == "invite" && m.body.contains("lab3.py") && m.to == ADA));
    assert!(sent.iter().any(|m| m.category == "feedback" && m.body.contains("Style check: 3 PEP 8 issue(s), penalty applied")));
}

#[test]
fn receive_only_assignment_acknowledges_without_testing() {
    let demo = demo();
    let mut transport = demo.transport();
    post(&demo, "a", MALAIKA, "Project", &[("project.py", "print(1)\n")], None);
    let s = tick(&demo.course, &mut transport).unwrap();
    assert_eq!(s.testing.unwrap().processed, 0);
    let sent = outbox(&demo);
    assert_eq!(sent.len(), 1);
    assert_eq!(sent[0].category, "receipt");
    let store = demo.course.store().unwrap();
    assert_eq!(store.submissions_for("mo2m14", "project").len(), 1);
    assert!(store.marks().is_empty());
}

#[test]
fn identical_resubmission_is_recorded_once() {
    let demo = demo();
    let mut transport = demo.transport();
    post(&demo, "a", NORA, "Training 1", &[("training1.py", GOOD)], None);
    tick(&demo.course, &mut transport).unwrap();
    post(&demo, "b", NORA, "Training 1", &[("training1.py", GOOD)], None);
    let s = tick(&demo.course, &mut transport).unwrap();
    assert_eq!(s.ingest.unwrap().duplicates, 1);
    assert_eq!(demo.course.store().unwrap().submissions().count(), 1);
}

#[test]
fn runner_malfunction_is_flagged_not_marked() {
    let demo = demo();
    let mut transport = demo.transport();
    post(&demo, "a", NORA, "Training 1", &[("training1.py", "# fixture: hostile:runner_error\n")], None);
    post(&demo, "b", ADA, "Training 1", &[("training1.py", "# fixture: hostile:no_report\n")], None);
    let s = tick(&demo.course, &mut transport).unwrap();
    assert_eq!(s.testing.unwrap().flagged, 2);
    tick(&demo.course, &mut transport).unwrap();
    let store = demo.course.store().unwrap();
    assert!(store.marks().is_empty());
    assert_eq!(demo.course.testing.flagged().unwrap().len(), 2);
    let sent = outbox(&demo);
    assert_eq!(count(&sent, "feedback"), 0);
    assert_eq!(count(&sent, "admin_alert"), 2);

    // An operator requeues after fixing the suite; it is flagged again.
    let id = demo.course.testing.flagged().unwrap()[0].clone();
    demo.course.testing.requeue(&id).unwrap();
    assert_eq!(demo.course.testing.list().unwrap(), vec![id]);
}

#[test]
fn journal_replay_reproduces_export() {
    let demo = demo();
    let mut transport = demo.transport();
    for (i, (who, fixture)) in [(NORA, "q3_fail"), (ADA, "all_pass"), (MALAIKA, "only_q1")].iter().enumerate() {
        post(&demo, &format!("m{i}"), who, "Lab 5", &[("lab5.py", &format!("# fixture: {fixture}\n"))], Some(at(2014, 11, 20, 10, 0, i as u32)));
    }
    tick(&demo.course, &mut transport).unwrap();
    let live = export_marks_csv(&demo.course.store().unwrap(), None).unwrap();
    let copy = demo.root().join("journal-copy.jsonl");
    fs::copy(demo.course.journal_path(), &copy).unwrap();
    let replayed = export_marks_csv(&ResultsStore::open(&copy).unwrap(), None).unwrap();
    assert_eq!(live, replayed);
    assert_eq!(live.lines().count(), 4);
}
