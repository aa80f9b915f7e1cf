//! Append-only results journal and the index derived from it.
//!
//! One file per course-year, `<root>/journal/<course>-<year>.jsonl`, one JSON
//! document per line:
//!
//! ```json
//! {"schema_version":1,"recorded_at":"2014-11-14T20:39:05Z","type":"mark", ...MarkRecord fields}
//! ```
//!
//! Record types:
//!
//! - `submission`: an accepted submission ([`SubmissionRecord`]);
//! - `rejection`: a message that failed validation;
//! - `enqueued`: a follow-up artifact (test job, receipt, feedback) was queued
//!   for a submission;
//! - `outcome`: a submission's status changed after testing;
//! - `mark`: a scored result ([`MarkRecord`]);
//! - `weekly_sent`: weekly summaries went out for a boundary.
//!
//! The journal is the source of truth. Everything [`ResultsStore`] answers
//! is recomputed by replaying it, so two stores over the same file agree.
//! Appends hold an exclusive `flock` on the file and first apply whatever
//! other processes appended, so invariant checks see the whole journal. A
//! torn final line (a crash mid-append) is truncated away.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::os::fd::AsRawFd;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::model::{now, MarkRecord, SubmissionRecord, SubmissionStatus, Timestamp};

pub const JOURNAL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    TestJob,
    Receipt,
    /// Feedback, resubmission invite or encoding suggestion.
    Feedback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub sender: String,
    pub subject: String,
    pub reason: String,
    pub received_at: Timestamp,
    pub archive_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JournalRecord {
    Submission(SubmissionRecord),
    Rejection(RejectionRecord),
    Enqueued {
        submission_id: String,
        artifact: Artifact,
        item_id: String,
    },
    Outcome {
        submission_id: String,
        status: SubmissionStatus,
        results_dir: Option<String>,
    },
    Mark(MarkRecord),
    WeeklySent {
        boundary: Timestamp,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JournalLine {
    schema_version: u32,
    recorded_at: Timestamp,
    #[serde(flatten)]
    record: JournalRecord,
}

/// Row of the current-marks table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CurrentMark {
    pub student_id: String,
    pub assignment_key: String,
    /// Accepted submissions.
    pub attempts: u32,
    /// Submissions that produced a mark.
    pub marked: u32,
    pub latest_percent: u32,
    pub recorded_percent: Option<u32>,
    pub recorded_submission: Option<String>,
}

#[derive(Debug, Clone, Default)]
struct Index {
    submissions: BTreeMap<String, SubmissionRecord>,
    order: Vec<String>,
    by_pair: HashMap<(String, String), Vec<String>>,
    dedup: HashMap<(String, String, String), String>,
    markers: BTreeMap<(String, Artifact), String>,
    outcome_dirs: HashMap<String, String>,
    marks: Vec<MarkRecord>,
    mark_by_submission: HashMap<String, usize>,
    recorded: HashMap<(String, String), usize>,
    rejections: Vec<RejectionRecord>,
    weekly_sent: BTreeSet<Timestamp>,
}

impl Index {
    /// Check a record against the invariants without applying it.
    fn admit(&self, record: &JournalRecord) -> Result<()> {
        match record {
            JournalRecord::Submission(s) => {
                if self.submissions.contains_key(&s.submission_id) {
                    return Err(Error::contract(format!("duplicate submission {}", s.submission_id)));
                }
                let expected = self.attempts(&s.student_id, &s.assignment_key) + 1;
                if s.attempt != expected {
                    return Err(Error::contract(format!(
                        "attempt {} for {}/{} but next is {expected}",
                        s.attempt, s.student_id, s.assignment_key
                    )));
                }
            }
            JournalRecord::Mark(m) => {
                if self.mark_by_submission.contains_key(&m.submission_id) {
                    return Err(Error::contract(format!("second mark for {}", m.submission_id)));
                }
                let pair = (m.student_id.clone(), m.assignment_key.clone());
                if m.recorded_for_grade && self.recorded.contains_key(&pair) {
                    return Err(Error::contract(format!(
                        "recorded grade for {}/{} already set",
                        m.student_id, m.assignment_key
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn apply(&mut self, record: JournalRecord) {
        match record {
            JournalRecord::Submission(s) => {
                let pair = (s.student_id.clone(), s.assignment_key.clone());
                self.by_pair.entry(pair).or_default().push(s.submission_id.clone());
                self.dedup.insert(
                    (s.sender.clone(), s.assignment_key.clone(), s.content_digest.clone()),
                    s.submission_id.clone(),
                );
                self.order.push(s.submission_id.clone());
                self.submissions.insert(s.submission_id.clone(), s);
            }
            JournalRecord::Rejection(r) => self.rejections.push(r),
            JournalRecord::Enqueued {
                submission_id,
                artifact,
                item_id,
            } => {
                self.markers.insert((submission_id, artifact), item_id);
            }
            JournalRecord::Outcome {
                submission_id,
                status,
                results_dir,
            } => {
                if let Some(s) = self.submissions.get_mut(&submission_id) {
                    s.status = status;
                }
                if let Some(d) = results_dir {
                    self.outcome_dirs.insert(submission_id, d);
                }
            }
            JournalRecord::Mark(m) => {
                let idx = self.marks.len();
                self.mark_by_submission.insert(m.submission_id.clone(), idx);
                if m.recorded_for_grade {
                    self.recorded
                        .insert((m.student_id.clone(), m.assignment_key.clone()), idx);
                }
                self.marks.push(m);
            }
            JournalRecord::WeeklySent { boundary } => {
                self.weekly_sent.insert(boundary);
            }
        }
    }

    fn attempts(&self, student: &str, assignment: &str) -> u32 {
        self.by_pair
            .get(&(student.to_string(), assignment.to_string()))
            .map_or(0, |v| v.len() as u32)
    }
}

#[derive(Debug)]
pub struct ResultsStore {
    path: PathBuf,
    index: Index,
    /// Bytes of the journal already applied to `index`.
    offset: u64,
}

/// The journal file held under an exclusive `flock`, released on drop.
struct Locked(File);

impl Locked {
    fn open(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
            .at(path)?;
        // SAFETY: plain syscall on a descriptor we own.
        if unsafe { libc::flock(f.as_raw_fd(), libc::LOCK_EX) } != 0 {
            return Err(Error::io(path, std::io::Error::last_os_error()));
        }
        Ok(Locked(f))
    }
}

impl Drop for Locked {
    fn drop(&mut self) {
        // SAFETY: as above.
        unsafe { libc::flock(self.0.as_raw_fd(), libc::LOCK_UN) };
    }
}

impl ResultsStore {
    pub fn journal_path(root: &Path, course: &str, year: &str) -> PathBuf {
        root.join("journal").join(format!("{course}-{year}.jsonl"))
    }

    /// Open (creating if absent) and replay the journal.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        let mut store = ResultsStore {
            path: path.to_path_buf(),
            index: Index::default(),
            offset: 0,
        };
        let mut locked = Locked::open(path)?;
        store.catch_up(&mut locked)?;
        Ok(store)
    }

    /// Apply records appended by other writers since the last read. Runs
    /// under the lock, so an incomplete final line can only be left by a
    /// writer that died mid-append; it is truncated away.
    fn catch_up(&mut self, locked: &mut Locked) -> Result<()> {
        let path = &self.path;
        let f = &mut locked.0;
        f.seek(SeekFrom::Start(self.offset)).at(path)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).at(path)?;
        if !bytes.is_empty() && !bytes.ends_with(b"\n") {
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            log::warn!(
                "journal {}: truncating torn final record ({} bytes)",
                path.display(),
                bytes.len() - keep
            );
            f.set_len(self.offset + keep as u64).at(path)?;
            f.sync_all().at(path)?;
            bytes.truncate(keep);
        }
        for r in parse_lines(&bytes, path)? {
            self.index.apply(r);
        }
        self.offset += bytes.len() as u64;
        Ok(())
    }

    /// Re-read records appended by other processes.
    pub fn refresh(&mut self) -> Result<()> {
        let mut locked = Locked::open(&self.path)?;
        self.catch_up(&mut locked)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Durably append one record. Records that would break an invariant
    /// (duplicate marks, a second recorded grade, attempt gaps) are refused.
    /// The check sees every record appended before, by any process.
    pub fn append(&mut self, record: JournalRecord) -> Result<()> {
        let mut locked = Locked::open(&self.path)?;
        self.catch_up(&mut locked)?;
        self.index.admit(&record)?;
        let line = JournalLine {
            schema_version: JOURNAL_SCHEMA_VERSION,
            recorded_at: now(),
            record,
        };
        let mut text = serde_json::to_string(&line).map_err(|e| Error::json("journal record", e))?;
        text.push('\n');
        locked.0.write_all(text.as_bytes()).at(&self.path)?;
        locked.0.sync_all().at(&self.path)?;
        self.offset += text.len() as u64;
        self.index.apply(line.record);
        Ok(())
    }

    /// Every record in journal order.
    pub fn records(&self) -> Result<Vec<JournalRecord>> {
        let bytes = fs::read(&self.path).unwrap_or_default();
        parse_lines(&bytes, &self.path)
    }

    pub fn submission(&self, id: &str) -> Option<&SubmissionRecord> {
        self.index.submissions.get(id)
    }

    /// Accepted submissions in arrival order.
    pub fn submissions(&self) -> impl Iterator<Item = &SubmissionRecord> {
        self.index.order.iter().filter_map(|id| self.index.submissions.get(id))
    }

    pub fn submissions_for(&self, student: &str, assignment: &str) -> Vec<&SubmissionRecord> {
        self.index
            .by_pair
            .get(&(student.to_string(), assignment.to_string()))
            .map(|ids| ids.iter().filter_map(|id| self.index.submissions.get(id)).collect())
            .unwrap_or_default()
    }

    pub fn attempts(&self, student: &str, assignment: &str) -> u32 {
        self.index.attempts(student, assignment)
    }

    pub fn find_duplicate(&self, sender: &str, assignment: &str, digest: &str) -> Option<&SubmissionRecord> {
        self.index
            .dedup
            .get(&(sender.to_string(), assignment.to_string(), digest.to_string()))
            .and_then(|id| self.index.submissions.get(id))
    }

    pub fn has_marker(&self, submission_id: &str, artifact: Artifact) -> bool {
        self.index
            .markers
            .contains_key(&(submission_id.to_string(), artifact))
    }

    pub fn results_dir(&self, submission_id: &str) -> Option<&str> {
        self.index.outcome_dirs.get(submission_id).map(String::as_str)
    }

    pub fn marks(&self) -> &[MarkRecord] {
        &self.index.marks
    }

    pub fn mark_for(&self, submission_id: &str) -> Option<&MarkRecord> {
        self.index
            .mark_by_submission
            .get(submission_id)
            .map(|&i| &self.index.marks[i])
    }

    pub fn recorded(&self, student: &str, assignment: &str) -> Option<&MarkRecord> {
        self.index
            .recorded
            .get(&(student.to_string(), assignment.to_string()))
            .map(|&i| &self.index.marks[i])
    }

    pub fn rejections(&self) -> &[RejectionRecord] {
        &self.index.rejections
    }

    pub fn weekly_sent(&self, boundary: Timestamp) -> bool {
        self.index.weekly_sent.contains(&boundary)
    }

    /// One row per (student, assignment) with at least one mark.
    pub fn current_marks(&self) -> Vec<CurrentMark> {
        let mut table: BTreeMap<(String, String), CurrentMark> = BTreeMap::new();
        for m in &self.index.marks {
            let key = (m.student_id.clone(), m.assignment_key.clone());
            let row = table.entry(key).or_insert_with(|| CurrentMark {
                student_id: m.student_id.clone(),
                assignment_key: m.assignment_key.clone(),
                attempts: self.index.attempts(&m.student_id, &m.assignment_key),
                marked: 0,
                latest_percent: 0,
                recorded_percent: None,
                recorded_submission: None,
            });
            row.marked += 1;
            row.latest_percent = m.percent;
            if m.recorded_for_grade {
                row.recorded_percent = m.recorded_percent;
                row.recorded_submission = Some(m.submission_id.clone());
            }
        }
        table.into_values().collect()
    }
}

fn parse_lines(bytes: &[u8], path: &Path) -> Result<Vec<JournalRecord>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Report(format!("journal {} is not UTF-8", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let ctx = || format!("{} line {}", path.display(), n + 1);
        let raw: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::json(ctx(), e))?;
        let version = raw.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(JOURNAL_SCHEMA_VERSION as u64) {
            return Err(Error::SchemaVersion {
                context: ctx(),
                found: version.unwrap_or(0) as u32,
                expected: JOURNAL_SCHEMA_VERSION,
            });
        }
        let parsed: JournalLine = serde_json::from_value(raw).map_err(|e| Error::json(ctx(), e))?;
        out.push(parsed.record);
    }
    Ok(out)
}
