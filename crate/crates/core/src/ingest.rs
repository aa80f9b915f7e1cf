//! The incoming processor: archive, validate, record, and hand over to
//! testing.
//!
//! For every inbox entry, oldest first:
//!
//! 1. copy it verbatim into `archive/<course>/<year>/`;
//! 2. parse it (unreadable entries move to `archive/malformed/` and the
//!    administrator is told);
//! 3. validate sender, subject and attachments, in that order;
//! 4. reply with a rejection, or store the files under
//!    `submissions/<assignment>/<student>/<attempt>/`, journal the
//!    submission, queue a test job and a receipt;
//! 5. delete the entry from the inbox.
//!
//! Every step is safe to repeat. If the process dies part-way, the entry is
//! still in the inbox and the next pass finishes the job; a journalled
//! submission with the same sender, assignment and content is recognised and
//! never queued twice.

use std::fs::{self, File};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::course::{path_component, Course};
use crate::error::{Error, IoContext, Result};
use crate::faults::CrashPoint;
use crate::fsqueue::{ItemKind, LockHandle, Queue};
use crate::mail::{list_inbox, read_entry, Channel, IncomingMessage, InboxEntry};
use crate::manifest::Manifest;
use crate::model::{SubmissionRecord, SubmissionStatus, SubmittedFile, Timestamp};
use crate::outbox::{MessageCategory, OutboundMessage};
use crate::render;
use crate::roster::Roster;
use crate::store::{Artifact, JournalRecord, RejectionRecord, ResultsStore};

/// Payload of a testing-queue item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestJob {
    pub submission_id: String,
    pub student_id: String,
    pub assignment_key: String,
    pub attempt: u32,
    /// Stored files, relative to the pipeline root.
    pub files: Vec<String>,
    pub received_at: Timestamp,
    /// Failed attempts to stage the sandbox.
    #[serde(default)]
    pub stage_failures: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    NotEnrolled,
    UnknownAssignment,
    MissingFiles(Vec<String>),
    Malformed(String),
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::NotEnrolled => "not_enrolled",
            RejectReason::UnknownAssignment => "unknown_assignment",
            RejectReason::MissingFiles(_) => "missing_files",
            RejectReason::Malformed(_) => "malformed",
        }
    }

    pub fn explanation(&self, msg: &IncomingMessage) -> String {
        match self {
            RejectReason::NotEnrolled => format!(
                "The address {} is not registered for this course. Please send your work \
                 from the address the course team has on record, or ask them to add this one.",
                msg.sender
            ),
            RejectReason::UnknownAssignment => format!(
                "The subject line \"{}\" does not name an exercise of this course. Please use \
                 the exercise name exactly as given in the instructions.",
                msg.subject.trim()
            ),
            RejectReason::MissingFiles(files) => format!(
                "The following required file(s) were not attached: {}. Files must be attached \
                 and named exactly as in the instructions.",
                files.join(", ")
            ),
            RejectReason::Malformed(why) => format!("The message could not be processed: {why}."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationOutcome {
    Accepted(SubmissionRecord),
    Rejected(RejectReason),
}

fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn content_digest(msg: &IncomingMessage) -> String {
    let mut parts: Vec<(&str, &[u8])> = msg
        .attachments
        .iter()
        .map(|a| (a.filename.trim(), a.bytes.as_slice()))
        .collect();
    parts.sort();
    let mut h = Sha256::new();
    for (name, bytes) in parts {
        h.update(name.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

fn plain_filename(name: &str) -> bool {
    !name.is_empty() && !name.contains(['/', '\\', '\0']) && name != "." && name != ".."
}

pub fn submission_id(student_id: &str, assignment_key: &str, attempt: u32) -> String {
    let tag = digest_hex(format!("{student_id}\0{assignment_key}\0{attempt}").as_bytes());
    format!(
        "{}-{}-{attempt}-{}",
        path_component(assignment_key),
        path_component(student_id),
        &tag[..8]
    )
}

pub fn submission_dir(assignment_key: &str, student_id: &str, attempt: u32) -> PathBuf {
    Path::new("submissions")
        .join(path_component(assignment_key))
        .join(path_component(student_id))
        .join(attempt.to_string())
}

/// Check enrolment, then the assignment, then the attachments. The first
/// failing check decides.
pub fn validate_submission(
    msg: &IncomingMessage,
    roster: &Roster,
    manifest: &Manifest,
    store: &ResultsStore,
) -> ValidationOutcome {
    let Some(student) = roster.by_address(&msg.sender) else {
        log::warn!("submission from unregistered address {} (subject {:?})", msg.sender, msg.subject);
        return ValidationOutcome::Rejected(RejectReason::NotEnrolled);
    };
    let Some(spec) = manifest.by_subject(&msg.subject) else {
        return ValidationOutcome::Rejected(RejectReason::UnknownAssignment);
    };
    let present: Vec<&str> = msg.attachments.iter().map(|a| a.filename.trim()).collect();
    let missing: Vec<String> = spec
        .required_files
        .iter()
        .filter(|f| !present.contains(&f.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return ValidationOutcome::Rejected(RejectReason::MissingFiles(missing));
    }
    if let Some(bad) = present.iter().find(|n| !plain_filename(n)) {
        return ValidationOutcome::Rejected(RejectReason::Malformed(format!(
            "attachment name {bad:?} is not a plain file name"
        )));
    }
    let attempt = store.attempts(&student.student_id, &spec.subject_key) + 1;
    let dir = submission_dir(&spec.subject_key, &student.student_id, attempt);
    let mut files: Vec<SubmittedFile> = Vec::new();
    for a in &msg.attachments {
        let name = a.filename.trim();
        if files.iter().any(|f| f.filename == name) {
            log::info!("ignoring second attachment named {name}");
            continue;
        }
        files.push(SubmittedFile {
            filename: name.to_string(),
            digest: digest_hex(&a.bytes),
            archived_path: dir.join(name).display().to_string(),
        });
    }
    ValidationOutcome::Accepted(SubmissionRecord {
        submission_id: submission_id(&student.student_id, &spec.subject_key, attempt),
        student_id: student.student_id.clone(),
        assignment_key: spec.subject_key.clone(),
        received_at: msg.received_at,
        files,
        attempt,
        status: SubmissionStatus::Accepted,
        content_digest: content_digest(msg),
        sender: msg.sender.clone(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub skipped: bool,
    pub polled: usize,
    pub accepted: usize,
    pub duplicates: usize,
    pub rejected: usize,
    pub quarantined: usize,
    /// Entries left in the inbox after an error.
    pub failed: usize,
}

enum EntryOutcome {
    Accepted,
    Duplicate,
    Rejected,
    Quarantined,
}

fn write_durable(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.partial"));
    let mut f = File::create(&tmp).at(&tmp)?;
    f.write_all(bytes).at(&tmp)?;
    f.sync_all().at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

/// Write a file that must never change once written.
fn write_immutable(path: &Path, bytes: &[u8]) -> Result<()> {
    match fs::read(path) {
        Ok(existing) if existing == bytes => Ok(()),
        Ok(_) => Err(Error::contract(format!("{} exists with different content", path.display()))),
        Err(e) if e.kind() == ErrorKind::NotFound => write_durable(path, bytes),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).at(to)?;
    for entry in fs::read_dir(from).at(from)? {
        let entry = entry.at(from)?;
        let target = to.join(entry.file_name());
        if entry.path().is_dir() {
            copy_tree(&entry.path(), &target)?;
        } else {
            let bytes = fs::read(entry.path()).at(entry.path())?;
            write_immutable(&target, &bytes)?;
        }
    }
    Ok(())
}

fn same_tree(a: &Path, b: &Path) -> bool {
    let list = |d: &Path| -> Option<Vec<(String, Vec<u8>)>> {
        let mut v = Vec::new();
        for e in fs::read_dir(d).ok()? {
            let e = e.ok()?;
            if e.path().is_file() {
                v.push((e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).ok()?));
            }
        }
        v.sort();
        Some(v)
    };
    matches!((list(a), list(b)), (Some(x), Some(y)) if x == y)
}

/// Copy an inbox entry into the archive; repeated calls reuse the copy.
/// Returns the archive path relative to the root.
fn archive_entry(course: &Course, entry: &InboxEntry) -> Result<PathBuf> {
    let dir = course.archive_dir();
    fs::create_dir_all(&dir).at(&dir)?;
    let base = match entry.channel {
        Channel::Mail => format!("{}.eml", path_component(&entry.name)),
        Channel::Drop => format!("{}.bundle", path_component(&entry.name)),
    };
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{n}.{base}") };
        let target = dir.join(&name);
        let rel = target.strip_prefix(&course.root).unwrap_or(&target).to_path_buf();
        match entry.channel {
            Channel::Mail => {
                let raw = fs::read(&entry.path).at(&entry.path)?;
                match fs::read(&target) {
                    Ok(existing) if existing == raw => return Ok(rel),
                    Ok(_) => continue,
                    Err(e) if e.kind() == ErrorKind::NotFound => {
                        write_durable(&target, &raw)?;
                        return Ok(rel);
                    }
                    Err(e) => return Err(Error::io(target, e)),
                }
            }
            Channel::Drop => {
                if target.exists() {
                    if same_tree(&entry.path, &target) {
                        return Ok(rel);
                    }
                    continue;
                }
                let staging = dir.join(format!(".{name}.partial"));
                let _ = fs::remove_dir_all(&staging);
                copy_tree(&entry.path, &staging)?;
                fs::rename(&staging, &target).at(&target)?;
                return Ok(rel);
            }
        }
    }
    unreachable!("archive name search is unbounded")
}

fn remove_entry(entry: &InboxEntry) -> Result<()> {
    let r = match entry.channel {
        Channel::Mail => fs::remove_file(&entry.path),
        Channel::Drop => fs::remove_dir_all(&entry.path),
    };
    match r {
        Err(e) if e.kind() != ErrorKind::NotFound => Err(Error::io(&entry.path, e)),
        _ => Ok(()),
    }
}

fn quarantine(course: &Course, entry: &InboxEntry, reason: &str) -> Result<()> {
    let dir = course.malformed_dir();
    fs::create_dir_all(&dir).at(&dir)?;
    let mut target = dir.join(path_component(&entry.name));
    let mut n = 1;
    while target.exists() {
        target = dir.join(format!("{}.{n}", path_component(&entry.name)));
        n += 1;
    }
    course.alert(
        &format!("unreadable inbox entry {}", entry.name),
        &format!("{reason}\n\nMoved to {}", target.display()),
    )?;
    fs::rename(&entry.path, &target).at(&entry.path)
}

/// Does the queue (live or flagged) hold an item whose payload has this
/// `field == value`?
pub(crate) fn queue_holds(queue: &Queue, field: &str, value: &str, category: Option<MessageCategory>) -> Result<bool> {
    let ids = queue.list()?;
    let flagged = queue.flagged()?;
    let items = ids
        .iter()
        .filter_map(|id| queue.load(id).ok())
        .chain(flagged.iter().filter_map(|id| queue.load_flagged(id).ok()));
    for item in items {
        if item.payload.get(field).and_then(|v| v.as_str()) != Some(value) {
            continue;
        }
        match category {
            None => return Ok(true),
            Some(c) => {
                if item.payload_as::<OutboundMessage>().is_ok_and(|m| m.category == c) {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

fn ensure_test_job(course: &Course, store: &mut ResultsStore, record: &SubmissionRecord) -> Result<()> {
    let id = &record.submission_id;
    if store.has_marker(id, Artifact::TestJob) {
        return Ok(());
    }
    let done = store.mark_for(id).is_some()
        || store.submission(id).is_some_and(|s| s.status != SubmissionStatus::Accepted);
    let item_id = if done || queue_holds(&course.testing, "submission_id", id, None)? {
        "existing".to_string()
    } else {
        let job = TestJob {
            submission_id: id.clone(),
            student_id: record.student_id.clone(),
            assignment_key: record.assignment_key.clone(),
            attempt: record.attempt,
            files: record.files.iter().map(|f| f.archived_path.clone()).collect(),
            received_at: record.received_at,
            stage_failures: 0,
        };
        course.testing.enqueue(ItemKind::TestJob, &job)?
    };
    store.append(JournalRecord::Enqueued {
        submission_id: id.clone(),
        artifact: Artifact::TestJob,
        item_id,
    })
}

fn ensure_receipt(course: &Course, store: &mut ResultsStore, record: &SubmissionRecord, receive_only: bool) -> Result<()> {
    let id = &record.submission_id;
    if store.has_marker(id, Artifact::Receipt) {
        return Ok(());
    }
    let item_id = if queue_holds(&course.outgoing, "ref_id", id, Some(MessageCategory::Receipt))? {
        "existing".to_string()
    } else {
        let student = course
            .roster
            .get(&record.student_id)
            .ok_or_else(|| Error::contract(format!("student {} left the roster", record.student_id)))?;
        let files: Vec<String> = record.files.iter().map(|f| f.filename.clone()).collect();
        let msg = render::receipt(
            student,
            &record.assignment_key,
            record.attempt,
            &record.received_at.with_timezone(&course.tz),
            &files,
            receive_only,
            &course.config.contact,
        )
        .with_ref(id.clone());
        course.send(&msg)?
    };
    store.append(JournalRecord::Enqueued {
        submission_id: id.clone(),
        artifact: Artifact::Receipt,
        item_id,
    })
}

fn handle_entry(course: &Course, store: &mut ResultsStore, entry: &InboxEntry) -> Result<EntryOutcome> {
    store.refresh()?;
    let archived = archive_entry(course, entry)?;
    course.faults.hit(CrashPoint::IngestAfterArchive)?;
    let msg = match read_entry(entry) {
        Ok(m) => m,
        Err(reason) => {
            quarantine(course, entry, &reason)?;
            return Ok(EntryOutcome::Quarantined);
        }
    };
    let archive_path = archived.display().to_string();
    let outcome = match validate_submission(&msg, &course.roster, &course.manifest, store) {
        ValidationOutcome::Rejected(reason) => {
            if !store.rejections().iter().any(|r| r.archive_path == archive_path) {
                let explanation = reason.explanation(&msg);
                course.send(
                    &render::rejection(&msg.sender, msg.subject.trim(), &explanation, &course.config.contact)
                        .with_ref(archive_path.clone()),
                )?;
                store.append(JournalRecord::Rejection(RejectionRecord {
                    sender: msg.sender.clone(),
                    subject: msg.subject.clone(),
                    reason: reason.code().to_string(),
                    received_at: msg.received_at,
                    archive_path,
                }))?;
            }
            EntryOutcome::Rejected
        }
        ValidationOutcome::Accepted(fresh) => {
            let existing = store
                .find_duplicate(&fresh.sender, &fresh.assignment_key, &fresh.content_digest)
                .cloned();
            let duplicate = existing.is_some();
            let record = match existing {
                Some(r) => {
                    log::info!("{}: same content already recorded as {}", entry.name, r.submission_id);
                    r
                }
                None => {
                    for (file, att) in fresh.files.iter().zip(dedup_attachments(&msg)) {
                        write_immutable(&course.root.join(&file.archived_path), &att.bytes)?;
                    }
                    store.append(JournalRecord::Submission(fresh.clone()))?;
                    fresh
                }
            };
            course.faults.hit(CrashPoint::IngestAfterRecord)?;
            let spec = course
                .manifest
                .get(&record.assignment_key)
                .ok_or_else(|| Error::contract(format!("assignment {} left the manifest", record.assignment_key)))?;
            if !spec.is_receive_only() {
                ensure_test_job(course, store, &record)?;
            }
            course.faults.hit(CrashPoint::IngestAfterTestJob)?;
            ensure_receipt(course, store, &record, spec.is_receive_only())?;
            if duplicate {
                EntryOutcome::Duplicate
            } else {
                EntryOutcome::Accepted
            }
        }
    };
    remove_entry(entry)?;
    Ok(outcome)
}

/// Attachments in the order [`validate_submission`] lists files: first of
/// each name.
fn dedup_attachments(msg: &IncomingMessage) -> Vec<&crate::mail::Attachment> {
    let mut seen = std::collections::HashSet::new();
    msg.attachments
        .iter()
        .filter(|a| seen.insert(a.filename.trim().to_string()))
        .collect()
}

/// One pass over the inbox under the incoming lock.
pub fn process_incoming(course: &Course) -> Result<IngestSummary> {
    let Some(lock) = course.incoming.acquire_lock()? else {
        return Ok(IngestSummary {
            skipped: true,
            ..Default::default()
        });
    };
    let mut summary = IngestSummary::default();
    let outcome = ingest_pass(course, &lock, &mut summary);
    if matches!(&outcome, Err(e) if e.is_injected_crash()) {
        return outcome.map(|_| summary);
    }
    course.incoming.release_lock(lock)?;
    outcome.map(|_| summary)
}

fn ingest_pass(course: &Course, _lock: &LockHandle, summary: &mut IngestSummary) -> Result<()> {
    let mut store = course.store()?;
    for entry in list_inbox(&course.mail_dir(), &course.drop_dir())? {
        summary.polled += 1;
        match handle_entry(course, &mut store, &entry) {
            Ok(EntryOutcome::Accepted) => summary.accepted += 1,
            Ok(EntryOutcome::Duplicate) => summary.duplicates += 1,
            Ok(EntryOutcome::Rejected) => summary.rejected += 1,
            Ok(EntryOutcome::Quarantined) => summary.quarantined += 1,
            Err(e) if e.is_injected_crash() => return Err(e),
            Err(e) => {
                summary.failed += 1;
                log::error!("inbox entry {}: {e}", entry.name);
                course.alert_once(
                    &format!("ingest-{}", entry.name),
                    &format!("cannot process inbox entry {}", entry.name),
                    &format!("{e}\n\nThe entry stays in the inbox and is retried every pass."),
                )?;
                store = course.store()?;
            }
        }
    }
    Ok(())
}
