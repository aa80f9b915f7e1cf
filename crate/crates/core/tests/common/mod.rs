//! Shared fixtures for the integration tests: a demo course run by the
//! fixture-runner binary, inbox helpers and outbox inspection.
#![allow(dead_code)]

pub mod term;
pub mod oracle;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::TimeZone;
use gradepipe_core::course::Course;
use gradepipe_core::faults::Faults;
use gradepipe_core::mail::compose_message;
use gradepipe_core::model::Timestamp;
use gradepipe_core::outbox::FileDropTransport;
use gradepipe_core::scaffold::{write_demo, DemoOptions};
use tempfile::TempDir;

pub const RUNNER: &str = env!("CARGO_BIN_EXE_gradepipe-fixture-runner");

pub const NORA: &str = "nora@uni.email.address";
pub const ADA: &str = "ada@uni.email.address";
pub const MALAIKA: &str = "malaika@uni.email.address";
pub const STRANGER: &str = "someone@elsewhere.example";

pub struct Demo {
    pub dir: TempDir,
    pub course: Course,
    pub faults: Arc<Faults>,
}

impl Demo {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn transport(&self) -> FileDropTransport {
        FileDropTransport::new(self.root().join("outbox"))
    }

    /// Reload the course, as a fresh process would.
    pub fn reopen(&mut self) {
        self.course = Course::open_with(self.dir.path(), self.faults.clone()).unwrap();
    }
}

pub fn demo() -> Demo {
    demo_with(|_| {})
}

/// A demo course whose configuration text is adjusted by `edit` first.
pub fn demo_with(edit: impl FnOnce(&mut String)) -> Demo {
    let dir = tempfile::tempdir().unwrap();
    let opts = DemoOptions {
        runner_command: vec![RUNNER.to_string()],
        cpu_seconds: 1,
        force: false,
    };
    write_demo(dir.path(), &opts).unwrap();
    let cfg = dir.path().join("gradepipe.toml");
    let mut text = fs::read_to_string(&cfg).unwrap();
    edit(&mut text);
    fs::write(&cfg, text).unwrap();
    let faults = Arc::new(Faults::none());
    let course = Course::open_with(dir.path(), faults.clone()).unwrap();
    Demo { dir, course, faults }
}

pub fn at(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32) -> Timestamp {
    chrono::Utc.with_ymd_and_hms(y, mo, d, h, mi, s).unwrap()
}

/// Drop a message into the mail inbox.
pub fn post(demo: &Demo, name: &str, from: &str, subject: &str, files: &[(&str, &str)], received: Option<Timestamp>) -> PathBuf {
    let files: Vec<(&str, &[u8])> = files.iter().map(|(n, b)| (*n, b.as_bytes())).collect();
    let raw = compose_message(from, subject, received, &files);
    let path = demo.course.mail_dir().join(name);
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(&path, raw).unwrap();
    path
}

#[derive(Debug, Clone)]
pub struct Sent {
    pub file: String,
    pub to: String,
    pub subject: String,
    pub category: String,
    pub body: String,
}

/// Messages in the file-drop outbox, in delivery order.
pub fn outbox(demo: &Demo) -> Vec<Sent> {
    let dir = demo.root().join("outbox");
    let mut files: Vec<(std::time::SystemTime, String, PathBuf)> = fs::read_dir(&dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "eml"))
                .map(|p| (fs::metadata(&p).unwrap().modified().unwrap(), p.file_name().unwrap().to_string_lossy().into_owned(), p))
                .collect()
        })
        .unwrap_or_default();
    files.sort_by(|a, b| a.1.cmp(&b.1));
    files
        .into_iter()
        .map(|(_, name, p)| {
            let text = fs::read_to_string(&p).unwrap();
            let (head, body) = text.split_once("\n\n").unwrap();
            let header = |k: &str| {
                head.lines()
                    .find_map(|l| l.strip_prefix(&format!("{k}: ")))
                    .unwrap_or_default()
                    .to_string()
            };
            Sent {
                file: name,
                to: header("To"),
                subject: header("Subject"),
                category: header("X-Gradepipe-Category"),
                body: body.to_string(),
            }
        })
        .collect()
}

pub fn count(sent: &[Sent], category: &str) -> usize {
    sent.iter().filter(|m| m.category == category).count()
}

pub fn queues_empty(course: &Course) -> bool {
    course.queues().iter().all(|q| q.list().unwrap().is_empty() && q.flagged().unwrap().is_empty())
}

/// File-drop delivery that can be switched off, recording what it accepted.
pub struct Gate {
    pub inner: FileDropTransport,
    pub down: bool,
    pub delivered: Vec<String>,
}

impl Gate {
    pub fn new(demo: &Demo) -> Self {
        Gate {
            inner: demo.transport(),
            down: false,
            delivered: Vec::new(),
        }
    }
}

impl gradepipe_core::outbox::Transport for Gate {
    fn send(&mut self, item_id: &str, from: &str, msg: &gradepipe_core::outbox::OutboundMessage) -> Result<(), gradepipe_core::outbox::SendError> {
        if self.down {
            return Err(gradepipe_core::outbox::SendError::Unavailable("connection refused".into()));
        }
        self.inner.send(item_id, from, msg)?;
        self.delivered.push(item_id.to_string());
        Ok(())
    }
}

/// Back-date the lock file of `queue` by `secs`.
pub fn backdate_lock(queue: &gradepipe_core::fsqueue::Queue, secs: i64) {
    let mut info = queue.lock_info().unwrap().expect("lock present");
    info.acquired_at -= chrono::Duration::seconds(secs);
    fs::write(queue.lock_path(), serde_json::to_vec(&info).unwrap()).unwrap();
}
