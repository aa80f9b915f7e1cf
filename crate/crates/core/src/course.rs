//! Everything a processor needs to know about one course, loaded from the
//! pipeline root.
//!
//! Layout under the root:
//!
//! ```text
//! gradepipe.toml  roster.csv  manifest.toml  suites/<suite_id>/...
//! inbox/mail/  inbox/drop/
//! queues/{incoming,testing,outgoing}/
//! archive/<course>/<year>/  archive/malformed/
//! submissions/<assignment>/<student>/<attempt>/
//! results/<submission_id>/
//! sandbox/<job>/
//! journal/<course>-<year>.jsonl
//! state/alerts/
//! ```

use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono_tz::Tz;

use crate::config::{resolve, CourseConfig, DEFAULT_CONFIG_FILE};
use crate::error::{Error, IoContext, Result};
use crate::faults::Faults;
use crate::fsqueue::Queue;
use crate::manifest::Manifest;
use crate::outbox::{enqueue_message, OutboundMessage, OUTGOING_QUEUE};
use crate::render;
use crate::roster::Roster;
use crate::runner::RunnerPlugin;
use crate::store::ResultsStore;

pub const INCOMING_QUEUE: &str = "incoming";
pub const TESTING_QUEUE: &str = "testing";

/// Make a string safe to use as one path component.
pub fn path_component(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    match cleaned.as_str() {
        "" | "." | ".." => "_".into(),
        _ => cleaned,
    }
}

#[derive(Debug, Clone)]
pub struct Course {
    pub root: PathBuf,
    pub config: CourseConfig,
    pub tz: Tz,
    pub roster: Roster,
    pub manifest: Manifest,
    pub faults: Arc<Faults>,
    pub incoming: Queue,
    pub testing: Queue,
    pub outgoing: Queue,
}

impl Course {
    /// Load `<root>/gradepipe.toml` and the files it names.
    pub fn open(root: &Path) -> Result<Self> {
        Self::open_with(root, Arc::new(Faults::none()))
    }

    pub fn open_with(root: &Path, faults: Arc<Faults>) -> Result<Self> {
        let config = CourseConfig::load(&root.join(DEFAULT_CONFIG_FILE))?;
        Self::from_config(root, config, faults)
    }

    pub fn from_config(root: &Path, config: CourseConfig, faults: Arc<Faults>) -> Result<Self> {
        let root = &fs::canonicalize(root).at(root)?;
        let tz = config.tz()?;
        let roster = Roster::load(&resolve(root, &config.roster))?;
        let manifest = Manifest::load(&resolve(root, &config.manifest), tz, config.policies.style_base)?;
        manifest.validate_against(&roster)?;
        for a in manifest.assignments() {
            if a.suite_id.is_some() {
                let runner = a.runner.as_ref().or(config.default_runner.as_ref());
                match runner {
                    Some(r) if config.runners.contains_key(r) => {}
                    Some(r) => return Err(Error::config(format!("{}: unknown runner {r:?}", a.subject_key))),
                    None => return Err(Error::config(format!("{}: no runner configured", a.subject_key))),
                }
            }
        }
        Ok(Course {
            incoming: Queue::open(root, INCOMING_QUEUE, faults.clone())?,
            testing: Queue::open(root, TESTING_QUEUE, faults.clone())?,
            outgoing: Queue::open(root, OUTGOING_QUEUE, faults.clone())?,
            root: root.to_path_buf(),
            config,
            tz,
            roster,
            manifest,
            faults,
        })
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.root, p)
    }

    pub fn mail_dir(&self) -> PathBuf {
        self.path(&self.config.inbox.mail_dir)
    }

    pub fn drop_dir(&self) -> PathBuf {
        self.path(&self.config.inbox.drop_dir)
    }

    pub fn archive_dir(&self) -> PathBuf {
        self.root
            .join("archive")
            .join(&self.config.course)
            .join(&self.config.year)
    }

    pub fn malformed_dir(&self) -> PathBuf {
        self.root.join("archive").join("malformed")
    }

    pub fn suite_dir(&self, suite_id: &str) -> PathBuf {
        self.path(&self.config.suites_dir).join(path_component(suite_id))
    }

    pub fn journal_path(&self) -> PathBuf {
        ResultsStore::journal_path(&self.root, &self.config.course, &self.config.year)
    }

    /// A fresh view of the results journal.
    pub fn store(&self) -> Result<ResultsStore> {
        ResultsStore::open(&self.journal_path())
    }

    pub fn runner_for(&self, runner: Option<&str>) -> Result<RunnerPlugin> {
        let id = runner
            .or(self.config.default_runner.as_deref())
            .ok_or_else(|| Error::config("no runner configured"))?;
        let cfg = self
            .config
            .runners
            .get(id)
            .ok_or_else(|| Error::config(format!("unknown runner {id:?}")))?;
        Ok(RunnerPlugin::from_config(id, cfg))
    }

    pub fn queues(&self) -> [&Queue; 3] {
        [&self.incoming, &self.testing, &self.outgoing]
    }

    pub fn send(&self, msg: &OutboundMessage) -> Result<String> {
        enqueue_message(&self.outgoing, msg)
    }

    pub fn alert(&self, summary: &str, detail: &str) -> Result<String> {
        log::warn!("admin alert: {summary}");
        self.send(&render::admin_alert(&self.config.admin, summary, detail))
    }

    /// Send an admin alert unless one was already sent under `key`.
    pub fn alert_once(&self, key: &str, summary: &str, detail: &str) -> Result<bool> {
        let dir = self.root.join("state").join("alerts");
        fs::create_dir_all(&dir).at(&dir)?;
        let marker = dir.join(path_component(key));
        match OpenOptions::new().write(true).create_new(true).open(&marker) {
            Ok(_) => {
                self.alert(summary, detail)?;
                Ok(true)
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                log::info!("alert {key} already sent: {summary}");
                Ok(false)
            }
            Err(e) => Err(Error::io(marker, e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_components_are_plain() {
        assert_eq!(path_component("lab 4"), "lab_4");
        assert_eq!(path_component("../x"), ".._x");
        assert_eq!(path_component(".."), "_");
        assert_eq!(path_component("s-1.a"), "s-1.a");
    }
}
