//! Course configuration file (`gradepipe.toml`).
//!
//! ```toml
//! schema_version = 1
//! course = "ABC"
//! year = "2014-15"
//! contact = "course-help@uni.email.address"
//! admin = "admin@uni.email.address"
//! sender = "abc@uni.email.address"
//! timezone = "Europe/London"
//! roster = "roster.csv"
//! manifest = "manifest.toml"
//! suites_dir = "suites"
//! tick_interval_s = 60
//! default_runner = "fixture"
//!
//! [inbox]
//! mail_dir = "inbox/mail"
//! drop_dir = "inbox/drop"
//!
//! [sandbox]
//! cpu_seconds = 10
//! address_space_bytes = 536870912
//! file_size_bytes = 10485760
//! open_files = 64
//! environment = { PATH = "/usr/local/bin:/usr/bin:/bin", LANG = "C.UTF-8" }
//!
//! [runners.fixture]
//! command = ["gradepipe-fixture-runner", "--suite", "{suite}", "--dir", "{dir}", "--out", "{out}"]
//!
//! [transport]
//! kind = "file_drop"
//! dir = "outbox"
//!
//! [policies]
//! late = "record_zero"
//! style_base = 2
//! stale_lock_max_age_s = 300
//! ```
//!
//! Relative paths resolve against the pipeline root. Unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{NaiveTime, Weekday};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::sandbox::SandboxConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_CONFIG_FILE: &str = "gradepipe.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CourseConfig {
    pub schema_version: u32,
    pub course: String,
    pub year: String,
    /// Course-team address quoted in every message footer.
    pub contact: String,
    /// Recipient of administrator alerts.
    pub admin: String,
    /// From address of outgoing mail.
    pub sender: String,
    #[serde(default = "default_timezone")]
    pub timezone: String,
    #[serde(default = "default_roster")]
    pub roster: PathBuf,
    #[serde(default = "default_manifest")]
    pub manifest: PathBuf,
    #[serde(default = "default_suites")]
    pub suites_dir: PathBuf,
    #[serde(default = "default_tick")]
    pub tick_interval_s: u64,
    #[serde(default)]
    pub inbox: InboxConfig,
    #[serde(default)]
    pub sandbox: SandboxConfig,
    #[serde(default)]
    pub runners: BTreeMap<String, RunnerConfig>,
    pub default_runner: Option<String>,
    pub transport: TransportConfig,
    #[serde(default)]
    pub policies: Policies,
}

fn default_timezone() -> String {
    "UTC".into()
}
fn default_roster() -> PathBuf {
    "roster.csv".into()
}
fn default_manifest() -> PathBuf {
    "manifest.toml".into()
}
fn default_suites() -> PathBuf {
    "suites".into()
}
fn default_tick() -> u64 {
    60
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InboxConfig {
    /// Directory of raw RFC-822 message files, one message per file.
    pub mail_dir: PathBuf,
    /// Directory of `<id>/meta.json` + files bundles from other front ends.
    pub drop_dir: PathBuf,
}

impl Default for InboxConfig {
    fn default() -> Self {
        InboxConfig {
            mail_dir: "inbox/mail".into(),
            drop_dir: "inbox/drop".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerConfig {
    /// Argument template; `{suite}`, `{dir}` and `{out}` are substituted.
    pub command: Vec<String>,
    #[serde(default = "default_report_name")]
    pub report: String,
}

fn default_report_name() -> String {
    "report.json".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransportConfig {
    FileDrop {
        dir: PathBuf,
    },
    Smtp {
        host: String,
        #[serde(default = "default_smtp_port")]
        port: u16,
        username: Option<String>,
        password: Option<String>,
        #[serde(default = "default_smtp_timeout")]
        timeout_s: u64,
        #[serde(default)]
        security: SmtpSecurity,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmtpSecurity {
    /// Plain connection; only for a relay on localhost.
    None,
    #[default]
    Starttls,
    /// TLS from the first byte (usually port 465).
    Tls,
}

fn default_smtp_port() -> u16 {
    587
}
fn default_smtp_timeout() -> u64 {
    30
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatePolicy {
    /// A late graded submission records 0.
    #[default]
    RecordZero,
    RecordActual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policies {
    #[serde(default)]
    pub late: LatePolicy,
    #[serde(default = "default_style_base")]
    pub style_base: u32,
    #[serde(default = "default_stale_age")]
    pub stale_lock_max_age_s: i64,
    /// Attempts at staging a job before it is flagged.
    #[serde(default = "default_stage_attempts")]
    pub max_stage_attempts: u32,
    /// When set, `tick` sends weekly summaries once per boundary.
    pub weekly: Option<WeeklySchedule>,
}

fn default_style_base() -> u32 {
    2
}
fn default_stale_age() -> i64 {
    300
}
fn default_stage_attempts() -> u32 {
    3
}

impl Default for Policies {
    fn default() -> Self {
        Policies {
            late: LatePolicy::default(),
            style_base: default_style_base(),
            stale_lock_max_age_s: default_stale_age(),
            max_stage_attempts: default_stage_attempts(),
            weekly: None,
        }
    }
}

/// Weekly boundary in course-local time, e.g. `{ weekday = "Fri", time = "17:00" }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeeklySchedule {
    pub weekday: String,
    pub time: String,
}

impl WeeklySchedule {
    pub fn parse(&self) -> Result<(Weekday, NaiveTime)> {
        let day: Weekday = self
            .weekday
            .parse()
            .map_err(|_| Error::config(format!("invalid weekday {:?}", self.weekday)))?;
        let time = NaiveTime::parse_from_str(&self.time, "%H:%M")
            .or_else(|_| NaiveTime::parse_from_str(&self.time, "%H:%M:%S"))
            .map_err(|_| Error::config(format!("invalid time {:?}", self.time)))?;
        Ok((day, time))
    }
}

impl CourseConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Value =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        let version = raw.get("schema_version").and_then(|v| v.as_integer());
        if version != Some(CONFIG_SCHEMA_VERSION as i64) {
            return Err(Error::SchemaVersion {
                context: "course config".into(),
                found: version.unwrap_or(0) as u32,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        let cfg: CourseConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.course.trim().is_empty() || self.year.trim().is_empty() {
            return Err(Error::config("course and year must be non-empty"));
        }
        if [&self.course, &self.year].iter().any(|s| s.contains('/') || s.starts_with('.')) {
            return Err(Error::config("course and year are used in file names and may not contain '/'"));
        }
        for (field, addr) in [("contact", &self.contact), ("admin", &self.admin), ("sender", &self.sender)] {
            if !addr.contains('@') {
                return Err(Error::config(format!("{field} is not an address: {addr:?}")));
            }
        }
        self.tz()?;
        self.sandbox.validate()?;
        if self.tick_interval_s == 0 {
            return Err(Error::config("tick_interval_s must be positive"));
        }
        if self.policies.style_base == 0 {
            return Err(Error::config("policies.style_base must be at least 1"));
        }
        if self.policies.stale_lock_max_age_s <= 0 {
            return Err(Error::config("policies.stale_lock_max_age_s must be positive"));
        }
        if let Some(w) = &self.policies.weekly {
            w.parse()?;
        }
        for (id, r) in &self.runners {
            if r.command.is_empty() {
                return Err(Error::config(format!("runner {id} has an empty command")));
            }
        }
        if let Some(d) = &self.default_runner {
            if !self.runners.contains_key(d) {
                return Err(Error::config(format!("default_runner {d:?} is not defined")));
            }
        }
        Ok(())
    }

    pub fn tz(&self) -> Result<Tz> {
        self.timezone
            .parse()
            .map_err(|_| Error::config(format!("unknown timezone {:?}", self.timezone)))
    }

    pub fn stale_lock_max_age(&self) -> chrono::Duration {
        chrono::Duration::seconds(self.policies.stale_lock_max_age_s)
    }
}

/// Resolve a configured path against the pipeline root.
pub fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
course = "ABC"
year = "2014"
contact = "help@example.org"
admin = "admin@example.org"
sender = "abc@example.org"
timezone = "Europe/London"

[transport]
kind = "file_drop"
dir = "outbox"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = CourseConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.tick_interval_s, 60);
        assert_eq!(cfg.sandbox.cpu_seconds, 10);
        assert_eq!(cfg.sandbox.address_space_bytes, 512 * 1024 * 1024);
        assert_eq!(cfg.policies.late, LatePolicy::RecordZero);
        assert_eq!(cfg.policies.stale_lock_max_age_s, 300);
        assert_eq!(cfg.tz().unwrap(), chrono_tz::Europe::London);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[policies]\nlateness = \"x\"\n");
        assert!(CourseConfig::from_toml(&text).is_err());
        let text = MINIMAL.replace("course = ", "colour = \"red\"\ncourse = ");
        assert!(CourseConfig::from_toml(&text).is_err());
    }

    #[test]
    fn schema_version_is_checked() {
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 7");
        assert!(matches!(
            CourseConfig::from_toml(&text),
            Err(Error::SchemaVersion { found: 7, .. })
        ));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(CourseConfig::from_toml(&MINIMAL.replace("Europe/London", "Mars/Base")).is_err());
        let text = format!("{MINIMAL}\n[sandbox]\ncpu_seconds = 0\n");
        assert!(CourseConfig::from_toml(&text).is_err());
        let text = MINIMAL.replace("timezone", "default_runner = \"nope\"\ntimezone");
        assert!(CourseConfig::from_toml(&text).is_err());
    }

    #[test]
    fn weekly_schedule_parses() {
        let w = WeeklySchedule {
            weekday: "Fri".into(),
            time: "17:00".into(),
        };
        assert_eq!(w.parse().unwrap().0, Weekday::Fri);
    }
}
