//! Data types shared by every processor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SubsecRound, Utc};
use num_rational::Ratio;
use num_traits::Zero;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Timestamp = DateTime<Utc>;

/// Current time truncated to whole seconds, the precision everything is
/// stored at.
pub fn now() -> Timestamp {
    Utc::now().trunc_subsecs(0)
}

/// Exact non-negative rational used for question weights and points.
///
/// Serialized as a string: `"3"`, `"1/2"`. Parsing also accepts finite
/// decimals such as `"1.5"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Points(pub Ratio<u64>);

impl Points {
    pub fn new(numer: u64, denom: u64) -> Self {
        Points(Ratio::new(numer, denom))
    }

    pub fn integer(n: u64) -> Self {
        Points(Ratio::from_integer(n))
    }

    pub fn zero() -> Self {
        Points(Ratio::zero())
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl fmt::Display for Points {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl FromStr for Points {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::config(format!("invalid rational {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let n: u64 = n.trim().parse().map_err(|_| bad())?;
            let d: u64 = d.trim().parse().map_err(|_| bad())?;
            if d == 0 {
                return Err(bad());
            }
            return Ok(Points::new(n, d));
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.is_empty() || frac.len() > 9 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
            let denom = 10u64.pow(frac.len() as u32);
            let frac: u64 = frac.parse().map_err(|_| bad())?;
            let numer = int
                .checked_mul(denom)
                .and_then(|v| v.checked_add(frac))
                .ok_or_else(bad)?;
            return Ok(Points::new(numer, denom));
        }
        s.parse::<u64>().map(Points::integer).map_err(|_| bad())
    }
}

impl Serialize for Points {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Points {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Int(n) => Ok(Points::integer(n)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Deadline group a student belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    S,
    M,
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "S" | "s" => Ok(Site::S),
            "M" | "m" => Ok(Site::M),
            other => Err(Error::config(format!("unknown site {other:?} (expected S or M)"))),
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Site::S => "S",
            Site::M => "M",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Student {
    pub student_id: String,
    pub display_name: String,
    /// Lower-cased addresses.
    pub email_addresses: BTreeSet<String>,
    pub site: Site,
}

impl Student {
    /// Address used for outgoing mail: the first in sort order.
    pub fn primary_address(&self) -> &str {
        self.email_addresses
            .iter()
            .next()
            .map(String::as_str)
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub name: String,
    pub weight: Points,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentKind {
    Training,
    Laboratory,
    Exam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum StylePolicy {
    Off,
    Penalize { base: u32 },
}

impl Default for StylePolicy {
    fn default() -> Self {
        StylePolicy::Off
    }
}

/// One exercise set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentSpec {
    /// Canonical subject token, lower-case with single spaces (`"lab 4"`).
    pub subject_key: String,
    pub kind: AssignmentKind,
    pub required_files: Vec<String>,
    pub deadlines: BTreeMap<Site, Timestamp>,
    pub questions: Vec<Question>,
    /// `None` puts the assignment in receive-only mode: submissions are
    /// logged and acknowledged but never tested.
    pub suite_id: Option<String>,
    /// Runner override; the course default runner is used when absent.
    pub runner: Option<String>,
    pub style_policy: StylePolicy,
    /// Scheduled lab sessions, used only for plot annotations.
    pub sessions: Vec<Timestamp>,
}

impl AssignmentSpec {
    pub fn deadline_for(&self, site: Site) -> Option<Timestamp> {
        self.deadlines.get(&site).copied()
    }

    pub fn is_receive_only(&self) -> bool {
        self.suite_id.is_none()
    }
}

/// Collapse whitespace and lower-case, the normal form of subject lines.
pub fn normalize_subject(subject: &str) -> String {
    subject
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmittedFile {
    pub filename: String,
    /// Hex SHA-256 of the content.
    pub digest: String,
    pub archived_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SubmissionStatus {
    Accepted,
    Rejected { reason: String },
    Tested,
    InvalidSyntax,
    EncodingUndeclared,
    Killed { resource: String },
    /// Runner malfunction; held for an administrator.
    Flagged { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub submission_id: String,
    pub student_id: String,
    pub assignment_key: String,
    pub received_at: Timestamp,
    pub files: Vec<SubmittedFile>,
    pub attempt: u32,
    pub status: SubmissionStatus,
    /// Digest over all attachments, part of the ingest dedup key.
    pub content_digest: String,
    pub sender: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Ok,
    SyntaxError,
    ResourceKilled,
    EncodingUndeclared,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionResult {
    pub name: String,
    pub passed: bool,
    #[serde(default)]
    pub traceback: String,
}

/// Outcome of one sandbox run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub status: ReportStatus,
    pub questions: Vec<QuestionResult>,
    pub style_error_count: u32,
    pub duration_s: f64,
    /// Interpreter error text for syntax errors, the killing resource for
    /// abnormal terminations, the offending file for encoding failures.
    pub detail: Option<String>,
}

impl TestReport {
    pub fn killed(resource: impl Into<String>, duration_s: f64) -> Self {
        TestReport {
            status: ReportStatus::ResourceKilled,
            questions: Vec::new(),
            style_error_count: 0,
            duration_s,
            detail: Some(resource.into()),
        }
    }

    pub fn encoding_undeclared(filename: impl Into<String>) -> Self {
        TestReport {
            status: ReportStatus::EncodingUndeclared,
            questions: Vec::new(),
            style_error_count: 0,
            duration_s: 0.0,
            detail: Some(filename.into()),
        }
    }

    /// `passed = true` must come with an empty traceback.
    pub fn check_invariants(&self) -> Result<()> {
        if let Some(q) = self.questions.iter().find(|q| q.passed && !q.traceback.is_empty()) {
            return Err(Error::Report(format!(
                "question {} passed but carries a traceback",
                q.name
            )));
        }
        if !self.duration_s.is_finite() || self.duration_s < 0.0 {
            return Err(Error::Report(format!("invalid duration_s {}", self.duration_s)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkRecord {
    pub submission_id: String,
    pub student_id: String,
    pub assignment_key: String,
    pub attempt: u32,
    pub points: Points,
    pub total: Points,
    /// After the style penalty.
    pub percent: u32,
    pub style_error_count: u32,
    pub late: bool,
    pub recorded_for_grade: bool,
    /// Grade that counts, set only when `recorded_for_grade`; differs from
    /// `percent` when a late policy applies.
    pub recorded_percent: Option<u32>,
}
