//! Assignment manifest (`manifest.toml`).
//!
//! ```toml
//! schema_version = 1
//!
//! [[assignment]]
//! subject = "Lab 4"                 # matched case-insensitively
//! kind = "laboratory"               # training | laboratory | exam
//! required_files = ["lab4.py"]
//! suite = "lab4"                    # omit for receive-only mode
//! runner = "pytest"                 # optional, course default otherwise
//! style = "penalize"                # off | penalize (default off)
//! penalty_base = 2                  # default: policies.style_base
//! deadlines = { S = "2014-11-14 16:00:00", M = "2014-11-14 09:00:00" }
//! sessions = ["2014-11-13 10:00:00"]
//!
//! [[assignment.question]]
//! name = "test_distance"
//! weight = 1                        # integer, "1/2" or "0.5"
//! ```
//!
//! Local timestamps are read in the course time zone; RFC 3339 strings with
//! an explicit offset are also accepted.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};
use chrono_tz::Tz;
use serde::Deserialize;

use crate::error::{Error, IoContext, Result};
use crate::model::{
    normalize_subject, AssignmentKind, AssignmentSpec, Question, Site, StylePolicy, Timestamp,
};
use crate::roster::Roster;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    schema_version: u32,
    #[serde(default, rename = "assignment")]
    assignments: Vec<RawAssignment>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAssignment {
    subject: String,
    kind: AssignmentKind,
    required_files: Vec<String>,
    suite: Option<String>,
    runner: Option<String>,
    #[serde(default)]
    style: RawStyle,
    penalty_base: Option<u32>,
    #[serde(default)]
    deadlines: BTreeMap<Site, String>,
    #[serde(default)]
    sessions: Vec<String>,
    #[serde(default, rename = "question")]
    questions: Vec<Question>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawStyle {
    #[default]
    Off,
    Penalize,
}

/// Parse a manifest timestamp: `YYYY-MM-DD HH:MM[:SS]` local, or RFC 3339.
pub fn parse_local_timestamp(s: &str, tz: Tz) -> Result<Timestamp> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.with_timezone(&Utc));
    }
    let naive = NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M"))
        .map_err(|_| Error::config(format!("invalid timestamp {s:?}")))?;
    tz.from_local_datetime(&naive)
        .earliest()
        .map(|dt| dt.with_timezone(&Utc))
        .ok_or_else(|| Error::config(format!("timestamp {s:?} does not exist in {tz}")))
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    assignments: Vec<AssignmentSpec>,
}

impl Manifest {
    pub fn load(path: &Path, tz: Tz, default_style_base: u32) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::from_toml(&text, tz, default_style_base)
    }

    pub fn from_toml(text: &str, tz: Tz, default_style_base: u32) -> Result<Self> {
        let raw: RawManifest =
            toml::from_str(text).map_err(|e| Error::config(format!("manifest: {e}")))?;
        if raw.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                context: "assignment manifest".into(),
                found: raw.schema_version,
                expected: MANIFEST_SCHEMA_VERSION,
            });
        }
        let mut assignments = Vec::new();
        for a in raw.assignments {
            let deadlines = a
                .deadlines
                .iter()
                .map(|(site, s)| Ok((*site, parse_local_timestamp(s, tz)?)))
                .collect::<Result<_>>()?;
            let sessions = a
                .sessions
                .iter()
                .map(|s| parse_local_timestamp(s, tz))
                .collect::<Result<_>>()?;
            let style_policy = match a.style {
                RawStyle::Off => StylePolicy::Off,
                RawStyle::Penalize => StylePolicy::Penalize {
                    base: a.penalty_base.unwrap_or(default_style_base),
                },
            };
            assignments.push(AssignmentSpec {
                subject_key: normalize_subject(&a.subject),
                kind: a.kind,
                required_files: a.required_files.iter().map(|f| f.trim().to_string()).collect(),
                deadlines,
                questions: a.questions,
                suite_id: a.suite,
                runner: a.runner,
                style_policy,
                sessions,
            });
        }
        let m = Manifest { assignments };
        m.validate()?;
        Ok(m)
    }

    pub fn from_specs(assignments: Vec<AssignmentSpec>) -> Result<Self> {
        let m = Manifest { assignments };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut keys = HashSet::new();
        for a in &self.assignments {
            if a.subject_key.is_empty() {
                return Err(Error::config("assignment with empty subject"));
            }
            if !keys.insert(&a.subject_key) {
                return Err(Error::config(format!("duplicate assignment {:?}", a.subject_key)));
            }
            if a.required_files.is_empty() || a.required_files.iter().any(|f| f.is_empty()) {
                return Err(Error::config(format!("{}: required_files must be non-empty", a.subject_key)));
            }
            if a.required_files.iter().any(|f| f.contains('/') || f == ".." || f == ".") {
                return Err(Error::config(format!("{}: required file names must be plain names", a.subject_key)));
            }
            if !a.is_receive_only() && a.questions.is_empty() {
                return Err(Error::config(format!("{}: a tested assignment needs questions", a.subject_key)));
            }
            let mut names = HashSet::new();
            for q in &a.questions {
                if q.weight.is_zero() {
                    return Err(Error::config(format!("{}: question {} has zero weight", a.subject_key, q.name)));
                }
                if !names.insert(&q.name) {
                    return Err(Error::config(format!("{}: duplicate question {}", a.subject_key, q.name)));
                }
            }
            if let StylePolicy::Penalize { base: 0 } = a.style_policy {
                return Err(Error::config(format!("{}: penalty_base must be at least 1", a.subject_key)));
            }
        }
        Ok(())
    }

    /// Cross-check against the roster: laboratories need a deadline for
    /// every site that has students.
    pub fn validate_against(&self, roster: &Roster) -> Result<()> {
        for a in self.assignments.iter().filter(|a| a.kind == AssignmentKind::Laboratory) {
            for site in roster.sites() {
                if a.deadline_for(site).is_none() {
                    return Err(Error::config(format!(
                        "laboratory {:?} has no deadline for site {site}",
                        a.subject_key
                    )));
                }
            }
        }
        Ok(())
    }

    /// Look up by subject line, case-insensitive with whitespace collapsed.
    pub fn by_subject(&self, subject: &str) -> Option<&AssignmentSpec> {
        let key = normalize_subject(subject);
        self.assignments.iter().find(|a| a.subject_key == key)
    }

    pub fn get(&self, key: &str) -> Option<&AssignmentSpec> {
        self.assignments.iter().find(|a| a.subject_key == key)
    }

    pub fn assignments(&self) -> &[AssignmentSpec] {
        &self.assignments
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Points;

    const TEXT: &str = r#"
schema_version = 1

[[assignment]]
subject = "Training  1"
kind = "training"
required_files = ["training1.py"]
suite = "training1"

[[assignment.question]]
name = "test_distance"
weight = 1

[[assignment.question]]
name = "test_pyramid_volume"
weight = "1/2"

[[assignment]]
subject = "lab 4"
kind = "laboratory"
required_files = ["lab4.py"]
suite = "lab4"
style = "penalize"
deadlines = { S = "2014-11-14 16:00:00", M = "2014-11-14T09:00:00+08:00" }

[[assignment.question]]
name = "test_a"
weight = 1
"#;

    #[test]
    fn loads_and_normalizes() {
        let m = Manifest::from_toml(TEXT, chrono_tz::Europe::London, 2).unwrap();
        let t = m.by_subject("TRAINING 1").unwrap();
        assert_eq!(t.subject_key, "training 1");
        assert_eq!(t.questions[1].weight, Points::new(1, 2));
        let lab = m.by_subject(" Lab   4 ").unwrap();
        assert_eq!(lab.style_policy, StylePolicy::Penalize { base: 2 });
        // November: London is UTC+0.
        assert_eq!(
            lab.deadline_for(Site::S).unwrap(),
            Utc.with_ymd_and_hms(2014, 11, 14, 16, 0, 0).unwrap()
        );
        assert_eq!(
            lab.deadline_for(Site::M).unwrap(),
            Utc.with_ymd_and_hms(2014, 11, 14, 1, 0, 0).unwrap()
        );
        assert!(m.by_subject("lab 99").is_none());
    }

    #[test]
    fn laboratory_needs_deadline_for_each_site() {
        let m = Manifest::from_toml(
            &TEXT.replace(", M = \"2014-11-14T09:00:00+08:00\"", ""),
            chrono_tz::UTC,
            2,
        )
        .unwrap();
        let roster = Roster::from_csv("student_id,name,site,addresses\na,A,S,a@x\nb,B,M,b@x\n").unwrap();
        assert!(m.validate_against(&roster).is_err());
        let s_only = Roster::from_csv("student_id,name,site,addresses\na,A,S,a@x\n").unwrap();
        assert!(m.validate_against(&s_only).is_ok());
    }

    #[test]
    fn rejects_bad_manifests() {
        let dup = format!("{TEXT}\n[[assignment]]\nsubject = \"LAB 4\"\nkind = \"training\"\nrequired_files = [\"x.py\"]\n");
        assert!(Manifest::from_toml(&dup, chrono_tz::UTC, 2).is_err());
        assert!(Manifest::from_toml(&TEXT.replace("weight = \"1/2\"", "weight = 0"), chrono_tz::UTC, 2).is_err());
        assert!(Manifest::from_toml(&TEXT.replace("schema_version = 1", "schema_version = 2"), chrono_tz::UTC, 2).is_err());
        assert!(Manifest::from_toml(&TEXT.replace("test_pyramid_volume", "test_distance"), chrono_tz::UTC, 2).is_err());
    }

    #[test]
    fn receive_only_needs_no_questions() {
        let text = "schema_version = 1\n[[assignment]]\nsubject = \"exam\"\nkind = \"exam\"\nrequired_files = [\"exam.py\"]\n";
        let m = Manifest::from_toml(text, chrono_tz::UTC, 2).unwrap();
        assert!(m.get("exam").unwrap().is_receive_only());
    }
}
