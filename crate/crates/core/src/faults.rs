//! Crash-point hooks for fault-injection testing.
//!
//! Each hook sits between two durable side effects. When armed, reaching the
//! hook aborts the current pass with [`Error::InjectedCrash`] and no cleanup
//! runs (locks stay behind, staged files stay staged), matching what a killed
//! process leaves on disk. Hooks are one-shot: triggering disarms them.

use std::collections::BTreeSet;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashPoint {
    /// Queue item written to staging, not yet renamed into `items/`.
    QueueStaged,
    /// Raw message archived, nothing else done.
    IngestAfterArchive,
    /// Submission files persisted and the submission journaled.
    IngestAfterRecord,
    /// Test job enqueued; receipt not enqueued, inbox not cleared.
    IngestAfterTestJob,
    /// Runner finished and outputs archived; nothing scored.
    TestAfterRun,
    /// Mark journaled; feedback not enqueued.
    TestAfterMark,
    /// Feedback enqueued; job not removed.
    TestAfterFeedback,
    /// Transport accepted the message; queue item not removed.
    OutboxAfterSend,
}

impl CrashPoint {
    /// The six hooks inside the ingest and testing processors.
    pub const PROCESSOR_POINTS: [CrashPoint; 6] = [
        CrashPoint::IngestAfterArchive,
        CrashPoint::IngestAfterRecord,
        CrashPoint::IngestAfterTestJob,
        CrashPoint::TestAfterRun,
        CrashPoint::TestAfterMark,
        CrashPoint::TestAfterFeedback,
    ];
}

impl FromStr for CrashPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown crash point {s:?}")))
    }
}

#[derive(Debug, Default)]
pub struct Faults {
    armed: Mutex<BTreeSet<CrashPoint>>,
}

impl Faults {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn arm(&self, point: CrashPoint) {
        self.armed.lock().unwrap().insert(point);
    }

    pub fn is_armed(&self, point: CrashPoint) -> bool {
        self.armed.lock().unwrap().contains(&point)
    }

    /// Returns `Err(InjectedCrash)` if `point` is armed, disarming it.
    pub fn hit(&self, point: CrashPoint) -> Result<()> {
        if self.armed.lock().unwrap().remove(&point) {
            log::warn!("injected crash at {point:?}");
            return Err(Error::InjectedCrash(point));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hooks_are_one_shot() {
        let faults = Faults::none();
        faults.arm(CrashPoint::TestAfterMark);
        assert!(faults.hit(CrashPoint::TestAfterRun).is_ok());
        assert!(faults.hit(CrashPoint::TestAfterMark).unwrap_err().is_injected_crash());
        assert!(faults.hit(CrashPoint::TestAfterMark).is_ok());
    }

    #[test]
    fn parses_snake_case_names() {
        assert_eq!(
            "ingest_after_test_job".parse::<CrashPoint>().unwrap(),
            CrashPoint::IngestAfterTestJob
        );
        assert!("nowhere".parse::<CrashPoint>().is_err());
    }
}
