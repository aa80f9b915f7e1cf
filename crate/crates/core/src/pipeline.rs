//! The scheduler pass: ingest, testing, delivery and the stale-lock
//! watchdog, each once, each under its own queue lock.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::course::Course;
use crate::error::Result;
use crate::fsqueue::{watchdog_scan, StaleLockAlert};
use crate::ingest::{process_incoming, IngestSummary};
use crate::model::{now, Timestamp};
use crate::outbox::{deliver_pending, DeliverySummary, Transport};
use crate::reporting::{send_weekly, weekly_boundary};
use crate::testexec::{process_testing_queue, TestSummary};

#[derive(Debug, Clone, Default, Serialize)]
pub struct TickSummary {
    pub ingest: Option<IngestSummary>,
    pub testing: Option<TestSummary>,
    pub outbox: Option<DeliverySummary>,
    pub stale_locks: Vec<StaleLockAlert>,
    pub weekly_summaries: usize,
    /// Stages that failed with an error, as `stage: message`.
    pub errors: Vec<String>,
}

impl TickSummary {
    pub fn is_idle(&self) -> bool {
        let ingest = self.ingest.as_ref().is_none_or(|s| s.polled == 0);
        let testing = self.testing.as_ref().is_none_or(|s| s.processed == 0);
        let outbox = self
            .outbox
            .as_ref()
            .is_none_or(|s| s.sent == 0 && s.rejected == 0 && s.flagged == 0);
        ingest && testing && outbox && self.stale_locks.is_empty() && self.errors.is_empty()
    }
}

fn stage<T>(name: &str, errors: &mut Vec<String>, result: Result<T>) -> Result<Option<T>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_injected_crash() => Err(e),
        Err(e) => {
            log::error!("{name}: {e}");
            errors.push(format!("{name}: {e}"));
            Ok(None)
        }
    }
}

/// Raise one admin alert for each lock older than the configured age.
pub fn run_watchdog(course: &Course, at: Timestamp) -> Result<Vec<StaleLockAlert>> {
    let alerts = watchdog_scan(&course.queues(), course.config.stale_lock_max_age(), at);
    for a in &alerts {
        let pid = a.owner_pid.map_or_else(|| "unknown".to_string(), |p| p.to_string());
        course.alert(
            &format!("stale lock on queue {}", a.queue),
            &format!(
                "The lock {} has been held for {} s by process {pid}.\n\n\
                 If that process is gone, remove the lock with: gradepipe queue unlock {}",
                a.lock_path.display(),
                a.age_seconds,
                a.queue
            ),
        )?;
    }
    Ok(alerts)
}

/// One scheduler pass at the current time.
pub fn tick(course: &Course, transport: &mut dyn Transport) -> Result<TickSummary> {
    tick_at(course, transport, now())
}

/// One scheduler pass; `at` drives the watchdog and weekly summaries.
pub fn tick_at(course: &Course, transport: &mut dyn Transport, at: Timestamp) -> Result<TickSummary> {
    let mut s = TickSummary::default();
    s.ingest = stage("ingest", &mut s.errors, process_incoming(course))?;
    s.testing = stage("testing", &mut s.errors, process_testing_queue(course))?;
    if let Some(boundary) = stage("weekly", &mut s.errors, weekly_boundary(course, at))?.flatten() {
        let sent = course.store().and_then(|mut store| send_weekly(course, &mut store, boundary));
        s.weekly_summaries = stage("weekly", &mut s.errors, sent)?.unwrap_or(0);
    }
    let delivered = deliver_pending(&course.outgoing, transport, &course.config.sender, &course.faults);
    s.outbox = stage("outbox", &mut s.errors, delivered)?;
    s.stale_locks = stage("watchdog", &mut s.errors, run_watchdog(course, at))?.unwrap_or_default();
    Ok(s)
}

/// Tick every `interval` until `stop` is set. A pass that overruns the
/// interval is followed immediately by the next one.
pub fn serve(course: &Course, transport: &mut dyn Transport, interval: Duration, stop: &AtomicBool) -> Result<()> {
    while !stop.load(Ordering::SeqCst) {
        let started = Instant::now();
        let summary = tick(course, transport)?;
        if !summary.is_idle() {
            log::info!("tick: {}", serde_json::to_string(&summary).unwrap_or_default());
        }
        while started.elapsed() < interval && !stop.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(100).min(interval));
        }
    }
    Ok(())
}
