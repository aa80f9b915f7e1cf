//! Durable file-system task queues.
//!
//! On-disk layout of a queue named `name` under the pipeline root:
//!
//! ```text
//! <root>/queues/<name>/staging/<item_id>.json   written first, fsynced
//! <root>/queues/<name>/items/<item_id>.json     atomically renamed in
//! <root>/queues/<name>/flagged/<item_id>.json   held for an administrator
//! <root>/queues/<name>/lock                     create-exclusive lock file
//! ```
//!
//! An item document is
//! `{schema_version, item_id, kind, enqueued_at, attempts, payload}`.
//! Item ids are a zero-padded microsecond timestamp plus six random hex
//! characters, so lexical order is enqueue order.
//!
//! Consumers must hold the queue lock. Producers never need it: enqueue is a
//! rename into `items/`, which is atomic on one file system. A lock that
//! outlives its process is left in place for a human to inspect;
//! [`watchdog_scan`] reports it but never removes it.

use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use chrono::Duration;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::faults::{CrashPoint, Faults};
use crate::model::{now, Timestamp};

pub const ITEM_SCHEMA_VERSION: u32 = 1;

/// Default age after which the watchdog reports a lock.
pub const DEFAULT_STALE_LOCK_AGE: Duration = Duration::minutes(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    TestJob,
    OutboundMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueItem {
    pub schema_version: u32,
    pub item_id: String,
    pub kind: ItemKind,
    pub enqueued_at: Timestamp,
    pub attempts: u32,
    pub payload: serde_json::Value,
}

impl QueueItem {
    pub fn payload_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.payload.clone())
            .map_err(|e| Error::json(format!("payload of item {}", self.item_id), e))
    }
}

/// Contents of a lock file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockInfo {
    pub queue: String,
    pub owner_pid: u32,
    pub acquired_at: Timestamp,
    pub token: String,
}

#[derive(Debug, PartialEq, Eq)]
pub struct LockHandle {
    pub queue_name: String,
    pub acquired_at: Timestamp,
    pub owner_pid: u32,
    pub path: PathBuf,
    token: String,
}

/// Result of looking at the head of a queue.
#[derive(Debug)]
pub enum Next {
    Item(QueueItem),
    /// The file exists but could not be decoded (corrupt, unknown schema).
    Unreadable { item_id: String, error: Error },
}

impl Next {
    pub fn item_id(&self) -> &str {
        match self {
            Next::Item(item) => &item.item_id,
            Next::Unreadable { item_id, .. } => item_id,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Queue {
    name: String,
    dir: PathBuf,
    faults: Arc<Faults>,
}

static LAST_MICROS: AtomicU64 = AtomicU64::new(0);

fn new_item_id() -> String {
    let wall = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or_default();
    // Strictly increasing within this process even if the clock stalls.
    let mut prev = LAST_MICROS.load(Ordering::Relaxed);
    let micros = loop {
        let next = wall.max(prev + 1);
        match LAST_MICROS.compare_exchange(prev, next, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => break next,
            Err(actual) => prev = actual,
        }
    };
    let suffix: u32 = rand::thread_rng().gen_range(0..0x100_0000);
    format!("{micros:020}-{suffix:06x}")
}

fn random_token() -> String {
    format!("{:016x}", rand::thread_rng().gen::<u64>())
}

fn sync_dir(dir: &Path) -> Result<()> {
    File::open(dir).and_then(|f| f.sync_all()).at(dir)
}

/// Write `bytes` to `path` and fsync it. Fails if the file exists.
fn write_new_durable(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .at(path)?;
    f.write_all(bytes).at(path)?;
    f.sync_all().at(path)
}

fn is_item_file(path: &Path) -> Option<String> {
    if path.extension().and_then(|e| e.to_str()) != Some("json") {
        return None;
    }
    path.file_stem().and_then(|s| s.to_str()).map(str::to_string)
}

impl Queue {
    /// Open (creating if needed) the queue `name` under `<root>/queues/`.
    pub fn open(root: &Path, name: &str, faults: Arc<Faults>) -> Result<Self> {
        let dir = root.join("queues").join(name);
        for sub in ["staging", "items", "flagged"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).at(&d)?;
        }
        Ok(Queue {
            name: name.to_string(),
            dir,
            faults,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn lock_path(&self) -> PathBuf {
        self.dir.join("lock")
    }

    fn items_dir(&self) -> PathBuf {
        self.dir.join("items")
    }

    fn item_path(&self, item_id: &str) -> PathBuf {
        self.items_dir().join(format!("{item_id}.json"))
    }

    fn flagged_path(&self, item_id: &str) -> PathBuf {
        self.dir.join("flagged").join(format!("{item_id}.json"))
    }

    /// Durably add an item. The item becomes visible only once complete.
    pub fn enqueue<T: Serialize>(&self, kind: ItemKind, payload: &T) -> Result<String> {
        let payload = serde_json::to_value(payload)
            .map_err(|e| Error::json(format!("payload for queue {}", self.name), e))?;
        let item = QueueItem {
            schema_version: ITEM_SCHEMA_VERSION,
            item_id: new_item_id(),
            kind,
            enqueued_at: now(),
            attempts: 0,
            payload,
        };
        let bytes = serde_json::to_vec_pretty(&item).map_err(|e| Error::json("queue item", e))?;
        let staged = self.dir.join("staging").join(format!("{}.json", item.item_id));
        write_new_durable(&staged, &bytes)?;
        self.faults.hit(CrashPoint::QueueStaged)?;
        let target = self.item_path(&item.item_id);
        fs::rename(&staged, &target).at(&target)?;
        sync_dir(&self.items_dir())?;
        log::debug!("queue {}: enqueued {}", self.name, item.item_id);
        Ok(item.item_id)
    }

    /// Visible item ids in FIFO order.
    pub fn list(&self) -> Result<Vec<String>> {
        list_ids(&self.items_dir())
    }

    pub fn flagged(&self) -> Result<Vec<String>> {
        list_ids(&self.dir.join("flagged"))
    }

    /// Leftovers of enqueues interrupted between staging and rename.
    pub fn orphaned_staging(&self) -> Result<Vec<String>> {
        list_ids(&self.dir.join("staging"))
    }

    pub fn load(&self, item_id: &str) -> Result<QueueItem> {
        read_item(&self.item_path(item_id))
    }

    pub fn load_flagged(&self, item_id: &str) -> Result<QueueItem> {
        read_item(&self.flagged_path(item_id))
    }

    /// All readable items, for inspection. Unreadable files are skipped.
    pub fn items(&self) -> Result<Vec<QueueItem>> {
        Ok(self
            .list()?
            .iter()
            .filter_map(|id| self.load(id).ok())
            .collect())
    }

    /// Head of the queue, without removing it.
    pub fn dequeue_next(&self, lock: &LockHandle) -> Result<Option<Next>> {
        self.dequeue_after(lock, None)
    }

    /// Lowest item with id strictly greater than `after`; lets a processor
    /// walk past items it leaves in place.
    pub fn dequeue_after(&self, lock: &LockHandle, after: Option<&str>) -> Result<Option<Next>> {
        self.check_owner(lock)?;
        let next = self
            .list()?
            .into_iter()
            .find(|id| after.map_or(true, |a| id.as_str() > a));
        Ok(next.map(|item_id| match self.load(&item_id) {
            Ok(item) => Next::Item(item),
            Err(error) => Next::Unreadable { item_id, error },
        }))
    }

    /// Atomically replace an item's document (attempt counters, payload
    /// annotations). The id cannot change.
    pub fn update(&self, lock: &LockHandle, item: &QueueItem) -> Result<()> {
        self.check_owner(lock)?;
        let target = self.item_path(&item.item_id);
        if !target.exists() {
            return Err(Error::contract(format!("update of missing item {}", item.item_id)));
        }
        let bytes = serde_json::to_vec_pretty(item).map_err(|e| Error::json("queue item", e))?;
        let staged = self.dir.join("staging").join(format!("{}.update", item.item_id));
        let _ = fs::remove_file(&staged);
        write_new_durable(&staged, &bytes)?;
        fs::rename(&staged, &target).at(&target)?;
        sync_dir(&self.items_dir())
    }

    /// Delete an item. Removing an already-absent item is a logged no-op.
    pub fn remove(&self, item_id: &str) -> Result<()> {
        let path = self.item_path(item_id);
        match fs::remove_file(&path) {
            Ok(()) => sync_dir(&self.items_dir()),
            Err(e) if e.kind() == ErrorKind::NotFound => {
                log::info!("queue {}: remove of absent item {item_id}", self.name);
                Ok(())
            }
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Move an item aside for an administrator; it stops blocking the queue.
    pub fn flag(&self, lock: &LockHandle, item_id: &str, reason: &str) -> Result<()> {
        self.check_owner(lock)?;
        let from = self.item_path(item_id);
        let to = self.flagged_path(item_id);
        fs::rename(&from, &to).at(&from)?;
        log::warn!("queue {}: flagged {item_id}: {reason}", self.name);
        Ok(())
    }

    /// Return a flagged item to the live queue, keeping its id and position.
    pub fn requeue(&self, item_id: &str) -> Result<()> {
        let from = self.flagged_path(item_id);
        if !from.exists() {
            return Err(Error::contract(format!(
                "no flagged item {item_id} in queue {}",
                self.name
            )));
        }
        let to = self.item_path(item_id);
        fs::rename(&from, &to).at(&from)?;
        sync_dir(&self.items_dir())
    }

    /// Try to take the queue lock. An existing lock yields `None` and a log
    /// line; the caller should skip its pass.
    pub fn acquire_lock(&self) -> Result<Option<LockHandle>> {
        let path = self.lock_path();
        let info = LockInfo {
            queue: self.name.clone(),
            owner_pid: std::process::id(),
            acquired_at: now(),
            token: random_token(),
        };
        let bytes = serde_json::to_vec_pretty(&info).map_err(|e| Error::json("lock", e))?;
        match write_new_durable(&path, &bytes) {
            Ok(()) => Ok(Some(LockHandle {
                queue_name: info.queue,
                acquired_at: info.acquired_at,
                owner_pid: info.owner_pid,
                path,
                token: info.token,
            })),
            Err(Error::Io { source, .. }) if source.kind() == ErrorKind::AlreadyExists => {
                let holder = self
                    .lock_info()
                    .ok()
                    .flatten()
                    .map(|i| format!("pid {} since {}", i.owner_pid, i.acquired_at))
                    .unwrap_or_else(|| "unknown holder".into());
                log::info!("queue {}: lock held ({holder}), not processing", self.name);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    pub fn release_lock(&self, handle: LockHandle) -> Result<()> {
        self.check_owner(&handle)?;
        fs::remove_file(&handle.path).at(&handle.path)?;
        sync_dir(&self.dir)
    }

    /// Delete a lock left behind by a dead processor. Operator action only;
    /// returns whether a lock was present.
    pub fn break_lock(&self) -> Result<bool> {
        let path = self.lock_path();
        match fs::remove_file(&path) {
            Ok(()) => {
                log::warn!("queue {}: lock broken by operator", self.name);
                sync_dir(&self.dir)?;
                Ok(true)
            }
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(false),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn lock_info(&self) -> Result<Option<LockInfo>> {
        let path = self.lock_path();
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| Error::json(path.display().to_string(), e)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn check_owner(&self, lock: &LockHandle) -> Result<()> {
        if lock.queue_name != self.name {
            return Err(Error::contract(format!(
                "lock for queue {} used on queue {}",
                lock.queue_name, self.name
            )));
        }
        match self.lock_info() {
            Ok(Some(info)) if info.token == lock.token => Ok(()),
            _ => Err(Error::contract(format!(
                "caller does not hold the lock of queue {}",
                self.name
            ))),
        }
    }
}

fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| is_item_file(&e.path()))
        .collect();
    ids.sort();
    Ok(ids)
}

fn read_item(path: &Path) -> Result<QueueItem> {
    let bytes = fs::read(path).at(path)?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
    let version = raw.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(ITEM_SCHEMA_VERSION as u64) {
        return Err(Error::SchemaVersion {
            context: path.display().to_string(),
            found: version.unwrap_or(0) as u32,
            expected: ITEM_SCHEMA_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::json(path.display().to_string(), e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StaleLockAlert {
    pub queue: String,
    pub lock_path: PathBuf,
    pub owner_pid: Option<u32>,
    pub age_seconds: i64,
}

/// One alert per lock older than `max_age` at `now`. The lock's recorded
/// acquisition time is used; the file mtime is the fallback when the lock
/// document cannot be read.
pub fn watchdog_scan(queues: &[&Queue], max_age: Duration, now: Timestamp) -> Vec<StaleLockAlert> {
    let mut alerts = Vec::new();
    for q in queues {
        let path = q.lock_path();
        let (acquired, pid) = match q.lock_info() {
            Ok(Some(info)) => (info.acquired_at, Some(info.owner_pid)),
            Ok(None) => continue,
            Err(_) => match fs::metadata(&path).and_then(|m| m.modified()) {
                Ok(mtime) => (Timestamp::from(mtime), None),
                Err(_) => continue,
            },
        };
        let age = now - acquired;
        if age > max_age {
            alerts.push(StaleLockAlert {
                queue: q.name.clone(),
                lock_path: path,
                owner_pid: pid,
                age_seconds: age.num_seconds(),
            });
        }
    }
    alerts
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn queue(root: &Path) -> Queue {
        Queue::open(root, "testing", Arc::new(Faults::none())).unwrap()
    }

    #[test]
    fn enqueue_then_list() {
        let tmp = tempfile::tempdir().unwrap();
        let q = queue(tmp.path());
        let id = q.enqueue(ItemKind::TestJob, &json!({"a": 1})).unwrap();
        assert_eq!(q.list().unwrap(), vec![id.clone()]);
        assert_eq!(q.load(&id).unwrap().payload, json!({"a": 1}));
        assert!(tmp.path().join(format!("queues/testing/items/{id}.json")).exists());
    }

    #[test]
    fn fifo_by_id() {
        let tmp = tempfile::tempdir().unwrap();
        let q = queue(tmp.path());
        let ids: Vec<_> = (0..20)
            .map(|i| q.enqueue(ItemKind::TestJob, &json!(i)).unwrap())
            .collect();
        assert_eq!(q.list().unwrap(), ids);
        let lock = q.acquire_lock().unwrap().unwrap();
        let mut seen = Vec::new();
        while let Some(Next::Item(item)) = q.dequeue_next(&lock).unwrap() {
            seen.push(item.payload.as_i64().unwrap());
            q.remove(&item.item_id).unwrap();
        }
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn crash_between_staging_and_rename_leaves_nothing_visible() {
        let tmp = tempfile::tempdir().unwrap();
        let faults = Arc::new(Faults::none());
        let q = Queue::open(tmp.path(), "testing", faults.clone()).unwrap();
        faults.arm(CrashPoint::QueueStaged);
        let err = q.enqueue(ItemKind::TestJob, &json!(1)).unwrap_err();
        assert!(err.is_injected_crash());
        assert!(q.list().unwrap().is_empty());
        assert_eq!(q.orphaned_staging().unwrap().len(), 1);
    }

    #[test]
    fn dequeue_requires_lock_ownership() {
        let tmp = tempfile::tempdir().unwrap();
        let q = queue(tmp.path());
        let other = Queue::open(tmp.path(), "outgoing", Arc::new(Faults::none())).unwrap();
        q.enqueue(ItemKind::TestJob, &json!(1)).unwrap();
        let foreign = other.acquire_lock().unwrap().unwrap();
        assert!(matches!(q.dequeue_next(&foreign), Err(Error::ContractViolation(_))));

        let lock = q.acquire_lock().unwrap().unwrap();
        assert!(q.dequeue_next(&lock).unwrap().is_some());
        // A lock file replaced behind our back is no longer ours.
        fs::remove_file(q.lock_path()).unwrap();
        let _thief = q.acquire_lock().unwrap().unwrap();
        assert!(matches!(q.dequeue_next(&lock), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn empty_queue_dequeues_none() {
        let tmp = tempfile::tempdir().unwrap();
        let q = queue(tmp.path());
        let lock = q.acquire_lock().unwrap().unwrap();
        assert!(q.dequeue_next(&lock).unwrap().is_none());
    }

    #[test]
    fn lock_is_exclusive_and_reacquirable() {
        let tmp = tempfile::tempdir().unwrap();
        let q = queue(tmp.path());
        let lock = q.acquire_lock().unwrap().unwrap();
        assert!(q.acquire_lock().unwrap().is_none());
        let info = q.lock_info().unwrap().unwrap();
        assert_eq!(info.owner_pid, std::process::id());
        q.release_lock(lock).unwrap();
        let again = q.acquire_lock().unwrap();
        assert!(again.is_some());
    }

    #[test]
    fn abandoned_lock_blocks_next_acquire() {
        let tmp = tempfile::tempdir().unwrap();
        let q = queue(tmp.path());
        let lock = q.acquire_lock().unwrap().unwrap();
        std::mem::forget(lock);
        assert!(q.acquire_lock().unwrap().is_none());
    }

    #[test]
    fn releasing_a_lock_not_held_is_a_contract_violation() {
        let tmp = tempfile::tempdir().unwrap();
        let q = queue(tmp.path());
        let lock = q.acquire_lock().unwrap().unwrap();
        fs::remove_file(q.lock_path()).unwrap();
        assert!(matches!(q.release_lock(lock), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn remove_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let q = queue(tmp.path());
        let id = q.enqueue(ItemKind::TestJob, &json!(1)).unwrap();
        q.remove(&id).unwrap();
        q.remove(&id).unwrap();
        assert!(q.list().unwrap().is_empty());
    }

    #[test]
    fn unknown_schema_version_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let q = queue(tmp.path());
        let id = q.enqueue(ItemKind::TestJob, &json!(1)).unwrap();
        let path = q.item_path(&id);
        let mut doc: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        doc["schema_version"] = json!(99);
        fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
        assert!(matches!(q.load(&id), Err(Error::SchemaVersion { found: 99, .. })));
        let lock = q.acquire_lock().unwrap().unwrap();
        assert!(matches!(q.dequeue_next(&lock).unwrap(), Some(Next::Unreadable { .. })));
    }

    #[test]
    fn flag_and_requeue_keep_position() {
        let tmp = tempfile::tempdir().unwrap();
        let q = queue(tmp.path());
        let a = q.enqueue(ItemKind::TestJob, &json!("a")).unwrap();
        let b = q.enqueue(ItemKind::TestJob, &json!("b")).unwrap();
        let lock = q.acquire_lock().unwrap().unwrap();
        q.flag(&lock, &a, "test").unwrap();
        assert_eq!(q.list().unwrap(), vec![b.clone()]);
        assert_eq!(q.flagged().unwrap(), vec![a.clone()]);
        q.requeue(&a).unwrap();
        assert_eq!(q.list().unwrap(), vec![a, b]);
        assert!(q.requeue("nope").is_err());
    }

    #[test]
    fn update_rewrites_in_place() {
        let tmp = tempfile::tempdir().unwrap();
        let q = queue(tmp.path());
        let id = q.enqueue(ItemKind::OutboundMessage, &json!({})).unwrap();
        let lock = q.acquire_lock().unwrap().unwrap();
        let mut item = q.load(&id).unwrap();
        item.attempts += 1;
        q.update(&lock, &item).unwrap();
        assert_eq!(q.load(&id).unwrap().attempts, 1);
        assert!(q.orphaned_staging().unwrap().is_empty());
    }

    fn backdate(q: &Queue, by: Duration) {
        let mut info = q.lock_info().unwrap().unwrap();
        info.acquired_at = info.acquired_at - by;
        fs::write(q.lock_path(), serde_json::to_vec(&info).unwrap()).unwrap();
    }

    #[test]
    fn watchdog_reports_only_stale_locks() {
        let tmp = tempfile::tempdir().unwrap();
        let a = Queue::open(tmp.path(), "incoming", Arc::new(Faults::none())).unwrap();
        let b = Queue::open(tmp.path(), "testing", Arc::new(Faults::none())).unwrap();
        let c = Queue::open(tmp.path(), "outgoing", Arc::new(Faults::none())).unwrap();
        let qs = [&a, &b, &c];
        assert!(watchdog_scan(&qs, DEFAULT_STALE_LOCK_AGE, now()).is_empty());

        std::mem::forget(a.acquire_lock().unwrap().unwrap());
        assert!(watchdog_scan(&qs, DEFAULT_STALE_LOCK_AGE, now()).is_empty());

        backdate(&a, Duration::minutes(6));
        let alerts = watchdog_scan(&qs, DEFAULT_STALE_LOCK_AGE, now());
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].queue, "incoming");
        assert!(alerts[0].age_seconds >= 360);

        std::mem::forget(b.acquire_lock().unwrap().unwrap());
        let later = now() + Duration::minutes(10);
        assert_eq!(watchdog_scan(&qs, DEFAULT_STALE_LOCK_AGE, later).len(), 2);
    }
}
