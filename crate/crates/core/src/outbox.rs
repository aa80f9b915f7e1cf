//! Outgoing messages: the durable outbound queue and the transports that
//! drain it.
//!
//! Each queued item is an [`OutboundMessage`]. A delivery pass sends items
//! oldest first and removes each one only after the transport accepted it.
//! When the transport is down the pass stops after one log line and every
//! message stays queued for the next tick.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::config::{SmtpSecurity, TransportConfig};
use crate::error::{Error, Result};
use crate::faults::{CrashPoint, Faults};
use crate::fsqueue::{ItemKind, LockHandle, Next, Queue, QueueItem};
use crate::model::{now, Timestamp};

pub const OUTGOING_QUEUE: &str = "outgoing";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageCategory {
    Receipt,
    Rejection,
    Feedback,
    Invite,
    WeeklySummary,
    Reminder,
    AdminAlert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboundMessage {
    pub to: Vec<String>,
    pub subject: String,
    pub body: String,
    pub category: MessageCategory,
    pub created_at: Timestamp,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default)]
    pub last_error: Option<String>,
    /// Submission or event this message belongs to.
    #[serde(default)]
    pub ref_id: Option<String>,
}

impl OutboundMessage {
    pub fn new(
        to: impl IntoIterator<Item = impl Into<String>>,
        subject: impl Into<String>,
        body: impl Into<String>,
        category: MessageCategory,
    ) -> Self {
        OutboundMessage {
            to: to.into_iter().map(Into::into).collect(),
            subject: subject.into(),
            body: body.into(),
            category,
            created_at: now(),
            attempts: 0,
            last_error: None,
            ref_id: None,
        }
    }

    pub fn with_ref(mut self, id: impl Into<String>) -> Self {
        self.ref_id = Some(id.into());
        self
    }
}

/// Put a message on the outgoing queue.
pub fn enqueue_message(queue: &Queue, msg: &OutboundMessage) -> Result<String> {
    if msg.to.is_empty() {
        return Err(Error::contract("outbound message without recipients"));
    }
    queue.enqueue(ItemKind::OutboundMessage, msg)
}

#[derive(Debug, thiserror::Error)]
pub enum SendError {
    /// The service cannot be reached or asked us to come back later.
    #[error("transport unavailable: {0}")]
    Unavailable(String),
    /// This particular message was refused.
    #[error("message rejected: {0}")]
    Rejected(String),
}

pub trait Transport {
    fn send(&mut self, item_id: &str, from: &str, msg: &OutboundMessage) -> Result<(), SendError>;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send(&mut self, item_id: &str, from: &str, msg: &OutboundMessage) -> Result<(), SendError> {
        (**self).send(item_id, from, msg)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, item_id: &str, from: &str, msg: &OutboundMessage) -> Result<(), SendError> {
        (**self).send(item_id, from, msg)
    }
}

/// Writes each message to `<dir>/<item_id>.eml`.
#[derive(Debug, Clone)]
pub struct FileDropTransport {
    dir: PathBuf,
}

impl FileDropTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FileDropTransport { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

/// The `.eml` text written by [`FileDropTransport`].
pub fn format_eml(item_id: &str, from: &str, msg: &OutboundMessage) -> String {
    format!(
        "From: {from}\nTo: {}\nSubject: {}\nDate: {}\nX-Gradepipe-Category: {}\nX-Gradepipe-Item: {item_id}\n\n{}",
        msg.to.join(", "),
        msg.subject,
        msg.created_at.to_rfc2822(),
        serde_json::to_value(msg.category)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        msg.body
    )
}

impl Transport for FileDropTransport {
    fn send(&mut self, item_id: &str, from: &str, msg: &OutboundMessage) -> Result<(), SendError> {
        let unavailable = |e: std::io::Error| SendError::Unavailable(format!("{}: {e}", self.dir.display()));
        fs::create_dir_all(&self.dir).map_err(unavailable)?;
        let tmp = self.dir.join(format!(".{item_id}.eml.tmp"));
        let target = self.dir.join(format!("{item_id}.eml"));
        let mut f = fs::File::create(&tmp).map_err(unavailable)?;
        f.write_all(format_eml(item_id, from, msg).as_bytes())
            .and_then(|_| f.sync_all())
            .map_err(unavailable)?;
        fs::rename(&tmp, &target).map_err(unavailable)
    }
}

/// SMTP submission through `lettre`.
pub struct SmtpTransport {
    inner: lettre::SmtpTransport,
}

impl SmtpTransport {
    pub fn new(
        host: &str,
        port: u16,
        security: SmtpSecurity,
        credentials: Option<(String, String)>,
        timeout: Duration,
    ) -> Result<Self> {
        use lettre::transport::smtp::authentication::Credentials;
        let tls_err = |e: lettre::transport::smtp::Error| Error::config(format!("smtp {host}: {e}"));
        let mut builder = match security {
            SmtpSecurity::None => lettre::SmtpTransport::builder_dangerous(host),
            SmtpSecurity::Starttls => lettre::SmtpTransport::starttls_relay(host).map_err(tls_err)?,
            SmtpSecurity::Tls => lettre::SmtpTransport::relay(host).map_err(tls_err)?,
        }
        .port(port)
        .timeout(Some(timeout));
        if let Some((user, pass)) = credentials {
            builder = builder.credentials(Credentials::new(user, pass));
        }
        Ok(SmtpTransport {
            inner: builder.build(),
        })
    }
}

impl Transport for SmtpTransport {
    fn send(&mut self, _item_id: &str, from: &str, msg: &OutboundMessage) -> Result<(), SendError> {
        use lettre::message::header::ContentType;
        use lettre::Transport as _;
        let bad = |what: &str, e: &dyn std::fmt::Display| SendError::Rejected(format!("{what}: {e}"));
        let mut builder = lettre::Message::builder()
            .from(from.parse().map_err(|e| bad("sender", &e))?)
            .subject(msg.subject.clone())
            .date(msg.created_at.into())
            .header(ContentType::TEXT_PLAIN);
        for to in &msg.to {
            builder = builder.to(to.parse().map_err(|e| bad("recipient", &e))?);
        }
        let email = builder.body(msg.body.clone()).map_err(|e| bad("message", &e))?;
        match self.inner.send(&email) {
            Ok(_) => Ok(()),
            Err(e) if e.is_permanent() => Err(SendError::Rejected(e.to_string())),
            Err(e) => Err(SendError::Unavailable(e.to_string())),
        }
    }
}

/// Build the transport named in the course configuration.
pub fn transport_from_config(cfg: &TransportConfig, root: &Path) -> Result<Box<dyn Transport>> {
    Ok(match cfg {
        TransportConfig::FileDrop { dir } => Box::new(FileDropTransport::new(crate::config::resolve(root, dir))),
        TransportConfig::Smtp {
            host,
            port,
            username,
            password,
            timeout_s,
            security,
        } => {
            let credentials = match (username, password) {
                (Some(u), Some(p)) => Some((u.clone(), p.clone())),
                (None, None) => None,
                _ => return Err(Error::config("smtp username and password go together")),
            };
            Box::new(SmtpTransport::new(
                host,
                *port,
                *security,
                credentials,
                Duration::from_secs(*timeout_s),
            )?)
        }
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DeliverySummary {
    /// Another pass held the lock.
    pub skipped: bool,
    pub sent: usize,
    pub rejected: usize,
    pub flagged: usize,
    /// Items still queued at the end of the pass.
    pub retained: usize,
    pub transport_down: bool,
}

fn record_failure(queue: &Queue, lock: &LockHandle, mut item: QueueItem, error: &str) -> Result<()> {
    item.attempts += 1;
    if let Some(obj) = item.payload.as_object_mut() {
        let attempts = obj.get("attempts").and_then(|v| v.as_u64()).unwrap_or(0) + 1;
        obj.insert("attempts".into(), attempts.into());
        obj.insert("last_error".into(), error.into());
    }
    queue.update(lock, &item)
}

/// One delivery pass over the outgoing queue.
pub fn deliver_pending(
    queue: &Queue,
    transport: &mut dyn Transport,
    from: &str,
    faults: &Arc<Faults>,
) -> Result<DeliverySummary> {
    let Some(lock) = queue.acquire_lock()? else {
        return Ok(DeliverySummary {
            skipped: true,
            ..Default::default()
        });
    };
    let mut summary = DeliverySummary::default();
    let outcome = delivery_pass(queue, &lock, transport, from, faults, &mut summary);
    if matches!(&outcome, Err(e) if e.is_injected_crash()) {
        // A crashed process cannot clean up after itself.
        return outcome.map(|_| summary);
    }
    queue.release_lock(lock)?;
    outcome?;
    summary.retained = queue.list()?.len();
    Ok(summary)
}

fn delivery_pass(
    queue: &Queue,
    lock: &LockHandle,
    transport: &mut dyn Transport,
    from: &str,
    faults: &Arc<Faults>,
    summary: &mut DeliverySummary,
) -> Result<()> {
    let mut cursor: Option<String> = None;
    while let Some(next) = queue.dequeue_after(lock, cursor.as_deref())? {
        cursor = Some(next.item_id().to_string());
        let item = match next {
            Next::Item(item) => item,
            Next::Unreadable { item_id, error } => {
                queue.flag(lock, &item_id, &error.to_string())?;
                summary.flagged += 1;
                continue;
            }
        };
        let msg: OutboundMessage = match item.payload_as() {
            Ok(m) => m,
            Err(e) => {
                queue.flag(lock, &item.item_id, &e.to_string())?;
                summary.flagged += 1;
                continue;
            }
        };
        match transport.send(&item.item_id, from, &msg) {
            Ok(()) => {
                faults.hit(CrashPoint::OutboxAfterSend)?;
                queue.remove(&item.item_id)?;
                summary.sent += 1;
            }
            Err(SendError::Rejected(e)) => {
                log::warn!("outgoing {}: {e}", item.item_id);
                record_failure(queue, lock, item, &e)?;
                summary.rejected += 1;
            }
            Err(SendError::Unavailable(e)) => {
                log::error!("transport unavailable, messages stay queued: {e}");
                summary.transport_down = true;
                record_failure(queue, lock, item, &e)?;
                while let Some(rest) = queue.dequeue_after(lock, cursor.as_deref())? {
                    cursor = Some(rest.item_id().to_string());
                    if let Next::Item(rest) = rest {
                        record_failure(queue, lock, rest, &e)?;
                    }
                }
                break;
            }
        }
    }
    Ok(())
}
