//! Reading submissions from the inbox.
//!
//! Two channels feed the pipeline:
//!
//! - `mail_dir`: one raw RFC-822 message per file, as left by a mail
//!   retrieval program. Hidden files and `*.tmp` are ignored so that the
//!   retriever can write under a temporary name and rename.
//! - `drop_dir`: one directory per submission holding the files plus
//!   `meta.json`, which must be written last:
//!
//! ```json
//! {"schema_version": 1, "sender": "a@uni.ac.uk", "subject": "lab 4",
//!  "received_at": "2014-11-14T20:39:02Z"}
//! ```
//!
//! `received_at` is optional in bundles. For mail, the arrival instant comes
//! from the topmost `Received:` header (written by the receiving server),
//! falling back to the file's modification time; the sender-controlled
//! `Date:` header is not trusted.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use mailparse::{MailHeaderMap, ParsedMail};
use serde::Deserialize;

use crate::error::{Error, IoContext, Result};
use crate::model::Timestamp;
use crate::roster::normalize_address;

pub const BUNDLE_META: &str = "meta.json";
pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Mail,
    Drop,
}

/// One not-yet-processed inbox entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InboxEntry {
    pub channel: Channel,
    /// File or directory name; unique within its channel.
    pub name: String,
    pub path: PathBuf,
    pub modified: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attachment {
    pub filename: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncomingMessage {
    pub sender: String,
    pub subject: String,
    pub attachments: Vec<Attachment>,
    pub received_at: Timestamp,
}

fn modified(path: &Path) -> Result<Timestamp> {
    let meta = fs::metadata(path).at(path)?;
    let t: DateTime<Utc> = meta.modified().at(path)?.into();
    Ok(Utc.timestamp_opt(t.timestamp(), 0).single().unwrap_or(t))
}

fn visible(name: &str) -> bool {
    !name.starts_with('.') && !name.ends_with(".tmp")
}

/// Entries of both channels, oldest first (ties by name, mail before drop).
pub fn list_inbox(mail_dir: &Path, drop_dir: &Path) -> Result<Vec<InboxEntry>> {
    let mut out = Vec::new();
    for (channel, dir) in [(Channel::Mail, mail_dir), (Channel::Drop, drop_dir)] {
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
            Err(e) => return Err(Error::io(dir, e)),
        };
        for entry in entries {
            let entry = entry.at(dir)?;
            let path = entry.path();
            let Some(name) = entry.file_name().to_str().map(str::to_string) else {
                log::warn!("inbox: skipping non-UTF-8 name {}", path.display());
                continue;
            };
            if !visible(&name) {
                continue;
            }
            let ready = match channel {
                Channel::Mail => path.is_file(),
                Channel::Drop => path.is_dir() && path.join(BUNDLE_META).is_file(),
            };
            if ready {
                let stamp_path = if channel == Channel::Drop { path.join(BUNDLE_META) } else { path.clone() };
                out.push(InboxEntry {
                    channel,
                    name,
                    modified: modified(&stamp_path)?,
                    path,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        (a.modified, a.channel == Channel::Drop, &a.name).cmp(&(b.modified, b.channel == Channel::Drop, &b.name))
    });
    Ok(out)
}

fn collect_attachments(part: &ParsedMail, out: &mut Vec<Attachment>) -> std::result::Result<(), String> {
    if !part.subparts.is_empty() {
        for sub in &part.subparts {
            collect_attachments(sub, out)?;
        }
        return Ok(());
    }
    let disposition = part.get_content_disposition();
    let name = disposition
        .params
        .get("filename")
        .or_else(|| part.ctype.params.get("name"))
        .cloned();
    if let Some(filename) = name {
        let bytes = part
            .get_body_raw()
            .map_err(|e| format!("attachment {filename}: {e}"))?;
        out.push(Attachment { filename, bytes });
    }
    Ok(())
}

fn check_complete(part: &ParsedMail, raw: &[u8]) -> std::result::Result<(), String> {
    if part.ctype.mimetype.starts_with("multipart/") {
        let Some(boundary) = part.ctype.params.get("boundary") else {
            return Err("multipart message without boundary".into());
        };
        let closing = format!("--{boundary}--");
        let text = String::from_utf8_lossy(raw);
        if !text.lines().any(|l| l.trim_end().starts_with(&closing)) {
            return Err("multipart message is truncated (no closing boundary)".into());
        }
    }
    Ok(())
}

fn received_instant(parsed: &ParsedMail) -> Option<Timestamp> {
    let header = parsed.headers.get_first_value("Received")?;
    let date = header.rsplit(';').next()?.trim();
    let secs = mailparse::dateparse(date).ok()?;
    Utc.timestamp_opt(secs, 0).single()
}

/// Parse a raw message. Errors describe why it cannot be processed.
pub fn parse_message(raw: &[u8], fallback_time: Timestamp) -> std::result::Result<IncomingMessage, String> {
    let parsed = mailparse::parse_mail(raw).map_err(|e| format!("unparseable message: {e}"))?;
    let from = parsed
        .headers
        .get_first_header("From")
        .ok_or("message has no From header")?;
    let sender = mailparse::addrparse_header(from)
        .ok()
        .and_then(|list| list.extract_single_info())
        .map(|info| normalize_address(&info.addr))
        .filter(|a| a.contains('@'))
        .ok_or("cannot read the sender address")?;
    check_complete(&parsed, raw)?;
    let mut attachments = Vec::new();
    collect_attachments(&parsed, &mut attachments)?;
    Ok(IncomingMessage {
        sender,
        subject: parsed.headers.get_first_value("Subject").unwrap_or_default(),
        attachments,
        received_at: received_instant(&parsed).unwrap_or(fallback_time),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    schema_version: u32,
    sender: String,
    subject: String,
    received_at: Option<Timestamp>,
}

/// Read a drop-directory bundle.
pub fn read_bundle(dir: &Path, fallback_time: Timestamp) -> std::result::Result<IncomingMessage, String> {
    let meta_bytes = fs::read(dir.join(BUNDLE_META)).map_err(|e| format!("{BUNDLE_META}: {e}"))?;
    let meta: BundleMeta = serde_json::from_slice(&meta_bytes).map_err(|e| format!("{BUNDLE_META}: {e}"))?;
    if meta.schema_version != BUNDLE_SCHEMA_VERSION {
        return Err(format!(
            "{BUNDLE_META}: schema_version {} (expected {BUNDLE_SCHEMA_VERSION})",
            meta.schema_version
        ));
    }
    let mut attachments = Vec::new();
    let mut names: Vec<_> = fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .filter(|n| n != BUNDLE_META && visible(n))
        .collect();
    names.sort();
    for filename in names {
        let bytes = fs::read(dir.join(&filename)).map_err(|e| format!("{filename}: {e}"))?;
        attachments.push(Attachment { filename, bytes });
    }
    Ok(IncomingMessage {
        sender: normalize_address(&meta.sender),
        subject: meta.subject,
        attachments,
        received_at: meta.received_at.unwrap_or(fallback_time),
    })
}

/// Read an inbox entry of either channel.
pub fn read_entry(entry: &InboxEntry) -> std::result::Result<IncomingMessage, String> {
    match entry.channel {
        Channel::Mail => {
            let raw = fs::read(&entry.path).map_err(|e| e.to_string())?;
            parse_message(&raw, entry.modified)
        }
        Channel::Drop => read_bundle(&entry.path, entry.modified),
    }
}

/// Build a submission message with attachments; used by tests and the demo
/// scaffold.
pub fn compose_message(from: &str, subject: &str, received: Option<Timestamp>, files: &[(&str, &[u8])]) -> Vec<u8> {
    use base64::Engine;
    let boundary = "gradepipe-boundary-7f3a";
    let mut m = String::new();
    if let Some(t) = received {
        m.push_str(&format!("Received: from mx by inbox; {}\n", t.to_rfc2822()));
    }
    m.push_str(&format!(
        "From: {from}\nSubject: {subject}\nMIME-Version: 1.0\nContent-Type: multipart/mixed; boundary=\"{boundary}\"\n\n\
         --{boundary}\nContent-Type: text/plain; charset=utf-8\n\nPlease find my submission attached.\n"
    ));
    for (name, bytes) in files {
        let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
        m.push_str(&format!(
            "--{boundary}\nContent-Type: text/x-python; name=\"{name}\"\nContent-Disposition: attachment; filename=\"{name}\"\nContent-Transfer-Encoding: base64\n\n"
        ));
        for chunk in encoded.as_bytes().chunks(76) {
            m.push_str(std::str::from_utf8(chunk).unwrap_or_default());
            m.push('\n');
        }
    }
    m.push_str(&format!("--{boundary}--\n"));
    m.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2014, 11, 14, 12, 0, 0).unwrap()
    }

    #[test]
    fn parses_base64_attachments_and_received_time() {
        let when = Utc.with_ymd_and_hms(2014, 11, 14, 20, 39, 2).unwrap();
        let raw = compose_message(
            "Nora <Nora.OShea@Uni.Email.Address>",
            "Lab 4",
            Some(when),
            &[("lab4.py", b"print('\xc3\xa9')\n")],
        );
        let m = parse_message(&raw, t0()).unwrap();
        assert_eq!(m.sender, "nora.oshea@uni.email.address");
        assert_eq!(m.subject, "Lab 4");
        assert_eq!(m.received_at, when);
        assert_eq!(m.attachments, vec![Attachment { filename: "lab4.py".into(), bytes: b"print('\xc3\xa9')\n".to_vec() }]);
    }

    #[test]
    fn parses_quoted_printable() {
        let raw = b"From: a@x\nSubject: lab 1\nContent-Type: multipart/mixed; boundary=b\n\n--b\n\
Content-Disposition: attachment; filename=lab1.py\nContent-Transfer-Encoding: quoted-printable\n\n\
x =3D 1\n--b--\n";
        let m = parse_message(raw, t0()).unwrap();
        assert_eq!(m.received_at, t0());
        assert_eq!(m.attachments[0].bytes, b"x = 1");
    }

    #[test]
    fn rejects_unreadable_messages() {
        let raw = compose_message("a@x", "lab 1", None, &[("lab1.py", b"x = 1\n")]);
        let truncated = &raw[..raw.len() - 30];
        assert!(parse_message(truncated, t0()).unwrap_err().contains("truncated"));
        assert!(parse_message(b"Subject: hi\n\nbody", t0()).unwrap_err().contains("From"));
        assert!(parse_message(b"From: nobody\nSubject: hi\n\nbody", t0()).is_err());
    }

    #[test]
    fn lists_oldest_first_and_reads_bundles() {
        let tmp = tempfile::tempdir().unwrap();
        let mail = tmp.path().join("mail");
        let drop = tmp.path().join("drop");
        fs::create_dir_all(&mail).unwrap();
        fs::create_dir_all(drop.join("b1")).unwrap();
        fs::create_dir_all(drop.join("incomplete")).unwrap();
        fs::write(mail.join("m2"), "x").unwrap();
        fs::write(mail.join("m1"), "x").unwrap();
        fs::write(mail.join(".m3.tmp"), "x").unwrap();
        fs::write(drop.join("b1/exam.py"), "x = 1\n").unwrap();
        fs::write(drop.join("b1/meta.json"), r#"{"schema_version":1,"sender":"A@X","subject":"exam"}"#).unwrap();
        let old = std::time::SystemTime::now() - std::time::Duration::from_secs(60);
        fs::File::options().write(true).open(mail.join("m2")).unwrap().set_modified(old).unwrap();

        let entries = list_inbox(&mail, &drop).unwrap();
        let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["m2", "m1", "b1"]);
        let bundle = read_entry(&entries[2]).unwrap();
        assert_eq!(bundle.sender, "a@x");
        assert_eq!(bundle.attachments[0].filename, "exam.py");
        assert!(list_inbox(&tmp.path().join("none"), &tmp.path().join("none")).unwrap().is_empty());
    }
}
