//! Minimal Landlock bindings: build a ruleset in the parent, enforce it in
//! the child between `fork` and `exec`.
//!
//! Only raw syscalls run in the child, so the `pre_exec` side stays
//! async-signal-safe.

use std::ffi::CString;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::os::unix::ffi::OsStrExt;
use std::path::Path;

const CREATE_RULESET_VERSION: u32 = 1 << 0;
const RULE_PATH_BENEATH: libc::c_int = 1;

const EXECUTE: u64 = 1 << 0;
const WRITE_FILE: u64 = 1 << 1;
const READ_FILE: u64 = 1 << 2;
const READ_DIR: u64 = 1 << 3;
const REFER: u64 = 1 << 13;
const TRUNCATE: u64 = 1 << 14;
const IOCTL_DEV: u64 = 1 << 15;

/// Rights that may be attached to a rule on a non-directory.
const FILE_RIGHTS: u64 = EXECUTE | WRITE_FILE | READ_FILE | TRUNCATE | IOCTL_DEV;

#[repr(C)]
struct RulesetAttr {
    handled_access_fs: u64,
}

#[repr(C, packed)]
struct PathBeneathAttr {
    allowed_access: u64,
    parent_fd: i32,
}

/// Highest supported ABI, or `None` when Landlock is unavailable.
pub fn abi_version() -> Option<u32> {
    // SAFETY: a null attribute with size 0 and the VERSION flag only queries.
    let v = unsafe {
        libc::syscall(
            libc::SYS_landlock_create_ruleset,
            std::ptr::null::<RulesetAttr>(),
            0usize,
            CREATE_RULESET_VERSION,
        )
    };
    (v > 0).then_some(v as u32)
}

fn handled_for(abi: u32) -> u64 {
    let mut mask = (1u64 << 13) - 1;
    if abi >= 2 {
        mask |= REFER;
    }
    if abi >= 3 {
        mask |= TRUNCATE;
    }
    if abi >= 5 {
        mask |= IOCTL_DEV;
    }
    mask
}

#[derive(Debug, Clone, Copy)]
pub enum Access {
    /// Read, list and execute.
    ReadExec,
    /// Read and write an existing file, never create.
    ReadWriteFile,
    /// Everything the kernel lets us restrict.
    Full,
}

pub struct Ruleset {
    fd: OwnedFd,
    handled: u64,
}

impl Ruleset {
    pub fn new() -> std::io::Result<Self> {
        let abi = abi_version().ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::Unsupported, "landlock is not available")
        })?;
        let handled = handled_for(abi);
        let attr = RulesetAttr {
            handled_access_fs: handled,
        };
        // SAFETY: attr is a valid, initialized struct of the size passed.
        let fd = unsafe {
            libc::syscall(
                libc::SYS_landlock_create_ruleset,
                &attr as *const RulesetAttr,
                std::mem::size_of::<RulesetAttr>(),
                0u32,
            )
        };
        if fd < 0 {
            return Err(std::io::Error::last_os_error());
        }
        // SAFETY: the kernel returned a fresh descriptor (opened O_CLOEXEC).
        let fd = unsafe { OwnedFd::from_raw_fd(fd as i32) };
        Ok(Ruleset { fd, handled })
    }

    /// Grant `access` beneath `path`. Missing paths are skipped.
    pub fn allow(&mut self, path: &Path, access: Access) -> std::io::Result<()> {
        let meta = match std::fs::metadata(path) {
            Ok(m) => m,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e),
        };
        let mut rights = match access {
            Access::ReadExec => EXECUTE | READ_FILE | READ_DIR,
            Access::ReadWriteFile => READ_FILE | WRITE_FILE | TRUNCATE,
            Access::Full => self.handled,
        } & self.handled;
        if !meta.is_dir() {
            rights &= FILE_RIGHTS;
        }
        let c_path = CString::new(path.as_os_str().as_bytes())?;
        // SAFETY: c_path is NUL-terminated; O_PATH opens without reading.
        let raw = unsafe { libc::open(c_path.as_ptr(), libc::O_PATH | libc::O_CLOEXEC) };
        if raw < 0 {
            return Err(std::io::Error::last_os_error());
        }
        // SAFETY: raw is a descriptor we just opened.
        let parent = unsafe { OwnedFd::from_raw_fd(raw) };
        let attr = PathBeneathAttr {
            allowed_access: rights,
            parent_fd: parent.as_raw_fd(),
        };
        // SAFETY: attr is valid for the duration of the call.
        let rc = unsafe {
            libc::syscall(
                libc::SYS_landlock_add_rule,
                self.fd.as_raw_fd(),
                RULE_PATH_BENEATH,
                &attr as *const PathBeneathAttr,
                0u32,
            )
        };
        if rc < 0 {
            return Err(std::io::Error::last_os_error());
        }
        Ok(())
    }

    pub fn raw_fd(&self) -> i32 {
        self.fd.as_raw_fd()
    }
}

/// Enforce a ruleset on the calling thread. Call only between fork and exec.
///
/// # Safety
/// Must be called in a freshly forked child; it performs raw syscalls only.
pub unsafe fn restrict_self(ruleset_fd: i32) -> std::io::Result<()> {
    if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
        return Err(std::io::Error::last_os_error());
    }
    if libc::syscall(libc::SYS_landlock_restrict_self, ruleset_fd, 0u32) != 0 {
        return Err(std::io::Error::last_os_error());
    }
    Ok(())
}
