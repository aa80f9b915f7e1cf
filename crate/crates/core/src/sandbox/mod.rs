//! Running untrusted code under OS resource limits.
//!
//! A child launched by [`run_limited`] gets:
//!
//! - `RLIMIT_CPU`, `RLIMIT_AS`, `RLIMIT_FSIZE`, `RLIMIT_NOFILE` from the
//!   config, and `RLIMIT_CORE = 0`;
//! - exactly the configured environment, nothing inherited;
//! - the job directory as its working directory;
//! - its own process group, killed as a whole once the child ends or the
//!   wall-clock ceiling (3x the CPU limit) passes;
//! - when the kernel supports Landlock, a file-system view limited to the
//!   job directory plus read-only system paths;
//! - optionally a reduced-privilege account (`run_as_user`, needs root).

mod landlock;

use std::collections::BTreeMap;
use std::ffi::CString;
use std::fs::File;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub use self::landlock::abi_version as landlock_abi;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxConfig {
    #[serde(default = "d_cpu")]
    pub cpu_seconds: u64,
    #[serde(default = "d_as")]
    pub address_space_bytes: u64,
    #[serde(default = "d_fsize")]
    pub file_size_bytes: u64,
    #[serde(default = "d_nofile")]
    pub open_files: u64,
    /// The complete environment of the child.
    #[serde(default = "d_env")]
    pub environment: BTreeMap<String, String>,
    /// Readable (and executable) beneath these paths; all else is denied
    /// except the job directory.
    #[serde(default = "d_readable")]
    pub readable_paths: Vec<PathBuf>,
    /// Refuse to run when Landlock is unavailable instead of degrading to
    /// permission-only isolation.
    #[serde(default)]
    pub require_landlock: bool,
    /// Account to switch to before exec. Requires running as root.
    #[serde(default)]
    pub run_as_user: Option<String>,
    /// Where per-job directories are created, relative to the root.
    #[serde(default = "d_root")]
    pub sandbox_root: PathBuf,
}

fn d_cpu() -> u64 {
    10
}
fn d_as() -> u64 {
    512 * 1024 * 1024
}
fn d_fsize() -> u64 {
    10 * 1024 * 1024
}
fn d_nofile() -> u64 {
    64
}
fn d_env() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("PATH".to_string(), "/usr/local/bin:/usr/bin:/bin".to_string()),
        ("LANG".to_string(), "C.UTF-8".to_string()),
    ])
}
fn d_readable() -> Vec<PathBuf> {
    ["/usr", "/lib", "/lib64", "/bin", "/sbin", "/etc"]
        .iter()
        .map(PathBuf::from)
        .collect()
}
fn d_root() -> PathBuf {
    "sandbox".into()
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            cpu_seconds: d_cpu(),
            address_space_bytes: d_as(),
            file_size_bytes: d_fsize(),
            open_files: d_nofile(),
            environment: d_env(),
            readable_paths: d_readable(),
            require_landlock: false,
            run_as_user: None,
            sandbox_root: d_root(),
        }
    }
}

impl SandboxConfig {
    pub fn validate(&self) -> Result<()> {
        let limits = [
            ("cpu_seconds", self.cpu_seconds),
            ("address_space_bytes", self.address_space_bytes),
            ("file_size_bytes", self.file_size_bytes),
            ("open_files", self.open_files),
        ];
        if let Some((name, _)) = limits.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("sandbox.{name} must be positive")));
        }
        Ok(())
    }

    pub fn wall_clock_ceiling(&self) -> Duration {
        Duration::from_secs(self.cpu_seconds.saturating_mul(3))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Termination {
    Exited(i32),
    Signaled(i32),
    /// Killed by the supervisor at the wall-clock ceiling.
    WallClock,
}

impl Termination {
    pub fn is_abnormal(&self) -> bool {
        !matches!(self, Termination::Exited(_))
    }

    /// Which limit most likely ended the run.
    pub fn resource(&self) -> String {
        match self {
            Termination::Exited(code) => format!("exit status {code}"),
            Termination::WallClock => "wall clock".into(),
            Termination::Signaled(sig) => match *sig {
                libc::SIGXCPU => "cpu time".into(),
                libc::SIGXFSZ => "file size".into(),
                libc::SIGKILL => "killed (cpu time or memory)".into(),
                libc::SIGSEGV | libc::SIGABRT | libc::SIGBUS => "memory".into(),
                other => format!("signal {other}"),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub termination: Termination,
    pub wall_seconds: f64,
    /// Whether Landlock confinement was in force.
    pub confined: bool,
}

/// Paths the child's output streams are written to.
pub struct RunLogs<'a> {
    pub stdout: &'a Path,
    pub stderr: &'a Path,
}

struct Account {
    uid: libc::uid_t,
    gid: libc::gid_t,
}

fn lookup_account(name: &str) -> Result<Account> {
    let c = CString::new(name).map_err(|_| Error::config("invalid run_as_user"))?;
    // SAFETY: getpwnam returns a pointer into static storage or null; we
    // copy the ids out immediately, before any other call can reuse it.
    let pw = unsafe { libc::getpwnam(c.as_ptr()) };
    if pw.is_null() {
        return Err(Error::config(format!("unknown account {name:?}")));
    }
    let (uid, gid) = unsafe { ((*pw).pw_uid, (*pw).pw_gid) };
    Ok(Account { uid, gid })
}

/// Hand a directory tree to the sandbox account.
pub fn chown_tree(dir: &Path, user: &str) -> Result<()> {
    let acct = lookup_account(user)?;
    for entry in walk(dir)? {
        std::os::unix::fs::chown(&entry, Some(acct.uid), Some(acct.gid)).at(&entry)?;
    }
    Ok(())
}

fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = vec![dir.to_path_buf()];
    let mut i = 0;
    while i < out.len() {
        let p = out[i].clone();
        if p.is_dir() {
            for e in std::fs::read_dir(&p).at(&p)? {
                out.push(e.at(&p)?.path());
            }
        }
        i += 1;
    }
    Ok(out)
}

fn resolve_program(program: &str, env_path: Option<&String>) -> Option<PathBuf> {
    let p = Path::new(program);
    if p.components().count() > 1 {
        return Some(p.to_path_buf());
    }
    let search = env_path
        .cloned()
        .or_else(|| std::env::var("PATH").ok())
        .unwrap_or_default();
    std::env::split_paths(&search)
        .map(|d| d.join(program))
        .find(|c| c.is_file())
}

fn set_limit(resource: libc::__rlimit_resource_t, soft: u64, hard: u64) -> std::io::Result<()> {
    let rl = libc::rlimit {
        rlim_cur: soft,
        rlim_max: hard,
    };
    // SAFETY: rl is valid; raw syscall wrapper, async-signal-safe.
    if unsafe { libc::setrlimit(resource, &rl) } != 0 {
        return Err(std::io::Error::last_os_error());
    }
    Ok(())
}

/// Run `argv` in `workdir` under the configured limits.
///
/// `extra_readable` lists additional paths the child may read (the runner
/// executable, suite sources outside the job directory).
pub fn run_limited(
    argv: &[String],
    workdir: &Path,
    cfg: &SandboxConfig,
    extra_readable: &[PathBuf],
    logs: RunLogs<'_>,
) -> Result<RunOutcome> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| Error::contract("empty command line"))?;
    let program_path = resolve_program(program, cfg.environment.get("PATH"))
        .ok_or_else(|| Error::Sandbox(format!("runner program {program:?} not found")))?;

    let ruleset = match build_ruleset(workdir, cfg, extra_readable, &program_path) {
        Ok(r) => Some(r),
        Err(e) if cfg.require_landlock => {
            return Err(Error::Sandbox(format!("landlock required but unavailable: {e}")))
        }
        Err(e) => {
            log::warn!("file-system confinement unavailable ({e}); relying on permissions only");
            None
        }
    };
    let account = cfg.run_as_user.as_deref().map(lookup_account).transpose()?;

    let stdout = File::create(logs.stdout).at(logs.stdout)?;
    let stderr = File::create(logs.stderr).at(logs.stderr)?;

    let mut cmd = Command::new(&program_path);
    cmd.args(args)
        .current_dir(workdir)
        .env_clear()
        .envs(&cfg.environment)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr);

    let cpu = cfg.cpu_seconds;
    let (as_bytes, fsize, nofile) = (cfg.address_space_bytes, cfg.file_size_bytes, cfg.open_files);
    let ruleset_fd = ruleset.as_ref().map(|r| r.raw_fd());
    // SAFETY: the closure only makes raw, async-signal-safe syscalls.
    unsafe {
        cmd.pre_exec(move || {
            if libc::setpgid(0, 0) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            // SIGXCPU at the soft limit, SIGKILL one second later.
            set_limit(libc::RLIMIT_CPU, cpu, cpu + 1)?;
            set_limit(libc::RLIMIT_AS, as_bytes, as_bytes)?;
            set_limit(libc::RLIMIT_FSIZE, fsize, fsize)?;
            set_limit(libc::RLIMIT_NOFILE, nofile, nofile)?;
            set_limit(libc::RLIMIT_CORE, 0, 0)?;
            if let Some(acct) = &account {
                if libc::setgroups(0, std::ptr::null()) != 0
                    || libc::setgid(acct.gid) != 0
                    || libc::setuid(acct.uid) != 0
                {
                    return Err(std::io::Error::last_os_error());
                }
            }
            if let Some(fd) = ruleset_fd {
                landlock::restrict_self(fd)?;
            }
            Ok(())
        });
    }

    let started = Instant::now();
    let mut child = cmd
        .spawn()
        .map_err(|e| Error::Sandbox(format!("cannot launch {}: {e}", program_path.display())))?;
    drop(ruleset);
    let pgid = child.id() as libc::pid_t;
    let ceiling = cfg.wall_clock_ceiling();

    let termination = loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                break match status.signal() {
                    Some(sig) => Termination::Signaled(sig),
                    None => Termination::Exited(status.code().unwrap_or(-1)),
                }
            }
            Ok(None) if started.elapsed() >= ceiling => {
                kill_group(pgid);
                let _ = child.wait();
                break Termination::WallClock;
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                kill_group(pgid);
                let _ = child.wait();
                return Err(Error::Sandbox(format!("waiting for child: {e}")));
            }
        }
    };
    // Stragglers the child forked into its group.
    kill_group(pgid);

    Ok(RunOutcome {
        termination,
        wall_seconds: started.elapsed().as_secs_f64(),
        confined: ruleset_fd.is_some(),
    })
}

fn kill_group(pgid: libc::pid_t) {
    // SAFETY: signalling a process group we created; errors (ESRCH) ignored.
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
}

fn build_ruleset(
    workdir: &Path,
    cfg: &SandboxConfig,
    extra_readable: &[PathBuf],
    program: &Path,
) -> std::io::Result<landlock::Ruleset> {
    use landlock::Access;
    let mut rs = landlock::Ruleset::new()?;
    for p in &cfg.readable_paths {
        rs.allow(p, Access::ReadExec)?;
    }
    for p in extra_readable {
        rs.allow(p, Access::ReadExec)?;
    }
    rs.allow(program, Access::ReadExec)?;
    if let Ok(real) = program.canonicalize() {
        rs.allow(&real, Access::ReadExec)?;
    }
    rs.allow(Path::new("/dev/null"), Access::ReadWriteFile)?;
    rs.allow(Path::new("/dev/urandom"), Access::ReadExec)?;
    rs.allow(workdir, Access::Full)?;
    Ok(rs)
}
