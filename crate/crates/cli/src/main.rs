//! `gradepipe`: operator interface and scheduler.
//!
//! Exit status: 0 success, 1 operational error, 2 configuration error.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use gradepipe_core::course::Course;
use gradepipe_core::faults::{CrashPoint, Faults};
use gradepipe_core::fsqueue::Queue;
use gradepipe_core::manifest::parse_local_timestamp;
use gradepipe_core::model::{now, Timestamp};
use gradepipe_core::outbox::transport_from_config;
use gradepipe_core::scaffold::{write_demo, DemoOptions};
use gradepipe_core::{pipeline, reporting, Error};
use serde_json::json;

#[derive(Parser)]
#[command(name = "gradepipe", version, about = "Automatic assessment pipeline for programming coursework")]
struct Cli {
    /// Pipeline root holding gradepipe.toml.
    #[arg(long, global = true, default_value = ".")]
    root: PathBuf,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a demonstration course into the root.
    Init {
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 10)]
        cpu_seconds: u64,
    },
    /// Run one scheduler pass: ingest, testing, delivery, watchdog.
    Tick {
        /// Simulate a crash at this point (testing aid).
        #[arg(long, hide = true)]
        crash_at: Option<String>,
    },
    /// Tick every interval until interrupted.
    Serve {
        /// Seconds between ticks; defaults to the configured interval.
        #[arg(long)]
        interval: Option<u64>,
        /// Stop after this many ticks.
        #[arg(long)]
        ticks: Option<u64>,
    },
    /// Inspect and repair queues.
    #[command(subcommand)]
    Queue(QueueCommand),
    /// Summaries, exports and statistics.
    #[command(subcommand)]
    Report(ReportCommand),
    /// Enrolment list.
    #[command(subcommand)]
    Roster(RosterCommand),
    /// Test offline-collected exam files (same as `report premark`).
    Premark(PremarkArgs),
    /// The canned-report runner used by the demo course.
    FixtureRunner {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

#[derive(Subcommand)]
enum QueueCommand {
    /// Item counts and lock state of every queue.
    Ls {
        /// List the item ids of this queue.
        queue: Option<String>,
    },
    /// Show a queue item or a submission with its mark history.
    Inspect { id: String },
    /// Move a flagged item back into its queue.
    Requeue { queue: String, item_id: String },
    /// Remove a lock left by a dead process.
    Unlock { queue: String },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Weekly summaries (printed, or queued with --send).
    Weekly {
        #[arg(long)]
        student: Option<String>,
        /// Local time, `YYYY-MM-DD HH:MM[:SS]`; default now.
        #[arg(long)]
        as_of: Option<String>,
        #[arg(long)]
        send: bool,
    },
    /// Reminders for students with missing laboratory submissions.
    Reminders {
        #[arg(long)]
        as_of: Option<String>,
        #[arg(long)]
        send: bool,
    },
    /// Histogram and timeline CSVs.
    Stats {
        #[arg(long)]
        assignment: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Current marks as CSV.
    Export {
        #[arg(long)]
        assignment: Option<String>,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test offline-collected exam files.
    Premark(PremarkArgs),
    /// Copy randomly chosen submissions for review.
    Sample {
        #[arg(long)]
        assignment: Option<String>,
        #[arg(short = 'n', long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        anonymize: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PremarkArgs {
    /// Directory with one subdirectory of files per candidate.
    dir: PathBuf,
    #[arg(long)]
    assignment: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum RosterCommand {
    /// Enrolled students.
    List,
    /// Load configuration, roster and manifest and report problems.
    Check,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl Display) -> Self {
        Failure { code: 2, message: e.to_string() }
    }

    fn op(e: impl Display) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::SchemaVersion { .. } => Failure::config(e),
            other => Failure::op(other),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn open_course(root: &Path, faults: Arc<Faults>) -> CliResult<Course> {
    Course::open_with(root, faults).map_err(Failure::config)
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn as_of(course: &Course, arg: &Option<String>) -> CliResult<Timestamp> {
    match arg {
        Some(s) => parse_local_timestamp(s, course.tz).map_err(Failure::config),
        None => Ok(now()),
    }
}

fn find_queue<'a>(course: &'a Course, name: &str) -> CliResult<&'a Queue> {
    course
        .queues()
        .into_iter()
        .find(|q| q.name() == name)
        .ok_or_else(|| Failure::op(format!("no queue named {name:?} (incoming, testing, outgoing)")))
}

fn cmd_init(cli: &Cli, force: bool, cpu_seconds: u64) -> CliResult {
    let exe = std::env::current_exe().map_err(Failure::op)?;
    let opts = DemoOptions {
        runner_command: vec![exe.display().to_string(), "fixture-runner".into()],
        cpu_seconds,
        force,
    };
    fs::create_dir_all(&cli.root).map_err(Failure::op)?;
    write_demo(&cli.root, &opts)?;
    open_course(&cli.root, Arc::new(Faults::none()))?;
    if cli.json {
        print_json(&json!({"root": cli.root}));
    } else {
        println!("demo course written to {}", cli.root.display());
    }
    Ok(())
}

fn cmd_tick(cli: &Cli, crash_at: &Option<String>) -> CliResult {
    let faults = Arc::new(Faults::none());
    if let Some(p) = crash_at {
        faults.arm(p.parse::<CrashPoint>()?);
    }
    let course = open_course(&cli.root, faults)?;
    let mut transport = transport_from_config(&course.config.transport, &course.root).map_err(Failure::config)?;
    let summary = pipeline::tick(&course, transport.as_mut())?;
    if cli.json {
        print_json(&summary);
    } else {
        if let Some(s) = &summary.ingest {
            println!(
                "ingest:   {}polled {}, accepted {}, duplicates {}, rejected {}, quarantined {}, failed {}",
                if s.skipped { "(skipped: locked) " } else { "" },
                s.polled, s.accepted, s.duplicates, s.rejected, s.quarantined, s.failed
            );
        }
        if let Some(s) = &summary.testing {
            println!(
                "testing:  {}processed {}, marks {}, invites {}, flagged {}, retried {}",
                if s.skipped { "(skipped: locked) " } else { "" },
                s.processed, s.marks, s.invites, s.flagged, s.retried
            );
        }
        if let Some(s) = &summary.outbox {
            println!(
                "outbox:   {}sent {}, rejected {}, flagged {}, retained {}{}",
                if s.skipped { "(skipped: locked) " } else { "" },
                s.sent,
                s.rejected,
                s.flagged,
                s.retained,
                if s.transport_down { " (transport unavailable)" } else { "" }
            );
        }
        if summary.weekly_summaries > 0 {
            println!("weekly:   {} summaries queued", summary.weekly_summaries);
        }
        for a in &summary.stale_locks {
            println!("watchdog: queue {} locked for {} s", a.queue, a.age_seconds);
        }
        for e in &summary.errors {
            println!("error:    {e}");
        }
    }
    if summary.errors.is_empty() {
        Ok(())
    } else {
        Err(Failure::op(format!("{} stage(s) failed", summary.errors.len())))
    }
}

fn cmd_serve(cli: &Cli, interval: Option<u64>, ticks: Option<u64>) -> CliResult {
    let course = open_course(&cli.root, Arc::new(Faults::none()))?;
    let mut transport = transport_from_config(&course.config.transport, &course.root).map_err(Failure::config)?;
    let every = Duration::from_secs(interval.unwrap_or(course.config.tick_interval_s));
    match ticks {
        Some(n) => {
            for i in 0..n {
                let started = std::time::Instant::now();
                let s = pipeline::tick(&course, transport.as_mut())?;
                if cli.json {
                    println!("{}", serde_json::to_string(&s).expect("serializable"));
                }
                if i + 1 < n {
                    std::thread::sleep(every.saturating_sub(started.elapsed()));
                }
            }
            Ok(())
        }
        None => {
            log::info!("serving {} every {} s", course.root.display(), every.as_secs());
            let stop = AtomicBool::new(false);
            pipeline::serve(&course, transport.as_mut(), every, &stop)?;
            Ok(())
        }
    }
}

fn cmd_queue(cli: &Cli, cmd: &QueueCommand) -> CliResult {
    let course = open_course(&cli.root, Arc::new(Faults::none()))?;
    match cmd {
        QueueCommand::Ls { queue: None } => {
            let mut rows = Vec::new();
            for q in course.queues() {
                let lock = q.lock_info()?;
                rows.push(json!({
                    "queue": q.name(),
                    "items": q.list()?.len(),
                    "flagged": q.flagged()?.len(),
                    "orphaned_staging": q.orphaned_staging()?.len(),
                    "lock": lock,
                }));
            }
            if cli.json {
                print_json(&rows);
            } else {
                println!("{:<10} {:>6} {:>8} {:>8}  lock", "queue", "items", "flagged", "orphans");
                for r in &rows {
                    let lock = match &r["lock"] {
                        serde_json::Value::Null => "-".to_string(),
                        l => format!("pid {} since {}", l["owner_pid"], l["acquired_at"].as_str().unwrap_or("?")),
                    };
                    let n = |k: &str| r[k].as_u64().unwrap_or_default();
                    println!(
                        "{:<10} {:>6} {:>8} {:>8}  {lock}",
                        r["queue"].as_str().unwrap_or_default(),
                        n("items"),
                        n("flagged"),
                        n("orphaned_staging")
                    );
                }
            }
        }
        QueueCommand::Ls { queue: Some(name) } => {
            let q = find_queue(&course, name)?;
            let items = q.list()?;
            let flagged = q.flagged()?;
            if cli.json {
                print_json(&json!({"queue": name, "items": items, "flagged": flagged}));
            } else {
                for id in items {
                    println!("{id}");
                }
                for id in flagged {
                    println!("{id} (flagged)");
                }
            }
        }
        QueueCommand::Inspect { id } => inspect(cli, &course, id)?,
        QueueCommand::Requeue { queue, item_id } => {
            find_queue(&course, queue)?.requeue(item_id)?;
            if !cli.json {
                println!("{item_id} moved back into {queue}");
            }
        }
        QueueCommand::Unlock { queue } => {
            let q = find_queue(&course, queue)?;
            let removed = q.break_lock()?;
            if cli.json {
                print_json(&json!({"queue": queue, "removed": removed}));
            } else if removed {
                println!("lock on {queue} removed");
            } else {
                println!("{queue} was not locked");
            }
        }
    }
    Ok(())
}

fn inspect(cli: &Cli, course: &Course, id: &str) -> CliResult {
    for q in course.queues() {
        let item = q.load(id).or_else(|_| q.load_flagged(id));
        if let Ok(item) = item {
            let flagged = q.flagged()?.iter().any(|f| f == id);
            if cli.json {
                print_json(&json!({"queue": q.name(), "flagged": flagged, "item": item}));
            } else {
                println!("queue {}{}", q.name(), if flagged { " (flagged)" } else { "" });
                println!("{}", serde_json::to_string_pretty(&item).expect("serializable"));
            }
            return Ok(());
        }
    }
    let store = course.store()?;
    let sub = store
        .submission(id)
        .ok_or_else(|| Failure::op(format!("no queue item or submission {id:?}")))?;
    let history: Vec<_> = store
        .marks()
        .iter()
        .filter(|m| m.student_id == sub.student_id && m.assignment_key == sub.assignment_key)
        .collect();
    let results = store.results_dir(id);
    if cli.json {
        print_json(&json!({"submission": sub, "results_dir": results, "marks": history}));
        return Ok(());
    }
    println!("submission  {}", sub.submission_id);
    println!("student     {} ({})", sub.student_id, sub.sender);
    println!("assignment  {} attempt {}", sub.assignment_key, sub.attempt);
    println!("received    {}", sub.received_at.with_timezone(&course.tz).to_rfc3339());
    println!("status      {}", serde_json::to_string(&sub.status).expect("serializable"));
    for f in &sub.files {
        println!("file        {} -> {}", f.filename, f.archived_path);
    }
    if let Some(r) = results {
        println!("results     {r}");
    }
    println!("mark history for {} / {}:", sub.student_id, sub.assignment_key);
    for m in history {
        let recorded = match m.recorded_percent {
            Some(p) if m.recorded_for_grade => format!(", recorded {p}"),
            _ => String::new(),
        };
        println!(
            "  attempt {}: {} / {} = {}{}{}",
            m.attempt,
            m.points,
            m.total,
            m.percent,
            if m.late { ", late" } else { "" },
            recorded
        );
    }
    Ok(())
}

fn premark(cli: &Cli, course: &Course, args: &PremarkArgs) -> CliResult {
    let s = reporting::premark_batch(course, &args.dir, &args.assignment, &args.out)?;
    if cli.json {
        print_json(&s);
    } else {
        println!("{} candidates, {} tested, {} errors", s.candidates, s.marked, s.errors);
        if let Some(p) = &s.marks_csv {
            println!("marks:      {}", p.display());
        }
        println!("timestamps: {}", s.log_csv.display());
    }
    Ok(())
}

fn show_messages(cli: &Cli, course: &Course, msgs: Vec<gradepipe_core::outbox::OutboundMessage>, send: bool) -> CliResult {
    if send {
        for m in &msgs {
            course.send(m)?;
        }
    }
    if cli.json {
        print_json(&json!({"queued": send, "messages": msgs}));
    } else if send {
        println!("{} messages queued", msgs.len());
    } else {
        for m in &msgs {
            println!("To: {}\nSubject: {}\n\n{}", m.to.join(", "), m.subject, m.body);
        }
    }
    Ok(())
}

fn cmd_report(cli: &Cli, cmd: &ReportCommand) -> CliResult {
    let course = open_course(&cli.root, Arc::new(Faults::none()))?;
    let store = course.store()?;
    match cmd {
        ReportCommand::Weekly { student, as_of: when, send } => {
            let at = as_of(&course, when)?;
            let students: Vec<_> = match student {
                Some(id) => vec![course
                    .roster
                    .get(id)
                    .ok_or_else(|| Failure::op(format!("unknown student {id:?}")))?],
                None => course.roster.students().collect(),
            };
            let mut msgs = Vec::new();
            for s in students {
                msgs.push(reporting::weekly_summary(&course, &store, s, at)?);
            }
            show_messages(cli, &course, msgs, *send)?;
        }
        ReportCommand::Reminders { as_of: when, send } => {
            let at = as_of(&course, when)?;
            let msgs = reporting::missing_submission_scan(&course, &store, at);
            show_messages(cli, &course, msgs, *send)?;
        }
        ReportCommand::Stats { assignment, out } => {
            let events = reporting::submission_events(&store);
            let files = reporting::stats_bundle(&course, &events, assignment.as_deref(), out)?;
            if cli.json {
                print_json(&files);
            } else {
                for f in files {
                    println!("{}", f.display());
                }
            }
        }
        ReportCommand::Export { assignment, out } => {
            let csv = reporting::export_marks_csv(&store, assignment.as_deref())?;
            match out {
                Some(p) => fs::write(p, csv).map_err(|e| Failure::op(format!("{}: {e}", p.display())))?,
                None => print!("{csv}"),
            }
        }
        ReportCommand::Premark(args) => premark(cli, &course, args)?,
        ReportCommand::Sample { assignment, count, anonymize, seed, out } => {
            let dirs = reporting::sample(&course, &store, assignment.as_deref(), *count, *anonymize, *seed, out)?;
            if cli.json {
                print_json(&dirs);
            } else {
                println!("{} submissions copied to {}", dirs.len(), out.display());
            }
        }
    }
    Ok(())
}

fn cmd_roster(cli: &Cli, cmd: &RosterCommand) -> CliResult {
    let course = open_course(&cli.root, Arc::new(Faults::none()))?;
    match cmd {
        RosterCommand::List => {
            let students: Vec<_> = course.roster.students().collect();
            if cli.json {
                print_json(&students);
            } else {
                for s in students {
                    let addrs: Vec<&str> = s.email_addresses.iter().map(String::as_str).collect();
                    println!("{:<10} {} {:<24} {}", s.student_id, s.site, s.display_name, addrs.join(";"));
                }
            }
        }
        RosterCommand::Check => {
            let labs = course.manifest.assignments().len();
            if cli.json {
                print_json(&json!({"students": course.roster.len(), "assignments": labs}));
            } else {
                println!("ok: {} students, {} assignments", course.roster.len(), labs);
            }
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Init { force, cpu_seconds } => cmd_init(cli, *force, *cpu_seconds),
        Command::Tick { crash_at } => cmd_tick(cli, crash_at),
        Command::Serve { interval, ticks } => cmd_serve(cli, *interval, *ticks),
        Command::Queue(q) => cmd_queue(cli, q),
        Command::Report(r) => cmd_report(cli, r),
        Command::Roster(r) => cmd_roster(cli, r),
        Command::Premark(args) => {
            let course = open_course(&cli.root, Arc::new(Faults::none()))?;
            premark(cli, &course, args)
        }
        Command::FixtureRunner { .. } => unreachable!("handled before logging starts"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::FixtureRunner { args } = &cli.command {
        return ExitCode::from(gradepipe_core::fixture_runner::run(args) as u8);
    }
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gradepipe: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
