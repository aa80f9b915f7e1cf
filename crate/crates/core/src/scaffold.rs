//! A ready-to-run demonstration course, written by `gradepipe init`.
//!
//! It has four students on two sites, one training exercise, six weekly
//! laboratories, an exam and a receive-only project, all tested by the
//! canned-report fixture runner. Student files choose their report with a
//! `# fixture: <name>` line:
//!
//! | name           | result                                    |
//! |----------------|-------------------------------------------|
//! | `all_pass`     | every question passes (the default)       |
//! | `q3_fail`      | the third question fails with a traceback |
//! | `only_q1`      | only the first question passes            |
//! | `style`        | all pass, three style issues              |
//! | `syntax`       | syntax error                              |
//! | `hostile:...`  | see `fixture_runner`                      |

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::config::DEFAULT_CONFIG_FILE;
use crate::error::{Error, IoContext, Result};
use crate::fixture_runner::SUITE_FILE;

#[derive(Debug, Clone)]
pub struct DemoOptions {
    /// Program and leading arguments of the fixture runner.
    pub runner_command: Vec<String>,
    pub cpu_seconds: u64,
    /// Replace an existing configuration.
    pub force: bool,
}

pub const TRAINING_QUESTIONS: [&str; 3] = ["test_distance", "test_geometric_mean", "test_pyramid_volume"];
pub const LAB_QUESTIONS: [&str; 3] = ["test_q1", "test_q2", "test_q3"];
pub const LABS: [u32; 6] = [2, 3, 4, 5, 6, 7];

pub const ROSTER: &str = "\
student_id,name,site,addresses
nos1g14,Nora O'Shea,S,nora@uni.email.address;n.oshea@uni.email.address
ab1g14,Ada Byron,S,ada@uni.email.address
mo2m14,Malaika Obi,M,malaika@uni.email.address
tq3g14,Tom Quill,S,tom@uni.email.address
";

const PYRAMID_TRACEBACK: &str = "\
def test_pyramid_volume():

    # if height h is zero, expect volume zero
    assert s.pyramid_volume(1.0, 0.0) == 0.

    # tolerance for floating point answers
    eps = 1e-14

    # if we have base area A=1, height h=1,
    # we expect a volume of 1/3.:
    assert abs(s.pyramid_volume(1., 1.) - 1./3.) < eps

    # another example
    h = 2.
    A = 4.
    assert abs(s.pyramid_volume(A, h) -
               correct_pyramid_volume(A, h)) < eps

    # does this also work if arguments are integers?
>   assert abs(s.pyramid_volume(1, 1) - 1. / 3.) < eps
E   assert 0.3333333333333333 < 1e-14
E    + where 0.3333333333333333 = abs((0 - (1.0/3.0)))
E    +   where 0 = <function pyramid_volume at
                    0x7f0ce1af4e60>(1, 1)
E    +     where <function pyramid_volume at
                  0x7f0ce1af4e60> = s.pyramid_volume";

fn config_toml(opts: &DemoOptions) -> String {
    let mut command: Vec<String> = opts.runner_command.clone();
    command.extend(["--suite", "{suite}", "--dir", "{dir}", "--out", "{out}"].map(String::from));
    let command = command.iter().map(|a| format!("{a:?}")).collect::<Vec<_>>().join(", ");
    format!(
        r#"schema_version = 1
course = "ABC"
year = "2014-15"
contact = "course-help@uni.email.address"
admin = "admin@uni.email.address"
sender = "abc@uni.email.address"
timezone = "Europe/London"
roster = "roster.csv"
manifest = "manifest.toml"
suites_dir = "suites"
tick_interval_s = 60
default_runner = "fixture"

[inbox]
mail_dir = "inbox/mail"
drop_dir = "inbox/drop"

[sandbox]
cpu_seconds = {cpu}
address_space_bytes = 268435456
file_size_bytes = 1048576
open_files = 64

[runners.fixture]
command = [{command}]

[transport]
kind = "file_drop"
dir = "outbox"

[policies]
late = "record_zero"
style_base = 2
stale_lock_max_age_s = 300
"#,
        cpu = opts.cpu_seconds,
    )
}

fn manifest_toml() -> String {
    let mut m = String::from("schema_version = 1\n");
    let questions = |names: &[&str]| {
        names
            .iter()
            .map(|n| format!("\n[[assignment.question]]\nname = \"{n}\"\nweight = 1\n"))
            .collect::<String>()
    };
    m.push_str(&format!(
        "\n[[assignment]]\nsubject = \"Training 1\"\nkind = \"training\"\n\
         required_files = [\"training1.py\"]\nsuite = \"training1\"\n{}",
        questions(&TRAINING_QUESTIONS)
    ));
    for (week, lab) in LABS.iter().enumerate() {
        // Fridays from 31 October 2014; the M site hands in seven hours earlier.
        let day = chrono::NaiveDate::from_ymd_opt(2014, 10, 31).expect("valid date")
            + chrono::Duration::weeks(week as i64);
        let session = day - chrono::Duration::days(1);
        m.push_str(&format!(
            "\n[[assignment]]\nsubject = \"Lab {lab}\"\nkind = \"laboratory\"\n\
             required_files = [\"lab{lab}.py\"]\nsuite = \"lab{lab}\"\nstyle = \"penalize\"\n\
             deadlines = {{ S = \"{day} 16:00:00\", M = \"{day} 09:00:00\" }}\n\
             sessions = [\"{session} 10:00:00\"]\n{}",
            questions(&LAB_QUESTIONS)
        ));
    }
    m.push_str(&format!(
        "\n[[assignment]]\nsubject = \"Exam\"\nkind = \"exam\"\nrequired_files = [\"exam.py\"]\n\
         suite = \"exam\"\n{}",
        questions(&TRAINING_QUESTIONS)
    ));
    m.push_str(
        "\n[[assignment]]\nsubject = \"Project\"\nkind = \"laboratory\"\n\
         required_files = [\"project.py\"]\n\
         deadlines = { S = \"2015-01-16 16:00:00\", M = \"2015-01-16 09:00:00\" }\n",
    );
    m
}

fn report(questions: &[&str], passed: &[bool], traceback: &str, style: u32) -> Value {
    let qs: Vec<Value> = questions
        .iter()
        .zip(passed)
        .map(|(n, p)| {
            let tb = if *p { String::new() } else { traceback.to_string() };
            json!({"name": n, "passed": p, "traceback": tb})
        })
        .collect();
    json!({"schema_version": 1, "status": "ok", "questions": qs, "style_error_count": style, "duration_s": 0.05})
}

/// The canned reports of one suite.
pub fn suite_json(suite_id: &str, questions: &[&str]) -> Value {
    let generic = format!("{}\nE   AssertionError", questions[2]);
    let q3_trace = if questions == TRAINING_QUESTIONS { PYRAMID_TRACEBACK } else { &generic };
    json!({
        "suite_id": suite_id,
        "default": "all_pass",
        "reports": {
            "all_pass": report(questions, &[true, true, true], "", 0),
            "q3_fail": report(questions, &[true, true, false], q3_trace, 0),
            "only_q1": report(questions, &[true, false, false], "E   AssertionError", 0),
            "style": report(questions, &[true, true, true], "", 3),
            "syntax": {
                "schema_version": 1,
                "status": "syntax_error",
                "questions": [],
                "style_error_count": 0,
                "duration_s": 0.01,
                "detail": "  File \"submission.py\", line 1\n    def f(:\n          ^\nSyntaxError: invalid syntax"
            }
        }
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, text).at(path)
}

/// Write the demonstration course into `root`.
pub fn write_demo(root: &Path, opts: &DemoOptions) -> Result<()> {
    let config = root.join(DEFAULT_CONFIG_FILE);
    if config.exists() && !opts.force {
        return Err(Error::config(format!("{} already exists", config.display())));
    }
    if opts.runner_command.is_empty() {
        return Err(Error::config("empty runner command"));
    }
    write(&config, &config_toml(opts))?;
    write(&root.join("roster.csv"), ROSTER)?;
    write(&root.join("manifest.toml"), &manifest_toml())?;
    let mut suites = vec![("training1".to_string(), &TRAINING_QUESTIONS), ("exam".to_string(), &TRAINING_QUESTIONS)];
    suites.extend(LABS.iter().map(|l| (format!("lab{l}"), &LAB_QUESTIONS)));
    for (id, questions) in suites {
        let text = serde_json::to_string_pretty(&suite_json(&id, questions.as_slice())).expect("json");
        write(&root.join("suites").join(&id).join(SUITE_FILE), &text)?;
    }
    for dir in ["inbox/mail", "inbox/drop", "outbox"] {
        fs::create_dir_all(root.join(dir)).at(root.join(dir))?;
    }
    Ok(())
}
