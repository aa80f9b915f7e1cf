//! Brute-force reference statistics, written independently of the library.

use std::collections::{BTreeMap, BTreeSet};

use gradepipe_core::model::Timestamp;
use gradepipe_core::stats::SubmissionEvent;
use rand::Rng;

use super::at;

/// Position of an event in the stable time order.
fn rank(log: &[&SubmissionEvent], i: usize) -> (Timestamp, usize) {
    (log[i].at, i)
}

pub fn histogram(log: &[SubmissionEvent], key: &str) -> BTreeMap<usize, usize> {
    let rel: Vec<&SubmissionEvent> = log.iter().filter(|e| e.assignment_key == key).collect();
    let students: BTreeSet<&str> = rel.iter().map(|e| e.student_id.as_str()).collect();
    let mut out = BTreeMap::new();
    for k in 1..=rel.len() {
        let n = students
            .iter()
            .filter(|s| rel.iter().filter(|e| e.student_id == **s).count() == k)
            .count();
        if n > 0 {
            out.insert(k, n);
        }
    }
    out
}

pub fn nonunique(log: &[SubmissionEvent], key: &str) -> Vec<(Timestamp, usize)> {
    let rel: Vec<&SubmissionEvent> = log.iter().filter(|e| e.assignment_key == key).collect();
    let mut pts: Vec<(Timestamp, usize, usize)> = (0..rel.len())
        .map(|i| {
            let n = (0..rel.len()).filter(|&j| rank(&rel, j) <= rank(&rel, i)).count();
            (rel[i].at, i, n)
        })
        .collect();
    pts.sort_by_key(|p| (p.0, p.1));
    pts.into_iter().map(|(t, _, n)| (t, n)).collect()
}

pub fn unique(log: &[SubmissionEvent], key: &str) -> Vec<(Timestamp, usize)> {
    let rel: Vec<&SubmissionEvent> = log.iter().filter(|e| e.assignment_key == key).collect();
    let is_first = |i: usize| {
        (0..rel.len()).all(|j| rel[j].student_id != rel[i].student_id || rank(&rel, j) >= rank(&rel, i))
    };
    let firsts: Vec<usize> = (0..rel.len()).filter(|&i| is_first(i)).collect();
    let mut pts: Vec<(Timestamp, usize, usize)> = firsts
        .iter()
        .map(|&i| {
            let n = firsts.iter().filter(|&&j| rank(&rel, j) <= rank(&rel, i)).count();
            (rel[i].at, i, n)
        })
        .collect();
    pts.sort_by_key(|p| (p.0, p.1));
    pts.into_iter().map(|(t, _, n)| (t, n)).collect()
}

/// A random log of up to 500 events over two assignments and 40 students.
pub fn random_log(rng: &mut impl Rng) -> Vec<SubmissionEvent> {
    let n = rng.gen_range(0..=500);
    (0..n)
        .map(|_| SubmissionEvent {
            at: at(2014, 10, 1, 0, 0, 0) + chrono::Duration::minutes(rng.gen_range(0..200)),
            student_id: format!("s{}", rng.gen_range(0..40)),
            assignment_key: ["lab 2", "lab 3"][rng.gen_range(0..2)].to_string(),
        })
        .collect()
}
