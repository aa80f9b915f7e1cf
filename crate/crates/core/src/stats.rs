//! Submission-activity statistics for lecturers.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::model::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubmissionEvent {
    pub at: Timestamp,
    pub student_id: String,
    pub assignment_key: String,
}

/// Number of students (value) that submitted exactly `k` times (key).
pub fn submission_histogram(log: &[SubmissionEvent], assignment: &str) -> BTreeMap<usize, usize> {
    let mut per_student: HashMap<&str, usize> = HashMap::new();
    for e in log.iter().filter(|e| e.assignment_key == assignment) {
        *per_student.entry(&e.student_id).or_default() += 1;
    }
    let mut bins = BTreeMap::new();
    for count in per_student.into_values() {
        *bins.entry(count).or_default() += 1;
    }
    bins
}

/// Cumulative step series: one point per counted event.
pub type Series = Vec<(Timestamp, usize)>;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Timelines {
    /// Counts only each student's first submission.
    pub unique: Series,
    /// Counts every submission.
    pub nonunique: Series,
}

pub fn submission_timelines(log: &[SubmissionEvent], assignment: &str) -> Timelines {
    let mut events: Vec<&SubmissionEvent> =
        log.iter().filter(|e| e.assignment_key == assignment).collect();
    // Stable: ties keep input order.
    events.sort_by_key(|e| e.at);

    let mut seen = HashSet::new();
    let mut out = Timelines::default();
    for (i, e) in events.iter().enumerate() {
        out.nonunique.push((e.at, i + 1));
        if seen.insert(e.student_id.as_str()) {
            out.unique.push((e.at, seen.len()));
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force reference implementations, deliberately naive.
    use super::*;

    pub fn histogram(log: &[SubmissionEvent], assignment: &str) -> BTreeMap<usize, usize> {
        let filtered: Vec<&SubmissionEvent> =
            log.iter().filter(|e| e.assignment_key == assignment).collect();
        let mut students: Vec<&str> = Vec::new();
        for e in &filtered {
            if !students.contains(&e.student_id.as_str()) {
                students.push(&e.student_id);
            }
        }
        let mut bins = BTreeMap::new();
        for s in students {
            let mut count = 0;
            for e in &filtered {
                if e.student_id == s {
                    count += 1;
                }
            }
            *bins.entry(count).or_insert(0) += 1;
        }
        bins
    }

    /// Recomputes both cumulative counts from scratch for each event in
    /// time order, scanning the whole prefix every time.
    pub fn timelines(log: &[SubmissionEvent], assignment: &str) -> Timelines {
        let filtered: Vec<&SubmissionEvent> =
            log.iter().filter(|e| e.assignment_key == assignment).collect();
        // Order: by instant, ties by input position (insertion sort is stable).
        let mut order: Vec<usize> = Vec::new();
        for i in 0..filtered.len() {
            let mut pos = order.len();
            while pos > 0 && filtered[order[pos - 1]].at > filtered[i].at {
                pos -= 1;
            }
            order.insert(pos, i);
        }
        let mut out = Timelines::default();
        for (k, &idx) in order.iter().enumerate() {
            let prefix = &order[..=k];
            let e = filtered[idx];
            out.nonunique.push((e.at, prefix.len()));
            let earlier_same = prefix[..k]
                .iter()
                .any(|&j| filtered[j].student_id == e.student_id);
            if !earlier_same {
                let mut distinct: Vec<&str> = Vec::new();
                for &j in prefix {
                    if !distinct.contains(&filtered[j].student_id.as_str()) {
                        distinct.push(&filtered[j].student_id);
                    }
                }
                out.unique.push((e.at, distinct.len()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn ev(secs: i64, student: &str) -> SubmissionEvent {
        SubmissionEvent {
            at: Utc.timestamp_opt(1_400_000_000 + secs, 0).unwrap(),
            student_id: student.into(),
            assignment_key: "lab 1".into(),
        }
    }

    #[test]
    fn histogram_examples() {
        let log = vec![ev(1, "A"), ev(2, "B"), ev(3, "B"), ev(4, "C"), ev(5, "C")];
        assert_eq!(submission_histogram(&log, "lab 1"), BTreeMap::from([(1, 1), (2, 2)]));
        assert!(submission_histogram(&[], "lab 1").is_empty());
        assert!(submission_histogram(&log, "lab 2").is_empty());
    }

    #[test]
    fn timeline_examples() {
        let log = vec![ev(3, "B"), ev(1, "A"), ev(2, "A")];
        let t = submission_timelines(&log, "lab 1");
        let at = |s: i64| Utc.timestamp_opt(1_400_000_000 + s, 0).unwrap();
        assert_eq!(t.unique, vec![(at(1), 1), (at(3), 2)]);
        assert_eq!(t.nonunique, vec![(at(1), 1), (at(2), 2), (at(3), 3)]);
        assert_eq!(submission_timelines(&[], "lab 1"), Timelines::default());
    }

    fn logs() -> impl Strategy<Value = Vec<SubmissionEvent>> {
        prop::collection::vec((0i64..400, 0u8..25, 0u8..3), 0..500).prop_map(|raw| {
            raw.into_iter()
                .map(|(t, s, a)| SubmissionEvent {
                    at: Utc.timestamp_opt(1_400_000_000 + t, 0).unwrap(),
                    student_id: format!("s{s}"),
                    assignment_key: format!("lab {a}"),
                })
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn histogram_matches_oracle(log in logs()) {
            let h = submission_histogram(&log, "lab 1");
            prop_assert_eq!(&h, &oracle::histogram(&log, "lab 1"));
            let events = log.iter().filter(|e| e.assignment_key == "lab 1").count();
            prop_assert_eq!(h.iter().map(|(k, n)| k * n).sum::<usize>(), events);
        }

        #[test]
        fn timelines_match_oracle(log in logs()) {
            let t = submission_timelines(&log, "lab 1");
            prop_assert_eq!(&t, &oracle::timelines(&log, "lab 1"));
            let last_u = t.unique.last().map_or(0, |p| p.1);
            let last_n = t.nonunique.last().map_or(0, |p| p.1);
            prop_assert!(last_u <= last_n);
            let distinct = submission_histogram(&log, "lab 1").values().sum::<usize>();
            prop_assert_eq!(last_u, distinct);
            prop_assert_eq!(last_u == last_n, submission_histogram(&log, "lab 1").keys().all(|&k| k == 1));
        }
    }
}
