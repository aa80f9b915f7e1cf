//! Mark arithmetic: weighted totals, the style penalty, averages and
//! lateness.
//!
//! All rounding is to the nearest integer with ties away from zero, done on
//! exact rationals so `2/3` renders as 67 and `12.5` as 13.

use chrono::Duration;
use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::model::{Points, StylePolicy, Timestamp};

/// Weighted result of one assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssignmentMark {
    pub points: Points,
    pub total: Points,
    pub percent: u32,
}

/// Round a non-negative rational to the nearest integer, ties away from zero.
pub fn round_half_away(x: Ratio<u64>) -> u64 {
    let (n, d) = (*x.numer() as u128, *x.denom() as u128);
    ((2 * n + d) / (2 * d)) as u64
}

fn percent_of(points: Points, total: Points) -> Ratio<u64> {
    points.0 * Ratio::from_integer(100) / total.0
}

pub fn compute_assignment_mark(results: &[(Points, bool)]) -> Result<AssignmentMark> {
    if results.is_empty() {
        return Err(Error::contract("assignment mark needs at least one question"));
    }
    if results.iter().any(|(w, _)| w.is_zero()) {
        return Err(Error::contract("question weights must be positive"));
    }
    let total = results.iter().fold(Ratio::from_integer(0), |acc, (w, _)| acc + w.0);
    let points = results
        .iter()
        .filter(|(_, passed)| *passed)
        .fold(Ratio::from_integer(0), |acc, (w, _)| acc + w.0);
    let (points, total) = (Points(points), Points(total));
    Ok(AssignmentMark {
        points,
        total,
        percent: round_half_away(percent_of(points, total)) as u32,
    })
}

/// `base^-n_err` as an exact rational, or `None` when the power overflows
/// (the factor is then small enough that any percent rounds to zero).
fn penalty_factor(base: u32, n_err: u32) -> Option<Ratio<u64>> {
    (base as u64).checked_pow(n_err).map(|d| Ratio::new(1, d.max(1)))
}

fn penalize(value: Ratio<u64>, n_err: u32, policy: StylePolicy) -> u32 {
    match policy {
        StylePolicy::Off => round_half_away(value) as u32,
        StylePolicy::Penalize { base } => match penalty_factor(base, n_err) {
            Some(f) => round_half_away(value * f) as u32,
            None => 0,
        },
    }
}

/// Penalise an already-rounded percentage.
pub fn apply_style_penalty(raw_percent: u32, n_err: u32, policy: StylePolicy) -> u32 {
    penalize(Ratio::from_integer(raw_percent as u64), n_err, policy)
}

/// Percentage after weighting and the style penalty, rounded once at the end.
pub fn penalized_percent(mark: &AssignmentMark, n_err: u32, policy: StylePolicy) -> u32 {
    penalize(percent_of(mark.points, mark.total), n_err, policy)
}

pub fn compute_average(marks: &[u32]) -> Result<u32> {
    if marks.is_empty() {
        return Err(Error::contract("average of an empty mark list"));
    }
    let sum: u64 = marks.iter().map(|&m| m as u64).sum();
    Ok(round_half_away(Ratio::new(sum, marks.len() as u64)) as u32)
}

/// How late a submission was. Submitting exactly at the deadline is on time.
pub fn compute_lateness(deadline: Timestamp, submitted_at: Timestamp) -> Option<Duration> {
    (submitted_at > deadline).then(|| submitted_at - deadline)
}

/// `H:MM:SS` with unpadded, unbounded hours.
pub fn format_hms(d: Duration) -> String {
    let secs = d.num_seconds().max(0);
    format!("{}:{:02}:{:02}", secs / 3600, (secs / 60) % 60, secs % 60)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn w(n: u64) -> Points {
        Points::integer(n)
    }

    #[test]
    fn reference_marks() {
        let all = compute_assignment_mark(&[(w(1), true), (w(1), true), (w(1), true)]).unwrap();
        assert_eq!((all.points, all.total, all.percent), (w(3), w(3), 100));
        let two = compute_assignment_mark(&[(w(1), true), (w(1), true), (w(1), false)]).unwrap();
        assert_eq!((two.points, two.total, two.percent), (w(2), w(3), 67));
        let weighted = compute_assignment_mark(&[(w(2), false), (w(1), true)]).unwrap();
        assert_eq!((weighted.points, weighted.total, weighted.percent), (w(1), w(3), 33));
    }

    #[test]
    fn mark_contract_violations() {
        assert!(compute_assignment_mark(&[]).is_err());
        assert!(compute_assignment_mark(&[(Points::zero(), true)]).is_err());
    }

    #[test]
    fn style_penalty_examples() {
        let p = StylePolicy::Penalize { base: 2 };
        assert_eq!(apply_style_penalty(80, 0, p), 80);
        assert_eq!(apply_style_penalty(80, 1, p), 40);
        assert_eq!(apply_style_penalty(100, 3, p), 13);
        assert_eq!(apply_style_penalty(100, 3, StylePolicy::Off), 100);
        assert_eq!(apply_style_penalty(100, 200, p), 0);
    }

    #[test]
    fn penalty_applies_before_rounding() {
        // 2/3 of 100 halved is 33.33.., not round(67 / 2) = 34.
        let m = compute_assignment_mark(&[(w(1), true), (w(1), true), (w(1), false)]).unwrap();
        assert_eq!(penalized_percent(&m, 1, StylePolicy::Penalize { base: 2 }), 33);
        assert_eq!(apply_style_penalty(67, 1, StylePolicy::Penalize { base: 2 }), 34);
    }

    #[test]
    fn averages() {
        assert_eq!(compute_average(&[25, 31, 0, 80, 77, 75]).unwrap(), 48);
        assert_eq!(compute_average(&[100]).unwrap(), 100);
        assert_eq!(compute_average(&[1, 2]).unwrap(), 2);
        assert!(compute_average(&[]).is_err());
    }

    #[test]
    fn lateness() {
        let deadline = chrono::Utc.with_ymd_and_hms(2014, 11, 14, 16, 0, 0).unwrap();
        let late = chrono::Utc.with_ymd_and_hms(2014, 11, 14, 20, 39, 2).unwrap();
        assert_eq!(
            compute_lateness(deadline, late).map(format_hms).as_deref(),
            Some("4:39:02")
        );
        assert_eq!(compute_lateness(deadline, deadline), None);
        assert_eq!(compute_lateness(deadline, deadline - Duration::seconds(1)), None);
        assert_eq!(format_hms(Duration::hours(30) + Duration::seconds(5)), "30:00:05");
    }

    fn results() -> impl Strategy<Value = Vec<(u64, bool)>> {
        prop::collection::vec((1u64..50, any::<bool>()), 1..12)
    }

    proptest! {
        #[test]
        fn mark_is_permutation_and_scale_invariant(rs in results(), c in 1u64..20, rot in 0usize..12) {
            let base: Vec<_> = rs.iter().map(|&(wt, p)| (w(wt), p)).collect();
            let mut rotated = base.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            rotated.reverse();
            let scaled: Vec<_> = rs.iter().map(|&(wt, p)| (w(wt * c), p)).collect();
            let a = compute_assignment_mark(&base).unwrap();
            prop_assert_eq!(a, compute_assignment_mark(&rotated).unwrap());
            prop_assert_eq!(a.percent, compute_assignment_mark(&scaled).unwrap().percent);
            prop_assert!(a.points <= a.total);
        }

        #[test]
        fn all_pass_is_100_all_fail_is_0(ws in prop::collection::vec(1u64..50, 1..12)) {
            let pass: Vec<_> = ws.iter().map(|&x| (w(x), true)).collect();
            let fail: Vec<_> = ws.iter().map(|&x| (w(x), false)).collect();
            prop_assert_eq!(compute_assignment_mark(&pass).unwrap().percent, 100);
            prop_assert_eq!(compute_assignment_mark(&fail).unwrap().percent, 0);
        }

        #[test]
        fn penalty_monotone_and_bounded(raw in 0u32..=100, n in 0u32..40, base in 1u32..5) {
            let p = StylePolicy::Penalize { base };
            let now = apply_style_penalty(raw, n, p);
            prop_assert!(now <= raw);
            prop_assert!(apply_style_penalty(raw, n + 1, p) <= now);
        }

        #[test]
        fn rounding_matches_float_reference(n in 0u64..100_000, d in 1u64..1000) {
            // Exact halves are representable in f64 for these magnitudes.
            let x = n as f64 / d as f64;
            prop_assert_eq!(round_half_away(Ratio::new(n, d)) as f64, x.round());
        }
    }
}
