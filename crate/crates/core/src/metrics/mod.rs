//! Evaluation metrics: mean absolute error, cumulative score, per-age-group
//! MAE tables, and CS curves over a range of error levels.

use std::fmt;

use serde::Serialize;

#[derive(Debug)]
pub enum MetricsError {
    Empty { op: &'static str },
    LengthMismatch { left: usize, right: usize },
    InvalidArg { what: &'static str, detail: String },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::Empty { op } => write!(f, "{op}: empty input"),
            MetricsError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} targets vs {right} predictions")
            }
            MetricsError::InvalidArg { what, detail } => write!(f, "invalid {what}: {detail}"),
        }
    }
}

impl std::error::Error for MetricsError {}

pub type MetricsResult<T> = Result<T, MetricsError>;

fn check_pair(op: &'static str, y: &[f64], yhat: &[f64]) -> MetricsResult<()> {
    if y.len() != yhat.len() {
        return Err(MetricsError::LengthMismatch {
            left: y.len(),
            right: yhat.len(),
        });
    }
    if y.is_empty() {
        return Err(MetricsError::Empty { op });
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(y: &[f64], yhat: &[f64]) -> MetricsResult<f64> {
    check_pair("mae", y, yhat)?;
    let sum: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / y.len() as f64)
}

/// Cumulative score: the percentage of subjects with `|error| <= alpha`.
pub fn cs(y: &[f64], yhat: &[f64], alpha: f64) -> MetricsResult<f64> {
    check_pair("cs", y, yhat)?;
    if !(alpha >= 0.0) {
        return Err(MetricsError::InvalidArg {
            what: "alpha",
            detail: format!("{alpha} must be nonnegative"),
        });
    }
    let hits = y
        .iter()
        .zip(yhat)
        .filter(|(a, b)| (*a - *b).abs() <= alpha)
        .count();
    Ok(100.0 * hits as f64 / y.len() as f64)
}

/// One age bin of a group-MAE table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` when the bin holds no subjects ("n/a" in tables).
    pub mae: Option<f64>,
}

/// Per-bin MAE. Bins are `lo <= y < hi` with the final bin closed at its
/// upper edge; subjects matching no bin are counted separately.
pub fn group_mae(
    y: &[f64],
    yhat: &[f64],
    bins: &[(f64, f64)],
) -> MetricsResult<(Vec<GroupRow>, usize)> {
    check_pair("group_mae", y, yhat)?;
    if bins.is_empty() {
        return Err(MetricsError::Empty { op: "group_mae bins" });
    }
    for (i, &(lo, hi)) in bins.iter().enumerate() {
        if !(lo < hi) {
            return Err(MetricsError::InvalidArg {
                what: "bins",
                detail: format!("bin {i} [{lo}, {hi}) is empty or reversed"),
            });
        }
        for &(lo2, hi2) in &bins[i + 1..] {
            if lo < hi2 && lo2 < hi {
                return Err(MetricsError::InvalidArg {
                    what: "bins",
                    detail: format!("bins [{lo}, {hi}) and [{lo2}, {hi2}) overlap"),
                });
            }
        }
    }
    let last = bins.len() - 1;
    let member = |bin: usize, age: f64| -> bool {
        let (lo, hi) = bins[bin];
        if bin == last {
            age >= lo && age <= hi
        } else {
            age >= lo && age < hi
        }
    };
    let mut rows: Vec<GroupRow> = bins
        .iter()
        .map(|&(lo, hi)| GroupRow {
            label: format!("{}-{}", trim_num(lo), trim_num(hi)),
            lo,
            hi,
            count: 0,
            mae: None,
        })
        .collect();
    let mut sums = vec![0.0f64; bins.len()];
    let mut outside = 0usize;
    for (&age, &pred) in y.iter().zip(yhat) {
        match (0..bins.len()).find(|&b| member(b, age)) {
            Some(b) => {
                rows[b].count += 1;
                sums[b] += (age - pred).abs();
            }
            None => outside += 1,
        }
    }
    for (row, sum) in rows.iter_mut().zip(sums) {
        if row.count > 0 {
            row.mae = Some(sum / row.count as f64);
        }
    }
    Ok((rows, outside))
}

fn trim_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// CS samples at `alpha = 0, step, 2*step, ..., alpha_max`.
pub fn cs_curve(
    y: &[f64],
    yhat: &[f64],
    alpha_max: f64,
    step: f64,
) -> MetricsResult<Vec<(f64, f64)>> {
    if !(step > 0.0) || !(alpha_max >= 0.0) {
        return Err(MetricsError::InvalidArg {
            what: "cs_curve",
            detail: format!("step {step} must be positive, alpha_max {alpha_max} nonnegative"),
        });
    }
    let count = (alpha_max / step + 1e-9).floor() as usize + 1;
    (0..count)
        .map(|i| {
            let alpha = (i as f64 * step).min(alpha_max);
            Ok((alpha, cs(y, yhat, alpha)?))
        })
        .collect()
}

/// Full evaluation summary for one model on one subject set. The overall
/// MAE is subject-weighted; the mean of per-group MAEs is reported
/// separately because the two differ whenever bins are unbalanced.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub overall_mae: f64,
    pub group_mean_mae: Option<f64>,
    pub groups: Vec<GroupRow>,
    pub outside_bins: usize,
    /// `(alpha, cs_percent)` samples, percents rounded to two decimals.
    pub cs: Vec<(f64, f64)>,
}

pub fn evaluate(
    y: &[f64],
    yhat: &[f64],
    bins: &[(f64, f64)],
    alpha_max: f64,
    alpha_step: f64,
) -> MetricsResult<EvalReport> {
    let overall_mae = mae(y, yhat)?;
    let (groups, outside_bins) = group_mae(y, yhat, bins)?;
    let curve = cs_curve(y, yhat, alpha_max, alpha_step)?;
    let populated: Vec<f64> = groups.iter().filter_map(|r| r.mae).collect();
    let group_mean_mae = (!populated.is_empty())
        .then(|| populated.iter().sum::<f64>() / populated.len() as f64);
    Ok(EvalReport {
        n: y.len(),
        overall_mae,
        group_mean_mae,
        groups,
        outside_bins,
        cs: curve
            .into_iter()
            .map(|(a, p)| (a, (p * 100.0).round() / 100.0))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mae_matches_the_documented_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.5, 2.5]).unwrap(), 0.5);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cs_counts_inclusively() {
        let y = [0.0, 0.0, 0.0];
        let yhat = [0.5, 1.5, 2.5];
        let got = cs(&y, &yhat, 1.5).unwrap();
        assert!((got - 200.0 / 3.0).abs() < 1e-9, "{got}");
        assert_eq!(cs(&y, &y, 0.0).unwrap(), 100.0);
        assert!(cs(&y, &yhat, -0.1).is_err());
    }

    #[test]
    fn metrics_match_brute_force_recomputation_on_100_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(1..40);
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..6.0)).collect();
            let yhat: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..6.0)).collect();

            let mut sum = 0.0;
            for i in 0..n {
                sum += (y[i] - yhat[i]).abs();
            }
            assert_eq!(mae(&y, &yhat).unwrap(), sum / n as f64);

            let alpha = rng.gen_range(0.0..3.0);
            let mut hits = 0;
            for i in 0..n {
                if (y[i] - yhat[i]).abs() <= alpha {
                    hits += 1;
                }
            }
            assert_eq!(cs(&y, &yhat, alpha).unwrap(), 100.0 * hits as f64 / n as f64);

            let bins = [(0.0, 2.0), (2.0, 4.0), (4.0, 6.0)];
            let (rows, outside) = group_mae(&y, &yhat, &bins).unwrap();
            assert_eq!(outside, 0);
            for (b, &(lo, hi)) in bins.iter().enumerate() {
                let mut cnt = 0;
                let mut s = 0.0;
                for i in 0..n {
                    let inside = if b == 2 {
                        y[i] >= lo && y[i] <= hi
                    } else {
                        y[i] >= lo && y[i] < hi
                    };
                    if inside {
                        cnt += 1;
                        s += (y[i] - yhat[i]).abs();
                    }
                }
                assert_eq!(rows[b].count, cnt);
                match rows[b].mae {
                    Some(m) => assert_eq!(m, s / cnt as f64),
                    None => assert_eq!(cnt, 0),
                }
            }
        }
    }

    #[test]
    fn group_membership_is_half_open_with_a_closed_last_bin() {
        let y = [0.0, 1.0, 2.0];
        let yhat = [0.5, 1.5, 2.5];
        let (rows, outside) = group_mae(&y, &yhat, &[(0.0, 1.0), (1.0, 2.0)]).unwrap();
        assert_eq!(rows[0].count, 1, "0 lands in [0,1)");
        assert_eq!(rows[1].count, 2, "1 in [1,2), 2 on the closed upper edge");
        assert_eq!(outside, 0);
        assert_eq!(rows[0].label, "0-1");

        let (rows, outside) = group_mae(&y, &yhat, &[(0.5, 1.5)]).unwrap();
        assert_eq!(rows[0].count, 1);
        assert_eq!(outside, 2, "subjects outside all bins are counted");
        assert_eq!(rows[0].mae, Some(0.5));
    }

    #[test]
    fn degenerate_bins_are_rejected() {
        let y = [1.0];
        assert!(group_mae(&y, &y, &[]).is_err());
        assert!(group_mae(&y, &y, &[(2.0, 2.0)]).is_err());
        assert!(group_mae(&y, &y, &[(0.0, 2.0), (1.0, 3.0)]).is_err());
    }

    #[test]
    fn empty_bins_report_no_mae() {
        let (rows, _) = group_mae(&[5.0], &[4.0], &[(0.0, 1.0), (4.0, 6.0)]).unwrap();
        assert_eq!(rows[0].count, 0);
        assert_eq!(rows[0].mae, None);
        assert_eq!(rows[1].mae, Some(1.0));
    }

    #[test]
    fn curve_spans_zero_to_alpha_max() {
        let y = [0.0, 0.0];
        let yhat = [0.4, 1.2];
        let curve = cs_curve(&y, &yhat, 2.0, 0.1).unwrap();
        assert_eq!(curve.len(), 21);
        assert_eq!(curve[0].0, 0.0);
        assert!((curve[20].0 - 2.0).abs() < 1e-12);
        assert_eq!(curve[0].1, 0.0);
        assert_eq!(curve[20].1, 100.0, "alpha_max exceeds the max error");
        for w in curve.windows(2) {
            assert!(w[1].1 >= w[0].1, "cs must be nondecreasing in alpha");
        }
        let perfect = cs_curve(&y, &y, 2.0, 0.5).unwrap();
        assert!(perfect.iter().all(|&(_, p)| p == 100.0));
    }

    #[test]
    fn overall_mae_is_the_count_weighted_mean_of_group_maes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..6.0)).collect();
            let yhat: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..6.0)).collect();
            let bins = [(0.0, 1.5), (1.5, 3.0), (3.0, 6.0)];
            let (rows, outside) = group_mae(&y, &yhat, &bins).unwrap();
            assert_eq!(outside, 0);
            let weighted: f64 = rows
                .iter()
                .filter_map(|r| r.mae.map(|m| m * r.count as f64))
                .sum::<f64>()
                / n as f64;
            assert!((weighted - mae(&y, &yhat).unwrap()).abs() < 1e-12);
            assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), n);
        }
    }

    #[test]
    fn report_carries_both_averages_and_rounded_cs() {
        let y = [0.0, 1.0, 5.0];
        let yhat = [0.5, 1.0, 2.0];
        let report = evaluate(&y, &yhat, &[(0.0, 2.0), (2.0, 6.0)], 2.0, 1.0).unwrap();
        assert_eq!(report.n, 3);
        assert!((report.overall_mae - 3.5 / 3.0).abs() < 1e-12);
        // Group means: [0.25, 3.0] -> 1.625, different from overall.
        assert_eq!(report.group_mean_mae, Some(1.625));
        let cs1 = report.cs[1].1;
        assert_eq!(cs1, 66.67, "two-thirds rounded to two decimals");
    }

    proptest! {
        #[test]
        fn cs_is_monotone_and_bounded(
            pairs in proptest::collection::vec((0.0f64..6.0, 0.0f64..6.0), 1..50),
            a in 0.0f64..3.0,
            b in 0.0f64..3.0,
        ) {
            let (y, yhat): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c_lo = cs(&y, &yhat, lo).unwrap();
            let c_hi = cs(&y, &yhat, hi).unwrap();
            prop_assert!(c_lo <= c_hi);
            prop_assert!((0.0..=100.0).contains(&c_lo));
            let max_err = y.iter().zip(&yhat).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert_eq!(cs(&y, &yhat, max_err).unwrap(), 100.0);
        }

        #[test]
        fn groups_partition_all_subjects(
            pairs in proptest::collection::vec((0.0f64..6.0, 0.0f64..6.0), 1..50),
        ) {
            let (y, yhat): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let bins = [(0.0, 2.0), (2.0, 4.0), (4.0, 6.0)];
            let (rows, outside) = group_mae(&y, &yhat, &bins).unwrap();
            prop_assert_eq!(rows.iter().map(|r| r.count).sum::<usize>() + outside, y.len());
            prop_assert_eq!(outside, 0, "bins cover the sampled range");
        }
    }
}
