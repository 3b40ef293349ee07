//! Scores of estimated break sets, partitions and break times against the truth.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// Correctly classified subjects over `N`.
    pub tp_rate: f64,
    pub f1: f64,
}

/// Break-set detection scores. `F₁ = TP / (TP + (FP + FN)/2)`, taken as 1
/// when both sets are empty.
pub fn metrics_tp_f1(
    estimated: &BTreeSet<usize>,
    truth: &BTreeSet<usize>,
    n: usize,
) -> Result<Classification> {
    if n == 0 {
        return Err(invalid("N must be positive"));
    }
    if estimated.iter().chain(truth).any(|&i| i >= n) {
        return Err(invalid(format!("subject index outside 0..{n}")));
    }
    let tp = estimated.intersection(truth).count();
    let fp = estimated.len() - tp;
    let fn_ = truth.len() - tp;
    let tn = n - tp - fp - fn_;
    let f1 = if tp + fp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp as f64 + 0.5 * (fp + fn_) as f64)
    };
    Ok(Classification {
        tp,
        fp,
        fn_,
        tn,
        tp_rate: (tp + tn) as f64 / n as f64,
        f1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterScores {
    pub purity: f64,
    pub nmi: f64,
    /// Subjects present in both partitions; the normaliser of both scores.
    pub n_common: usize,
}

fn labels(partition: &[Vec<usize>]) -> Result<BTreeMap<usize, usize>> {
    let mut out = BTreeMap::new();
    for (k, members) in partition.iter().enumerate() {
        for &i in members {
            if out.insert(i, k).is_some() {
                return Err(invalid(format!("subject {i} appears in two clusters")));
            }
        }
    }
    Ok(out)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Purity and NMI (base-2 logs) of `estimated` against `truth`, over the
/// subjects the two partitions share. NMI is 1 when both sides are a single cluster.
pub fn metrics_clustering(estimated: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<ClusterScores> {
    let est = labels(estimated)?;
    let tru = labels(truth)?;
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (i, &k) in &est {
        if let Some(&j) = tru.get(i) {
            *table.entry((k, j)).or_default() += 1;
        }
    }
    let n_common: usize = table.values().sum();
    if n_common == 0 {
        return Err(Error::ConditionalMetricUndefined(
            "partitions share no subjects".into(),
        ));
    }
    let n = n_common as f64;
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    let mut row_max: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(k, j), &c) in &table {
        *rows.entry(k).or_default() += c;
        *cols.entry(j).or_default() += c;
        let m = row_max.entry(k).or_default();
        *m = (*m).max(c);
    }
    let purity = row_max.values().sum::<usize>() as f64 / n;
    let h_est = entropy(rows.values().copied(), n);
    let h_true = entropy(cols.values().copied(), n);
    let mutual: f64 = table
        .iter()
        .map(|(&(k, j), &c)| {
            let p = c as f64 / n;
            let (pk, pj) = (rows[&k] as f64 / n, cols[&j] as f64 / n);
            p * (p / (pk * pj)).log2()
        })
        .sum();
    let nmi = if h_est + h_true == 0.0 {
        1.0
    } else {
        (2.0 * mutual / (h_est + h_true)).clamp(0.0, 1.0)
    };
    Ok(ClusterScores {
        purity,
        nmi,
        n_common,
    })
}

/// Mean of `(b̂_k - b_k)²` over groups matched in order.
pub fn metric_msd(estimated: &[usize], truth: &[usize]) -> Result<f64> {
    if estimated.len() != truth.len() {
        return Err(Error::ConditionalMetricUndefined(format!(
            "{} estimated groups against {} true groups",
            estimated.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::ConditionalMetricUndefined("no groups".into()));
    }
    let sum: f64 = estimated
        .iter()
        .zip(truth)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / truth.len() as f64)
}

/// Mean of `(τ̂_i - τ_i)²` over subjects that have both an estimate and a true break.
pub fn subject_msd(
    tau_hat: &BTreeMap<usize, usize>,
    tau: &BTreeMap<usize, usize>,
) -> Result<f64> {
    let pairs: Vec<(usize, usize)> = tau_hat
        .iter()
        .filter_map(|(i, &t)| tau.get(i).map(|&s| (t, s)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::ConditionalMetricUndefined(
            "no correctly detected break subjects".into(),
        ));
    }
    let (est, tru): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    metric_msd(&est, &tru)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn perfect_detection() {
        let c = metrics_tp_f1(&set(&[1, 3]), &set(&[1, 3]), 10).unwrap();
        assert_eq!((c.tp_rate, c.f1), (1.0, 1.0));
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 0, 0, 8));
    }

    #[test]
    fn nothing_detected() {
        let c = metrics_tp_f1(&set(&[]), &set(&[0]), 4).unwrap();
        assert_eq!(c.f1, 0.0);
        assert_eq!(c.tp_rate, 0.75);
    }

    #[test]
    fn half_overlap() {
        // truth {1,2}, estimate {2,3} in 1-based terms
        let c = metrics_tp_f1(&set(&[1, 2]), &set(&[0, 1]), 4).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 1));
        assert_eq!(c.f1, 0.5);
        assert_eq!(c.tp_rate, 0.5);
    }

    #[test]
    fn empty_sets_agree() {
        let c = metrics_tp_f1(&set(&[]), &set(&[]), 5).unwrap();
        assert_eq!((c.tp_rate, c.f1), (1.0, 1.0));
        assert!(metrics_tp_f1(&set(&[5]), &set(&[]), 5).is_err());
    }

    #[test]
    fn identical_partitions() {
        let p = vec![vec![0, 1], vec![2, 3, 4], vec![5]];
        let s = metrics_clustering(&p, &p).unwrap();
        assert!((s.purity - 1.0).abs() < 1e-15);
        assert!((s.nmi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_cluster_against_many_has_no_information() {
        let est = vec![(0..9).collect::<Vec<_>>()];
        let truth = vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]];
        let s = metrics_clustering(&est, &truth).unwrap();
        assert_eq!(s.nmi, 0.0);
        assert!((s.purity - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn two_by_two_table() {
        // contingency [[2, 1], [1, 2]], N = 6
        let est = vec![vec![0, 1, 2], vec![3, 4, 5]];
        let truth = vec![vec![0, 1, 3], vec![2, 4, 5]];
        let s = metrics_clustering(&est, &truth).unwrap();
        assert!((s.purity - 4.0 / 6.0).abs() < 1e-15);
        // I = 2·(2/6)log2(4/3) + 2·(1/6)log2(2/3), H = 1 on both sides
        let mutual = (4.0 / 6.0) * (4.0f64 / 3.0).log2() + (2.0 / 6.0) * (2.0f64 / 3.0).log2();
        assert!((s.nmi - mutual).abs() < 1e-12, "{} vs {mutual}", s.nmi);
    }

    #[test]
    fn clustering_over_common_subjects() {
        let est = vec![vec![0, 1], vec![7]];
        let truth = vec![vec![0, 1], vec![2]];
        let s = metrics_clustering(&est, &truth).unwrap();
        assert_eq!(s.n_common, 2);
        assert_eq!(s.nmi, 1.0);
        assert!(metrics_clustering(&[vec![9]], &truth).is_err());
        assert!(metrics_clustering(&[vec![0], vec![0]], &truth).is_err());
    }

    #[test]
    fn msd_arithmetic() {
        assert_eq!(metric_msd(&[50, 100, 150], &[50, 100, 150]).unwrap(), 0.0);
        assert_eq!(metric_msd(&[51, 101, 151], &[50, 100, 150]).unwrap(), 1.0);
        assert!((metric_msd(&[50, 101, 152], &[50, 100, 150]).unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            metric_msd(&[1, 2], &[1, 2, 3]),
            Err(Error::ConditionalMetricUndefined(_))
        ));
    }

    #[test]
    fn subject_level_msd() {
        let est: BTreeMap<usize, usize> = [(0, 10), (1, 12), (5, 40)].into();
        let tru: BTreeMap<usize, usize> = [(0, 10), (1, 10), (2, 30)].into();
        assert_eq!(subject_msd(&est, &tru).unwrap(), 2.0);
    }
}
