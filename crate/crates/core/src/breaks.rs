//! Post-rejection inference: which subjects break, when, and in which groups.
//!
//! Subjects whose sup-CUSUM reaches the threshold get a break time from the
//! argmax of their own CUSUM objective. Those break times are clustered by
//! cutting the `K - 1` largest gaps in their sorted sequence, `K` is chosen
//! by a penalised fit criterion over piecewise-constant step models, and each
//! group finally gets a pooled break estimate from the summed objectives of
//! its members.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cusum::{subject_objective, subject_objectives};
use crate::error::{invalid, Error, Result};
use crate::panel::{Curve, FunctionalPanel};

/// Classification and break times. Subject indices are 0-based in memory
/// and 1-based in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BreakReportWire", into = "BreakReportWire")]
pub struct BreakReport {
    pub with_breaks: BTreeSet<usize>,
    pub without_breaks: BTreeSet<usize>,
    /// Break time in `1..=T-1` for every subject in `with_breaks`.
    pub tau_hat: BTreeMap<usize, usize>,
    pub sup_stats: Vec<f64>,
    pub threshold: f64,
}

#[derive(Serialize, Deserialize)]
struct BreakReportWire {
    with_breaks: Vec<usize>,
    without_breaks: Vec<usize>,
    tau_hat: BTreeMap<usize, usize>,
    sup_stats: Vec<f64>,
    threshold: f64,
}

impl From<BreakReport> for BreakReportWire {
    fn from(r: BreakReport) -> Self {
        Self {
            with_breaks: r.with_breaks.iter().map(|i| i + 1).collect(),
            without_breaks: r.without_breaks.iter().map(|i| i + 1).collect(),
            tau_hat: r.tau_hat.iter().map(|(i, t)| (i + 1, *t)).collect(),
            sup_stats: r.sup_stats,
            threshold: r.threshold,
        }
    }
}

fn zero_based(ix: usize) -> Result<usize> {
    ix.checked_sub(1)
        .ok_or_else(|| invalid("subject indices are 1-based"))
}

impl TryFrom<BreakReportWire> for BreakReport {
    type Error = Error;

    fn try_from(w: BreakReportWire) -> Result<Self> {
        let report = BreakReport {
            with_breaks: w.with_breaks.into_iter().map(zero_based).collect::<Result<_>>()?,
            without_breaks: w
                .without_breaks
                .into_iter()
                .map(zero_based)
                .collect::<Result<_>>()?,
            tau_hat: w
                .tau_hat
                .into_iter()
                .map(|(i, t)| Ok((zero_based(i)?, t)))
                .collect::<Result<_>>()?,
            sup_stats: w.sup_stats,
            threshold: w.threshold,
        };
        report.validate()?;
        Ok(report)
    }
}

impl BreakReport {
    pub fn n_subjects(&self) -> usize {
        self.sup_stats.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_subjects();
        if self.with_breaks.len() + self.without_breaks.len() != n
            || self.with_breaks.iter().chain(&self.without_breaks).any(|&i| i >= n)
            || !self.with_breaks.is_disjoint(&self.without_breaks)
        {
            return Err(invalid("break sets must partition the subjects"));
        }
        if !self.tau_hat.keys().copied().eq(self.with_breaks.iter().copied()) {
            return Err(invalid("tau_hat must be defined exactly on the break set"));
        }
        if self.tau_hat.values().any(|&t| t == 0) {
            return Err(invalid("break times are 1-based"));
        }
        Ok(())
    }
}

/// `(Ĉ•, Ĉ∘)`: subjects with `sups_i ≥ xi` and the rest.
pub fn classify_subjects(sups: &[f64], xi: f64) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    if !(xi > 0.0) || !xi.is_finite() {
        return Err(invalid(format!("threshold must be positive, got {xi}")));
    }
    let (with, without): (Vec<usize>, Vec<usize>) = (0..sups.len()).partition(|&i| sups[i] >= xi);
    Ok((with.into_iter().collect(), without.into_iter().collect()))
}

/// First maximiser of `objective[..T-1]`, as a 1-based time.
pub fn argmax_time(objective: &[f64]) -> usize {
    let usable = &objective[..objective.len().saturating_sub(1).max(1)];
    let mut best = 0;
    for (t, v) in usable.iter().enumerate() {
        if *v > usable[best] {
            best = t;
        }
    }
    best + 1
}

/// `τ̂_i`: argmax over `t ∈ 1..=T-1` of the subject's CUSUM objective.
pub fn estimate_breakpoint(panel: &FunctionalPanel, i: usize) -> Result<usize> {
    Ok(argmax_time(&subject_objective(panel, i)?))
}

/// Classifies every subject against `xi` and estimates break times on the break set.
pub fn break_report(panel: &FunctionalPanel, xi: f64) -> Result<BreakReport> {
    report_from_objectives(&subject_objectives(panel)?, xi)
}

/// [`break_report`] from per-subject objectives already at hand.
pub fn report_from_objectives(objectives: &[Vec<f64>], xi: f64) -> Result<BreakReport> {
    let sups: Vec<f64> = objectives
        .iter()
        .map(|o| o.iter().copied().fold(0.0, f64::max))
        .collect();
    let (with_breaks, without_breaks) = classify_subjects(&sups, xi)?;
    let tau_hat = with_breaks
        .iter()
        .map(|&i| (i, argmax_time(&objectives[i])))
        .collect();
    Ok(BreakReport {
        with_breaks,
        without_breaks,
        tau_hat,
        sup_stats: sups,
        threshold: xi,
    })
}

/// Splits the break set into `k` clusters by cutting the `k - 1` largest gaps
/// between sorted break times.
///
/// Cut boundaries are the break times just after each chosen gap; cluster
/// `j` holds the subjects with `τ̂` in `[b_{j-1}, b_j)`, the last one closed
/// at `t_max`. Equal gaps are cut left to right. When a zero gap is cut the
/// corresponding cluster comes out empty. Members within a cluster are in
/// ascending subject order.
pub fn cluster_given_k(
    tau_hat: &BTreeMap<usize, usize>,
    k: usize,
    t_max: usize,
) -> Result<Vec<Vec<usize>>> {
    if tau_hat.is_empty() {
        return Err(Error::NothingToCluster);
    }
    if k == 0 || k > tau_hat.len() {
        return Err(invalid(format!(
            "k = {k} must lie in 1..={}",
            tau_hat.len()
        )));
    }
    if let Some((i, t)) = tau_hat.iter().find(|(_, &t)| t == 0 || t > t_max) {
        return Err(invalid(format!(
            "break time {t} of subject {i} outside 1..={t_max}"
        )));
    }
    let boundaries = gap_boundaries(tau_hat, k);
    let mut clusters = vec![Vec::new(); k];
    for (&i, &t) in tau_hat {
        let j = boundaries.partition_point(|&b| b <= t);
        clusters[j].push(i);
    }
    Ok(clusters)
}

/// Interior boundaries `b_1 ≤ … ≤ b_{k-1}`.
fn gap_boundaries(tau_hat: &BTreeMap<usize, usize>, k: usize) -> Vec<usize> {
    let mut times: Vec<usize> = tau_hat.values().copied().collect();
    times.sort_unstable();
    let mut gaps: Vec<(usize, usize)> = times
        .windows(2)
        .enumerate()
        .map(|(ix, w)| (w[1] - w[0], ix))
        .collect();
    // largest first, earlier gap first among equals
    gaps.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut cut: Vec<usize> = gaps[..k - 1].iter().map(|g| g.1).collect();
    cut.sort_unstable();
    cut.into_iter().map(|ix| times[ix + 1]).collect()
}

/// Fitted step model of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFit {
    /// Mean of the member break times.
    pub tau_bar: f64,
    /// `⌊tau_bar⌋`, the last pre-break time.
    pub split: usize,
    pub members: Vec<usize>,
    pub mu: Vec<Curve>,
    pub delta: Vec<Curve>,
}

fn segment_mean(block: &[f64], g: usize, from: usize, to: usize) -> Vec<f64> {
    let mut mean = vec![0.0; g];
    for row in block[from * g..to * g].chunks_exact(g) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let len = (to - from) as f64;
    mean.iter_mut().for_each(|m| *m /= len);
    mean
}

/// Group break time and per-member pre-break means and jumps.
pub fn group_parameters(
    panel: &FunctionalPanel,
    members: &[usize],
    tau_hat: &BTreeMap<usize, usize>,
) -> Result<GroupFit> {
    if members.is_empty() {
        return Err(invalid("empty cluster"));
    }
    let mut sum = 0.0;
    for i in members {
        panel.check_subject(*i)?;
        let t = tau_hat
            .get(i)
            .ok_or_else(|| invalid(format!("subject {i} has no break time")))?;
        sum += *t as f64;
    }
    let tau_bar = sum / members.len() as f64;
    let split = tau_bar.floor() as usize;
    let t_len = panel.n_times();
    if split == 0 || split >= t_len {
        return Err(Error::DegenerateSplit {
            split,
            n_times: t_len,
        });
    }
    let g = panel.grid_len();
    let mut mu = Vec::with_capacity(members.len());
    let mut delta = Vec::with_capacity(members.len());
    for &i in members {
        let block = panel.subject(i);
        let pre = segment_mean(block, g, 0, split);
        let post = segment_mean(block, g, split, t_len);
        delta.push(Curve(post.iter().zip(&pre).map(|(b, a)| b - a).collect()));
        mu.push(Curve(pre));
    }
    Ok(GroupFit {
        tau_bar,
        split,
        members: members.to_vec(),
        mu,
        delta,
    })
}

/// Sum over `t` of `‖X_it - ν̂_it‖²` for one fitted member.
fn step_rss(panel: &FunctionalPanel, i: usize, split: usize, mu: &[f64], delta: &[f64]) -> f64 {
    let g = panel.grid_len();
    let grid = panel.grid();
    let block = panel.subject(i);
    let post: Vec<f64> = mu.iter().zip(delta).map(|(m, d)| m + d).collect();
    let mut resid = vec![0.0; g];
    let mut total = 0.0;
    for (t0, row) in block.chunks_exact(g).enumerate() {
        let fit = if t0 < split { mu } else { &post };
        for j in 0..g {
            resid[j] = row[j] - fit[j];
        }
        total += grid.norm_sq_unchecked(&resid);
    }
    total
}

/// Relative size below which `V(K)` counts as an exact fit.
const EXACT_FIT_TOLERANCE: f64 = 1e-20;

/// `V(K)`: mean over the break set of the per-time squared residual of the
/// `K`-group step fit.
pub fn fit_loss(panel: &FunctionalPanel, report: &BreakReport, k: usize) -> Result<f64> {
    let clusters = cluster_given_k(&report.tau_hat, k, panel.n_times())?;
    let t_len = panel.n_times() as f64;
    let mut total = 0.0;
    for members in clusters.iter().filter(|c| !c.is_empty()) {
        let fit = group_parameters(panel, members, &report.tau_hat)?;
        for (ix, &i) in members.iter().enumerate() {
            total += step_rss(panel, i, fit.split, &fit.mu[ix].0, &fit.delta[ix].0) / t_len;
        }
    }
    Ok(total / report.tau_hat.len() as f64)
}

fn data_energy(panel: &FunctionalPanel, subjects: impl Iterator<Item = usize>) -> f64 {
    let g = panel.grid_len();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in subjects {
        for row in panel.subject(i).chunks_exact(g) {
            total += panel.grid().norm_sq_unchecked(row);
        }
        count += panel.n_times();
    }
    total / count.max(1) as f64
}

/// `IC(K) = ln V(K) + K ρ`.
///
/// Returns `-∞` when the fit is exact (V(K) negligible against the data's
/// own energy), so the smallest exactly fitting `K` wins the minimisation.
pub fn information_criterion(
    panel: &FunctionalPanel,
    report: &BreakReport,
    k: usize,
    rho: f64,
) -> Result<f64> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(invalid(format!("rho must be nonnegative, got {rho}")));
    }
    let v = fit_loss(panel, report, k)?;
    let energy = data_energy(panel, report.with_breaks.iter().copied());
    if v <= EXACT_FIT_TOLERANCE * energy {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(v.ln() + k as f64 * rho)
}

/// `(N ∨ T)^{-1/2} ln(N ∨ T)`.
pub fn default_rho(n: usize, t: usize) -> f64 {
    let m = n.max(t) as f64;
    m.ln() / m.sqrt()
}

/// `min(10, |Ĉ•|)`.
pub fn default_k_bar(n_breaks: usize) -> usize {
    n_breaks.min(10)
}

/// Selected clustering of the break set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClusterModelWire", into = "ClusterModelWire")]
pub struct ClusterModel {
    /// Number of non-empty clusters.
    pub k: usize,
    /// The `K` that minimised the criterion; exceeds `k` only if the gap rule produced empty clusters.
    pub k_selected: usize,
    pub members: Vec<Vec<usize>>,
    pub group_tau: Vec<f64>,
    /// Filled by [`ClusterModel::with_pooled_breaks`].
    pub pooled_b: Vec<usize>,
    /// `IC(K)` for `K = 1..=K̄`; `-∞` marks an exact fit.
    pub ic_values: BTreeMap<usize, f64>,
}

#[derive(Serialize, Deserialize)]
struct ClusterModelWire {
    k: usize,
    k_selected: usize,
    members: Vec<Vec<usize>>,
    group_tau: Vec<f64>,
    pooled_b: Vec<usize>,
    /// `null` for the exact-fit sentinel.
    ic_values: BTreeMap<usize, Option<f64>>,
}

impl From<ClusterModel> for ClusterModelWire {
    fn from(m: ClusterModel) -> Self {
        Self {
            k: m.k,
            k_selected: m.k_selected,
            members: m
                .members
                .iter()
                .map(|c| c.iter().map(|i| i + 1).collect())
                .collect(),
            group_tau: m.group_tau,
            pooled_b: m.pooled_b,
            ic_values: m
                .ic_values
                .into_iter()
                .map(|(k, v)| (k, v.is_finite().then_some(v)))
                .collect(),
        }
    }
}

impl TryFrom<ClusterModelWire> for ClusterModel {
    type Error = Error;

    fn try_from(w: ClusterModelWire) -> Result<Self> {
        let members = w
            .members
            .into_iter()
            .map(|c| c.into_iter().map(zero_based).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        if members.len() != w.k || w.group_tau.len() != w.k {
            return Err(invalid("cluster model sizes disagree with k"));
        }
        if !w.pooled_b.is_empty() && w.pooled_b.len() != w.k {
            return Err(invalid("pooled_b must have k entries"));
        }
        Ok(Self {
            k: w.k,
            k_selected: w.k_selected,
            members,
            group_tau: w.group_tau,
            pooled_b: w.pooled_b,
            ic_values: w
                .ic_values
                .into_iter()
                .map(|(k, v)| (k, v.unwrap_or(f64::NEG_INFINITY)))
                .collect(),
        })
    }
}

/// `K̂ = argmin_{1 ≤ K ≤ k_bar} IC(K)` (smallest on ties) and its clusters.
pub fn select_k(
    panel: &FunctionalPanel,
    report: &BreakReport,
    k_bar: usize,
    rho: f64,
) -> Result<ClusterModel> {
    if report.with_breaks.is_empty() {
        return Err(Error::NothingToCluster);
    }
    if report.n_subjects() != panel.n_subjects() {
        return Err(Error::Shape {
            expected: panel.n_subjects(),
            actual: report.n_subjects(),
        });
    }
    if k_bar == 0 || k_bar > report.with_breaks.len() {
        return Err(invalid(format!(
            "k_bar = {k_bar} must lie in 1..={}",
            report.with_breaks.len()
        )));
    }
    let ic: Vec<f64> = (1..=k_bar)
        .into_par_iter()
        .map(|k| information_criterion(panel, report, k, rho))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (ix, v) in ic.iter().enumerate() {
        if *v < ic[best] {
            best = ix;
        }
    }
    let k_selected = best + 1;
    let members: Vec<Vec<usize>> = cluster_given_k(&report.tau_hat, k_selected, panel.n_times())?
        .into_iter()
        .filter(|c| !c.is_empty())
        .collect();
    let group_tau = members
        .iter()
        .map(|c| c.iter().map(|i| report.tau_hat[i] as f64).sum::<f64>() / c.len() as f64)
        .collect();
    Ok(ClusterModel {
        k: members.len(),
        k_selected,
        members,
        group_tau,
        pooled_b: Vec::new(),
        ic_values: ic.into_iter().enumerate().map(|(ix, v)| (ix + 1, v)).collect(),
    })
}

/// `b̂ = argmax_t Σ_{i ∈ cluster} ∫ Z_iT²(t/T; u) du`, smallest on ties.
pub fn pooled_breakpoint(panel: &FunctionalPanel, members: &[usize]) -> Result<usize> {
    if members.is_empty() {
        return Err(invalid("empty cluster"));
    }
    let mut total = vec![0.0; panel.n_times()];
    for &i in members {
        for (acc, v) in total.iter_mut().zip(subject_objective(panel, i)?) {
            *acc += v;
        }
    }
    Ok(argmax_time(&total))
}

impl ClusterModel {
    pub fn with_pooled_breaks(mut self, panel: &FunctionalPanel) -> Result<Self> {
        self.pooled_b = self
            .members
            .iter()
            .map(|c| pooled_breakpoint(panel, c))
            .collect::<Result<_>>()?;
        Ok(self)
    }
}

/// Full clustering step: `select_k` with defaults for unset tuning, then pooled breaks.
pub fn cluster_breaks(
    panel: &FunctionalPanel,
    report: &BreakReport,
    k_bar: Option<usize>,
    rho: Option<f64>,
) -> Result<ClusterModel> {
    let k_bar = k_bar.unwrap_or_else(|| default_k_bar(report.with_breaks.len()));
    let rho = rho.unwrap_or_else(|| default_rho(panel.n_subjects(), panel.n_times()));
    select_k(panel, report, k_bar, rho)?.with_pooled_breaks(panel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::make_uniform_grid;
    use crate::rng::stream_rng;
    use rand::seq::index::sample;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn taus(ts: &[usize]) -> BTreeMap<usize, usize> {
        ts.iter().copied().enumerate().collect()
    }

    fn step(t0: usize, b: usize, size: f64) -> f64 {
        if t0 + 1 > b {
            size
        } else {
            0.0
        }
    }

    /// Subject `i` jumps by `jumps[i]` after time `breaks[i]`.
    fn step_panel(t_len: usize, breaks: &[usize], jumps: &[f64]) -> FunctionalPanel {
        let grid = make_uniform_grid(3).unwrap();
        FunctionalPanel::from_fn(breaks.len(), t_len, grid, |i, t0, j| {
            step(t0, breaks[i], jumps[i]) * (1.0 + 0.5 * j as f64)
        })
        .unwrap()
    }

    #[test]
    fn classification_uses_closed_upper_set() {
        let (w, wo) = classify_subjects(&[0.0, 2.0, 3.0, 1.0], 2.0).unwrap();
        assert_eq!(w.into_iter().collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(wo.into_iter().collect::<Vec<_>>(), vec![0, 3]);
        let (w, _) = classify_subjects(&[0.0; 5], 0.1).unwrap();
        assert!(w.is_empty());
        assert!(classify_subjects(&[1.0], 0.0).is_err());
    }

    #[test]
    fn noiseless_classification() {
        let p = step_panel(40, &[20, 20], &[3.0, 0.0]);
        let r = break_report(&p, 1.0).unwrap();
        assert_eq!(r.with_breaks, BTreeSet::from([0]));
        assert_eq!(r.tau_hat[&0], 20);
        r.validate().unwrap();
    }

    #[test]
    fn noiseless_step_is_located() {
        let p = step_panel(100, &[50], &[1.0]);
        assert_eq!(estimate_breakpoint(&p, 0).unwrap(), 50);
        let p = step_panel(100, &[17], &[-2.0]);
        assert_eq!(estimate_breakpoint(&p, 0).unwrap(), 17);
    }

    #[test]
    fn constant_series_falls_to_first_time() {
        let p = step_panel(10, &[5], &[0.0]);
        assert_eq!(estimate_breakpoint(&p, 0).unwrap(), 1);
    }

    #[test]
    fn breakpoint_matches_exhaustive_scan() {
        let grid = make_uniform_grid(5).unwrap();
        let mut rng = stream_rng(21, 0);
        let data: Vec<f64> = (0..60 * 5).map(|_| rng.sample(StandardNormal)).collect();
        let p = FunctionalPanel::new(1, 60, grid.clone(), data.clone()).unwrap();
        // oracle: explicit partial sums per t
        let mut best = (0, f64::NEG_INFINITY);
        for t in 1..60 {
            let z: Vec<f64> = (0..5)
                .map(|j| {
                    let s_t: f64 = (0..t).map(|s| data[s * 5 + j]).sum();
                    let s_all: f64 = (0..60).map(|s| data[s * 5 + j]).sum();
                    (s_t - t as f64 / 60.0 * s_all) / 60f64.sqrt()
                })
                .collect();
            let v = grid.l2_norm_sq(&z).unwrap();
            if v > best.1 {
                best = (t, v);
            }
        }
        assert_eq!(estimate_breakpoint(&p, 0).unwrap(), best.0);
    }

    #[test]
    fn one_dominant_gap() {
        let c = cluster_given_k(&taus(&[10, 10, 10, 50, 50]), 2, 100).unwrap();
        assert_eq!(c, vec![vec![0, 1, 2], vec![3, 4]]);
    }

    #[test]
    fn single_cluster_holds_everything() {
        let c = cluster_given_k(&taus(&[70, 3, 44]), 1, 100).unwrap();
        assert_eq!(c, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn cluster_errors() {
        assert!(cluster_given_k(&taus(&[1, 2]), 3, 10).is_err());
        assert!(cluster_given_k(&taus(&[1, 2]), 0, 10).is_err());
        assert!(matches!(
            cluster_given_k(&BTreeMap::new(), 1, 10),
            Err(Error::NothingToCluster)
        ));
    }

    #[test]
    fn equal_gaps_cut_left_first() {
        let c = cluster_given_k(&taus(&[10, 20, 30]), 2, 100).unwrap();
        assert_eq!(c, vec![vec![0], vec![1, 2]]);
    }

    #[test]
    fn zero_gap_cut_leaves_empty_cluster() {
        let c = cluster_given_k(&taus(&[5, 5, 9]), 3, 10).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.iter().filter(|m| m.is_empty()).count(), 1);
    }

    /// All cut sets of `n - 1` gaps into `k` contiguous blocks, scored by
    /// (min cut gap, total cut gap), ties to the lexicographically smallest.
    fn oracle_partition(times: &[usize], k: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by_key(|&i| (times[i], i));
        let sorted: Vec<usize> = order.iter().map(|&i| times[i]).collect();
        let n_gaps = sorted.len() - 1;
        let mut best: Option<((usize, usize), Vec<usize>)> = None;
        let mut cuts: Vec<usize> = (0..k - 1).collect();
        loop {
            let gaps: Vec<usize> = cuts.iter().map(|&c| sorted[c + 1] - sorted[c]).collect();
            let score = (
                gaps.iter().copied().min().unwrap_or(usize::MAX),
                gaps.iter().sum::<usize>(),
            );
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, cuts.clone()));
            }
            // next combination in lexicographic order
            let mut pos = k - 1;
            loop {
                if pos == 0 {
                    let cuts = best.unwrap().1;
                    let mut out = vec![Vec::new(); k];
                    let mut block = 0;
                    for (r, &i) in order.iter().enumerate() {
                        out[block].push(i);
                        if cuts.contains(&r) {
                            block += 1;
                        }
                    }
                    out.iter_mut().for_each(|c| c.sort_unstable());
                    return out;
                }
                pos -= 1;
                if cuts[pos] < n_gaps - (k - 1 - pos) {
                    cuts[pos] += 1;
                    for q in pos + 1..k - 1 {
                        cuts[q] = cuts[q - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    #[test]
    fn gap_rule_matches_exhaustive_partition_search() {
        for seed in 0..200 {
            let mut rng = stream_rng(seed, 1);
            let times: Vec<usize> = sample(&mut rng, 199, 12).into_iter().map(|t| t + 1).collect();
            let got = cluster_given_k(&taus(&times), 3, 200).unwrap();
            assert_eq!(got, oracle_partition(&times, 3), "times {times:?}");
        }
    }

    #[test]
    fn single_subject_group_parameters() {
        let grid = make_uniform_grid(2).unwrap();
        let p = FunctionalPanel::from_fn(1, 60, grid, |_, t0, j| (t0 * 2 + j) as f64).unwrap();
        let fit = group_parameters(&p, &[0], &taus(&[30])).unwrap();
        assert_eq!(fit.tau_bar, 30.0);
        assert_eq!(fit.split, 30);
        // mean of 2t0 + j over t0 = 0..29
        assert!((fit.mu[0].0[0] - 29.0).abs() < 1e-12);
        assert!((fit.mu[0].0[1] - 30.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_jump_recovered() {
        let p = step_panel(50, &[20, 20], &[2.0, -1.0]);
        let fit = group_parameters(&p, &[0, 1], &taus(&[20, 20])).unwrap();
        for (ix, jump) in [2.0, -1.0].into_iter().enumerate() {
            for j in 0..3 {
                assert!((fit.delta[ix].0[j] - jump * (1.0 + 0.5 * j as f64)).abs() < 1e-12);
                assert_eq!(fit.mu[ix].0[j], 0.0);
            }
        }
    }

    #[test]
    fn fractional_group_time_is_floored() {
        let grid = make_uniform_grid(2).unwrap();
        let mut rng = stream_rng(4, 0);
        let data: Vec<f64> = (0..2 * 80 * 2).map(|_| rng.sample(StandardNormal)).collect();
        let p = FunctionalPanel::new(2, 80, grid, data.clone()).unwrap();
        let fit = group_parameters(&p, &[0, 1], &taus(&[40, 45])).unwrap();
        assert_eq!(fit.tau_bar, 42.5);
        assert_eq!(fit.split, 42);
        for i in 0..2 {
            let at = |t0: usize, j: usize| data[(i * 80 + t0) * 2 + j];
            for j in 0..2 {
                let pre: f64 = (0..42).map(|t| at(t, j)).sum::<f64>() / 42.0;
                let post: f64 = (42..80).map(|t| at(t, j)).sum::<f64>() / 38.0;
                assert!((fit.mu[i].0[j] - pre).abs() < 1e-12);
                assert!((fit.delta[i].0[j] - (post - pre)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_split() {
        let p = step_panel(10, &[5], &[1.0]);
        assert!(matches!(
            group_parameters(&p, &[0], &taus(&[10])),
            Err(Error::DegenerateSplit { .. })
        ));
    }

    fn report_for(panel: &FunctionalPanel, ts: &[usize]) -> BreakReport {
        BreakReport {
            with_breaks: (0..ts.len()).collect(),
            without_breaks: BTreeSet::new(),
            tau_hat: taus(ts),
            sup_stats: vec![1.0; panel.n_subjects()],
            threshold: 0.5,
        }
    }

    #[test]
    fn zero_penalty_orders_by_fit_loss() {
        let grid = make_uniform_grid(3).unwrap();
        let mut rng = stream_rng(8, 0);
        let breaks = [20, 22, 50, 52, 80, 81];
        let p = FunctionalPanel::from_fn(6, 100, grid, |i, t0, _| {
            step(t0, breaks[i], 3.0) + rng.sample::<f64, _>(StandardNormal)
        })
        .unwrap();
        let r = report_for(&p, &breaks);
        let ics: Vec<f64> = (1..=5).map(|k| information_criterion(&p, &r, k, 0.0).unwrap()).collect();
        let vs: Vec<f64> = (1..=5).map(|k| fit_loss(&p, &r, k).unwrap()).collect();
        for a in 0..5 {
            assert!((ics[a] - vs[a].ln()).abs() < 1e-12);
            for b in 0..5 {
                assert_eq!(ics[a] < ics[b], vs[a] < vs[b]);
            }
        }
    }

    #[test]
    fn exact_fit_picks_one_cluster() {
        let p = step_panel(30, &[15, 15, 15], &[1.0, 2.0, -1.0]);
        let r = report_for(&p, &[15, 15, 15]);
        assert_eq!(information_criterion(&p, &r, 1, 0.1).unwrap(), f64::NEG_INFINITY);
        let m = select_k(&p, &r, 3, 0.1).unwrap();
        assert_eq!(m.k, 1);
        assert_eq!(m.members, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn single_break_subject_forces_one_cluster() {
        let p = step_panel(30, &[15, 15], &[1.0, 0.0]);
        let mut r = report_for(&p, &[15]);
        r.without_breaks = BTreeSet::from([1]);
        let m = select_k(&p, &r, 1, 0.1).unwrap();
        assert_eq!(m.k, 1);
        assert!(select_k(&p, &r, 2, 0.1).is_err());
    }

    #[test]
    fn separated_groups_are_found() {
        let breaks = [25, 25, 25, 50, 50, 50, 75, 75, 75];
        let grid = make_uniform_grid(5).unwrap();
        let mut rng = stream_rng(12, 0);
        let p = FunctionalPanel::from_fn(9, 100, grid, |i, t0, _| {
            step(t0, breaks[i], 5.0) + 0.1 * rng.sample::<f64, _>(StandardNormal)
        })
        .unwrap();
        let r = break_report(&p, 1.0).unwrap();
        assert_eq!(r.with_breaks.len(), 9);
        let m = cluster_breaks(&p, &r, Some(5), None).unwrap();
        assert_eq!(m.k, 3);
        assert_eq!(m.pooled_b, vec![25, 50, 75]);
        assert_eq!(m.members, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]]);
        let ic = &m.ic_values;
        assert!((1..=5).all(|k| ic[&3] <= ic[&k]));
    }

    #[test]
    fn empty_break_set_cannot_be_clustered() {
        let p = step_panel(10, &[5], &[0.0]);
        let r = break_report(&p, 1.0).unwrap();
        assert!(matches!(
            select_k(&p, &r, 1, 0.1),
            Err(Error::NothingToCluster)
        ));
    }

    #[test]
    fn pooled_single_member_matches_subject() {
        let grid = make_uniform_grid(4).unwrap();
        let mut rng = stream_rng(30, 0);
        let data: Vec<f64> = (0..3 * 40 * 4).map(|_| rng.sample(StandardNormal)).collect();
        let p = FunctionalPanel::new(3, 40, grid, data).unwrap();
        for i in 0..3 {
            assert_eq!(
                pooled_breakpoint(&p, &[i]).unwrap(),
                estimate_breakpoint(&p, i).unwrap()
            );
        }
    }

    #[test]
    fn pooled_noiseless_common_break() {
        let p = step_panel(60, &[33, 33, 33], &[1.0, -4.0, 0.5]);
        assert_eq!(pooled_breakpoint(&p, &[0, 1, 2]).unwrap(), 33);
    }

    #[test]
    fn report_json_is_one_based() {
        let p = step_panel(40, &[20, 20], &[3.0, 0.0]);
        let r = break_report(&p, 1.0).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["with_breaks"], serde_json::json!([1]));
        assert_eq!(v["without_breaks"], serde_json::json!([2]));
        assert_eq!(v["tau_hat"]["1"], 20);
        let back: BreakReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn cluster_model_json_round_trip() {
        let p = step_panel(30, &[10, 10, 20, 20], &[1.0, 2.0, 1.0, 2.0]);
        let r = report_for(&p, &[10, 10, 20, 20]);
        let m = cluster_breaks(&p, &r, Some(3), None).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: ClusterModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn default_tuning() {
        assert!((default_rho(200, 100) - 200f64.ln() / 200f64.sqrt()).abs() < 1e-15);
        assert_eq!(default_k_bar(4), 4);
        assert_eq!(default_k_bar(40), 10);
    }
}
