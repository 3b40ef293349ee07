//! Limit law of the CUSUM statistic under the null and its Monte-Carlo quantiles.
//!
//! Under no breaks the (PE-)CUSUM statistic converges to
//!
//! ```text
//! sup_{0≤x≤1} Σ_i λ_i B_i²(x)
//! ```
//!
//! where `B_i` are independent standard Brownian bridges and `λ_i` are the
//! eigenvalues of the long-run covariance operator of the `√N`-scaled
//! cross-sectional mean. The eigenvalues are estimated from a kernel-tapered
//! sum of lagged autocovariances on the grid, the bridges are simulated on a
//! time lattice, and quantiles are read off the sorted draws.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::breaks::BreakReport;
use crate::error::{invalid, Error, Result};
use crate::panel::{cross_sectional_mean_block, FunctionalPanel, Grid};
use crate::rng::stream_rng;

pub const NULL_SPEC_SCHEMA_VERSION: u32 = 1;

/// Lag window of the long-run covariance estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelName {
    /// `w(x) = 1 - |x|`; keeps the estimate positive semi-definite.
    Bartlett,
    /// Trapezoid flat-top: 1 on `|x| ≤ 1/2`, then linear down to 0 at `|x| = 1`.
    FlatTop,
}

impl KernelName {
    fn weight(self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            KernelName::Bartlett => (1.0 - x).max(0.0),
            KernelName::FlatTop => {
                if x <= 0.5 {
                    1.0
                } else {
                    (2.0 * (1.0 - x)).max(0.0)
                }
            }
        }
    }

    /// Weight of lag `h` under bandwidth `bw`; every lag `1..=bw` gets a positive weight.
    pub fn lag_weight(self, h: usize, bw: usize) -> f64 {
        if h == 0 {
            1.0
        } else if h > bw {
            0.0
        } else {
            self.weight(h as f64 / (bw + 1) as f64)
        }
    }
}

impl std::str::FromStr for KernelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bartlett" => Ok(KernelName::Bartlett),
            "flat_top" | "flat-top" => Ok(KernelName::FlatTop),
            other => Err(invalid(format!("unknown kernel {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `⌊T^{1/3}⌋`
    Auto,
    Fixed(usize),
}

impl Bandwidth {
    pub fn resolve(self, n_times: usize) -> usize {
        match self {
            Bandwidth::Fixed(b) => b,
            Bandwidth::Auto => integer_cube_root(n_times),
        }
    }
}

fn integer_cube_root(n: usize) -> usize {
    let mut b = (n as f64).cbrt().floor() as usize;
    while (b + 1).pow(3) <= n {
        b += 1;
    }
    while b > 0 && b.pow(3) > n {
        b -= 1;
    }
    b
}

/// Estimated long-run covariance kernel on the grid (`G × G`, row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRunCovariance {
    pub kernel: Vec<f64>,
    pub grid_len: usize,
    pub bandwidth: usize,
    pub kernel_name: KernelName,
}

impl LongRunCovariance {
    pub fn at(&self, j: usize, k: usize) -> f64 {
        self.kernel[j * self.grid_len + k]
    }

    fn weighted_matrix(&self, grid: &Grid) -> Result<DMatrix<f64>> {
        let g = self.grid_len;
        if grid.len() != g {
            return Err(Error::Shape {
                expected: g,
                actual: grid.len(),
            });
        }
        if self.kernel.iter().any(|v| !v.is_finite()) {
            return Err(invalid("long-run covariance kernel has non-finite entries"));
        }
        let sw: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
        Ok(DMatrix::from_fn(g, g, |j, k| {
            0.5 * (self.at(j, k) + self.at(k, j)) * sw[j] * sw[k]
        }))
    }

    /// Same operator with its negative eigenvalues set to zero.
    pub fn psd_projected(&self, grid: &Grid) -> Result<Self> {
        let m = self.weighted_matrix(grid)?;
        let eig = SymmetricEigen::new(m);
        let clipped = eig.eigenvalues.map(|v| v.max(0.0));
        let rebuilt = &eig.eigenvectors
            * DMatrix::from_diagonal(&clipped)
            * eig.eigenvectors.transpose();
        let g = self.grid_len;
        let sw: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
        let mut kernel = vec![0.0; g * g];
        for j in 0..g {
            for k in 0..g {
                kernel[j * g + k] = rebuilt[(j, k)] / (sw[j] * sw[k]);
            }
        }
        Ok(Self {
            kernel,
            ..self.clone()
        })
    }
}

fn demeaned(series: &[f64], g: usize) -> (usize, Vec<f64>) {
    let n_times = series.len() / g;
    let mut mean = vec![0.0; g];
    for row in series.chunks_exact(g) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_times as f64);
    let mut out = series.to_vec();
    for row in out.chunks_exact_mut(g) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    (n_times, out)
}

fn check_series(series: &[f64], g: usize, bandwidth: Bandwidth) -> Result<(usize, usize)> {
    if g == 0 || series.len() % g != 0 {
        return Err(Error::Shape {
            expected: g,
            actual: series.len(),
        });
    }
    let n_times = series.len() / g;
    if n_times < 4 {
        return Err(Error::InsufficientData(format!(
            "long-run covariance needs T >= 4, got {n_times}"
        )));
    }
    let bw = bandwidth.resolve(n_times);
    if bw >= n_times {
        return Err(invalid(format!(
            "bandwidth {bw} must be smaller than T = {n_times}"
        )));
    }
    Ok((n_times, bw))
}

/// Kernel estimate `Σ_{|h|≤bw} w_h γ̂_h(u_j, u_k)` from a `T × G` series.
///
/// The series is demeaned first; autocovariances divide by `T`.
pub fn estimate_lrc(
    series: &[f64],
    grid_len: usize,
    bandwidth: Bandwidth,
    kernel_name: KernelName,
) -> Result<LongRunCovariance> {
    let (n_times, bw) = check_series(series, grid_len, bandwidth)?;
    let (_, e) = demeaned(series, grid_len);
    let g = grid_len;
    // rows are times, columns grid points
    let e = DMatrix::from_row_slice(n_times, g, &e);
    let mut k = e.transpose() * &e;
    for h in 1..=bw {
        let w = kernel_name.lag_weight(h, bw);
        if w == 0.0 {
            continue;
        }
        let lead = e.rows(h, n_times - h);
        let lag = e.rows(0, n_times - h);
        let gamma = lead.transpose() * lag;
        k += (&gamma + gamma.transpose()) * w;
    }
    k /= n_times as f64;
    let mut kernel = vec![0.0; g * g];
    for j in 0..g {
        for l in 0..g {
            kernel[j * g + l] = k[(j, l)];
        }
    }
    Ok(LongRunCovariance {
        kernel,
        grid_len: g,
        bandwidth: bw,
        kernel_name,
    })
}

/// Trace `∫ Ω̂(u, u) du` of the estimated operator, from the diagonal lags only.
pub fn lrc_trace(
    series: &[f64],
    grid: &Grid,
    bandwidth: Bandwidth,
    kernel_name: KernelName,
) -> Result<f64> {
    let g = grid.len();
    let (n_times, bw) = check_series(series, g, bandwidth)?;
    let (_, e) = demeaned(series, g);
    let mut diag = vec![0.0; g];
    for h in 0..=bw {
        let w = kernel_name.lag_weight(h, bw);
        let factor = if h == 0 { w } else { 2.0 * w };
        for t in h..n_times {
            let lead = &e[t * g..(t + 1) * g];
            let lag = &e[(t - h) * g..(t - h + 1) * g];
            for j in 0..g {
                diag[j] += factor * lead[j] * lag[j];
            }
        }
    }
    Ok(grid.integrate_unchecked(&diag) / n_times as f64)
}

/// Spectrum of the integral operator with the estimated kernel.
///
/// Solves the symmetric eigenproblem of `W^{1/2} K W^{1/2}`, clips negatives
/// to zero and sorts in non-increasing order.
pub fn eigenvalues_of(lrc: &LongRunCovariance, grid: &Grid) -> Result<Vec<f64>> {
    let m = lrc.weighted_matrix(grid)?;
    let mut vals: Vec<f64> = SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals)
}

/// Which series the long-run covariance is estimated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrcSource {
    /// `√N · X̃_t`.
    #[default]
    CrossSectionalMean,
    /// `√N ·` cross-sectional mean of residuals after removing per-subject step means.
    StepResiduals,
}

/// `√N · X̃_t` as a `T × G` block.
pub fn null_series(panel: &FunctionalPanel) -> Vec<f64> {
    let scale = (panel.n_subjects() as f64).sqrt();
    let mut s = cross_sectional_mean_block(panel);
    s.iter_mut().for_each(|v| *v *= scale);
    s
}

/// `√N` times the cross-sectional mean of residuals: subjects flagged in
/// `report` lose their fitted pre/post step means at `τ̂_i`, the others
/// their overall time mean.
pub fn residual_series(panel: &FunctionalPanel, report: &BreakReport) -> Result<Vec<f64>> {
    let (n, t_len, g) = (panel.n_subjects(), panel.n_times(), panel.grid_len());
    if report.sup_stats.len() != n {
        return Err(Error::Shape {
            expected: n,
            actual: report.sup_stats.len(),
        });
    }
    let mut acc = vec![0.0; t_len * g];
    for i in 0..n {
        let block = panel.subject(i);
        let split = report.tau_hat.get(&i).copied().unwrap_or(t_len);
        if split == 0 || split > t_len {
            return Err(Error::DegenerateSplit {
                split,
                n_times: t_len,
            });
        }
        let segments: &[(usize, usize)] = if split < t_len {
            &[(0, split), (split, t_len)]
        } else {
            &[(0, t_len)]
        };
        for &(a, b) in segments {
            let mut mean = vec![0.0; g];
            for row in block[a * g..b * g].chunks_exact(g) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= (b - a) as f64);
            for t in a..b {
                for j in 0..g {
                    acc[t * g + j] += block[t * g + j] - mean[j];
                }
            }
        }
    }
    let scale = 1.0 / (n as f64).sqrt();
    acc.iter_mut().for_each(|v| *v *= scale);
    Ok(acc)
}

/// Simulation controls for the limit law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NullControls {
    pub bridge_grid: usize,
    pub n_draws: usize,
    pub seed: u64,
    /// Retain the fewest eigenvalues whose sum reaches this share of the trace.
    pub trace_share: f64,
    pub bandwidth: Bandwidth,
    pub kernel: KernelName,
    pub source: LrcSource,
}

impl Default for NullControls {
    fn default() -> Self {
        Self {
            bridge_grid: 1000,
            n_draws: 5000,
            seed: 0,
            trace_share: 0.99,
            bandwidth: Bandwidth::Auto,
            kernel: KernelName::Bartlett,
            source: LrcSource::CrossSectionalMean,
        }
    }
}

/// Eigenvalues plus simulation controls; enough to regenerate the null draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSpec {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub eigenvalues: Vec<f64>,
    pub n_bridges: usize,
    pub bridge_grid: usize,
    pub n_draws: usize,
    pub seed: u64,
}

fn default_schema_version() -> u32 {
    NULL_SPEC_SCHEMA_VERSION
}

/// Fewest leading eigenvalues whose sum reaches `share` of the total.
pub fn retained_count(eigenvalues: &[f64], share: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return eigenvalues.len().min(1);
    }
    let mut acc = 0.0;
    for (k, v) in eigenvalues.iter().enumerate() {
        acc += v;
        if acc >= share * total {
            return k + 1;
        }
    }
    eigenvalues.len()
}

impl NullSpec {
    /// Builds a spec, retaining eigenvalues up to `controls.trace_share` of the trace.
    pub fn from_eigenvalues(eigenvalues: Vec<f64>, controls: &NullControls) -> Result<Self> {
        let n_bridges = retained_count(&eigenvalues, controls.trace_share);
        let spec = Self {
            schema_version: NULL_SPEC_SCHEMA_VERSION,
            eigenvalues,
            n_bridges,
            bridge_grid: controls.bridge_grid,
            n_draws: controls.n_draws,
            seed: controls.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eigenvalues.is_empty() {
            return Err(invalid("null spec has no eigenvalues"));
        }
        if self
            .eigenvalues
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(invalid("eigenvalues must be finite and nonnegative"));
        }
        if self.eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("eigenvalues must be non-increasing"));
        }
        if self.n_bridges == 0 || self.n_bridges > self.eigenvalues.len() {
            return Err(invalid(format!(
                "n_bridges {} must be in 1..={}",
                self.n_bridges,
                self.eigenvalues.len()
            )));
        }
        if self.bridge_grid == 0 || self.n_draws == 0 {
            return Err(invalid("bridge_grid and n_draws must be positive"));
        }
        Ok(())
    }

    pub fn leading_eigenvalue(&self) -> Result<f64> {
        match self.eigenvalues.first() {
            Some(&l) if l > 0.0 => Ok(l),
            _ => Err(Error::DegenerateDistribution),
        }
    }

    /// Same controls, different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Estimates the eigenvalues for `panel` and wraps them in a [`NullSpec`].
///
/// With [`LrcSource::StepResiduals`] a `report` must be supplied.
pub fn fit_null_spec(
    panel: &FunctionalPanel,
    controls: &NullControls,
    report: Option<&BreakReport>,
) -> Result<NullSpec> {
    let series = match controls.source {
        LrcSource::CrossSectionalMean => null_series(panel),
        LrcSource::StepResiduals => {
            let report = report.ok_or_else(|| {
                invalid("step-residual long-run covariance needs a break report")
            })?;
            residual_series(panel, report)?
        }
    };
    let lrc = estimate_lrc(&series, panel.grid_len(), controls.bandwidth, controls.kernel)?;
    let eig = eigenvalues_of(&lrc, panel.grid())?;
    NullSpec::from_eigenvalues(eig, controls)
}

/// Fills `buf` (length `m + 1`) with a standard Brownian bridge on `k/m`, `k = 0..=m`.
///
/// Built as the Gaussian random walk minus its linear drift, so the two
/// endpoints are exactly zero.
pub fn fill_brownian_bridge<R: Rng + ?Sized>(rng: &mut R, buf: &mut [f64]) {
    let m = buf.len() - 1;
    let sd = 1.0 / (m as f64).sqrt();
    buf[0] = 0.0;
    let mut w = 0.0;
    for slot in buf[1..].iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        w += sd * z;
        *slot = w;
    }
    let end = buf[m];
    for (k, slot) in buf.iter_mut().enumerate() {
        *slot -= (k as f64 / m as f64) * end;
    }
    buf[m] = 0.0;
}

fn one_draw(spec: &NullSpec, draw: usize, acc: &mut [f64], bridge: &mut [f64]) -> f64 {
    let mut rng = stream_rng(spec.seed, draw as u64);
    acc.iter_mut().for_each(|a| *a = 0.0);
    for &lambda in &spec.eigenvalues[..spec.n_bridges] {
        fill_brownian_bridge(&mut rng, bridge);
        for (a, b) in acc.iter_mut().zip(bridge.iter()) {
            *a += lambda * b * b;
        }
    }
    acc.iter().copied().fold(0.0, f64::max)
}

/// Draws of `max_k Σ_{i ≤ n_bridges} λ_i B_i²(k/m)`, sorted ascending.
///
/// Draw `d` uses its own stream of `spec.seed`, so the output does not
/// depend on the number of worker threads.
pub fn simulate_null(spec: &NullSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.eigenvalues[..spec.n_bridges].iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateDistribution);
    }
    let m = spec.bridge_grid;
    let mut draws: Vec<f64> = (0..spec.n_draws)
        .into_par_iter()
        .map_init(
            || (vec![0.0; m + 1], vec![0.0; m + 1]),
            |(acc, bridge), d| one_draw(spec, d, acc, bridge),
        )
        .collect();
    draws.sort_by(f64::total_cmp);
    Ok(draws)
}

/// Empirical upper-`alpha` quantile: order statistic `⌈(1 - α) n⌉` (1-based).
pub fn critical_value(draws: &[f64], alpha: f64) -> Result<f64> {
    if draws.is_empty() {
        return Err(invalid("no null draws"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = draws.len();
    // guard against (1 - α)·n landing a hair above an integer
    let rank = (((1.0 - alpha) * n as f64) - 1e-9).ceil() as usize;
    Ok(draws[rank.clamp(1, n) - 1])
}

/// `(1 + #{draws ≥ observed}) / (n + 1)`; `draws` must be sorted ascending.
pub fn p_value(draws: &[f64], observed: f64) -> f64 {
    let below = draws.partition_point(|&d| d < observed);
    (1 + draws.len() - below) as f64 / (draws.len() + 1) as f64
}

/// A [`NullSpec`] together with its simulated, sorted draws.
#[derive(Debug, Clone, PartialEq)]
pub struct NullDistribution {
    spec: NullSpec,
    draws: Vec<f64>,
}

impl NullDistribution {
    pub fn simulate(spec: NullSpec) -> Result<Self> {
        let draws = simulate_null(&spec)?;
        Ok(Self { spec, draws })
    }

    pub fn spec(&self) -> &NullSpec {
        &self.spec
    }

    pub fn draws(&self) -> &[f64] {
        &self.draws
    }

    pub fn critical_value(&self, alpha: f64) -> Result<f64> {
        critical_value(&self.draws, alpha)
    }

    pub fn p_value(&self, observed: f64) -> f64 {
        p_value(&self.draws, observed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::make_uniform_grid;
    use crate::rng::stream_rng;

    fn controls(n_draws: usize, bridge_grid: usize, seed: u64) -> NullControls {
        NullControls {
            n_draws,
            bridge_grid,
            seed,
            ..NullControls::default()
        }
    }

    fn spec_of(eigs: Vec<f64>, n_draws: usize, bridge_grid: usize, seed: u64) -> NullSpec {
        let n = eigs.len();
        NullSpec {
            schema_version: NULL_SPEC_SCHEMA_VERSION,
            eigenvalues: eigs,
            n_bridges: n,
            bridge_grid,
            n_draws,
            seed,
        }
    }

    #[test]
    fn cube_root_bandwidth() {
        assert_eq!(Bandwidth::Auto.resolve(200), 5);
        assert_eq!(Bandwidth::Auto.resolve(8), 2);
        assert_eq!(Bandwidth::Auto.resolve(7), 1);
        assert_eq!(Bandwidth::Auto.resolve(1000), 10);
        assert_eq!(Bandwidth::Auto.resolve(999), 9);
    }

    #[test]
    fn iid_series_recovers_variance() {
        // iid N(0, σ²) at every grid point, bandwidth 0
        let (t_len, g, sigma) = (2000, 3, 1.7);
        let mut rng = stream_rng(11, 0);
        let series: Vec<f64> = (0..t_len * g)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lrc = estimate_lrc(&series, g, Bandwidth::Fixed(0), KernelName::Bartlett).unwrap();
        let var = sigma * sigma;
        // sd of a sample variance is σ²√(2/T)
        let band = 3.0 * var * (2.0 / t_len as f64).sqrt();
        for j in 0..g {
            assert!((lrc.at(j, j) - var).abs() < band, "{} vs {var}", lrc.at(j, j));
        }
    }

    #[test]
    fn identical_curves_give_zero_kernel() {
        let series: Vec<f64> = (0..10).flat_map(|_| [1.0, 2.0, 3.0]).collect();
        let lrc = estimate_lrc(&series, 3, Bandwidth::Auto, KernelName::Bartlett).unwrap();
        assert!(lrc.kernel.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ma1_long_run_variance() {
        // ε_t = η_t + 0.5 η_{t-1}: long-run variance (1 + 0.5)² = 2.25
        let t_len = 5000;
        let mut rng = stream_rng(5, 0);
        let eta: Vec<f64> = (0..=t_len).map(|_| rng.sample(StandardNormal)).collect();
        let series: Vec<f64> = (1..=t_len)
            .flat_map(|t| {
                let e = eta[t] + 0.5 * eta[t - 1];
                [e, e]
            })
            .collect();
        let lrc = estimate_lrc(&series, 2, Bandwidth::Fixed(20), KernelName::Bartlett).unwrap();
        assert!((lrc.at(0, 0) - 2.25).abs() < 0.225, "{}", lrc.at(0, 0));
    }

    #[test]
    fn lrc_errors() {
        assert!(matches!(
            estimate_lrc(&[0.0; 6], 2, Bandwidth::Auto, KernelName::Bartlett),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            estimate_lrc(&[0.0; 10], 2, Bandwidth::Fixed(5), KernelName::Bartlett),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn trace_matches_full_kernel() {
        let grid = make_uniform_grid(7).unwrap();
        let mut rng = stream_rng(2, 0);
        let series: Vec<f64> = (0..50 * 7).map(|_| rng.sample(StandardNormal)).collect();
        let lrc = estimate_lrc(&series, 7, Bandwidth::Auto, KernelName::Bartlett).unwrap();
        let direct: f64 = (0..7).map(|j| grid.weights()[j] * lrc.at(j, j)).sum();
        let tr = lrc_trace(&series, &grid, Bandwidth::Auto, KernelName::Bartlett).unwrap();
        assert!((tr - direct).abs() < 1e-12);
        let eig_sum: f64 = eigenvalues_of(&lrc, &grid).unwrap().iter().sum();
        assert!((eig_sum - tr).abs() < 1e-10);
    }

    fn kernel_from_fn(grid: &Grid, f: impl Fn(f64, f64) -> f64) -> LongRunCovariance {
        let g = grid.len();
        let p = grid.points();
        let mut kernel = vec![0.0; g * g];
        for j in 0..g {
            for k in 0..g {
                kernel[j * g + k] = f(p[j], p[k]);
            }
        }
        LongRunCovariance {
            kernel,
            grid_len: g,
            bandwidth: 0,
            kernel_name: KernelName::Bartlett,
        }
    }

    #[test]
    fn scaled_identity_operator() {
        // K = c · diag(1/w) is the operator c·I on the grid
        let grid = Grid::new(vec![0.0, 0.1, 0.5, 0.6, 1.0]).unwrap();
        let g = grid.len();
        let mut kernel = vec![0.0; g * g];
        for j in 0..g {
            kernel[j * g + j] = 3.0 / grid.weights()[j];
        }
        let lrc = LongRunCovariance {
            kernel,
            grid_len: g,
            bandwidth: 0,
            kernel_name: KernelName::Bartlett,
        };
        for v in eigenvalues_of(&lrc, &grid).unwrap() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_operator() {
        let grid = make_uniform_grid(41).unwrap();
        let raw: Vec<f64> = grid.points().iter().map(|&u| 1.0 + u * u).collect();
        let norm = grid.l2_norm_sq(&raw).unwrap().sqrt();
        let f: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        let p = grid.points().to_vec();
        let lrc = kernel_from_fn(&grid, |a, b| {
            let ja = p.iter().position(|&x| x == a).unwrap();
            let jb = p.iter().position(|&x| x == b).unwrap();
            2.5 * f[ja] * f[jb]
        });
        let eig = eigenvalues_of(&lrc, &grid).unwrap();
        assert!((eig[0] - 2.5).abs() < 1e-12);
        assert!(eig[1..].iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn brownian_bridge_covariance_spectrum() {
        // Mercer: min(u,v) - uv has eigenvalues 1/(kπ)²
        let grid = make_uniform_grid(101).unwrap();
        let lrc = kernel_from_fn(&grid, |u, v| u.min(v) - u * v);
        let eig = eigenvalues_of(&lrc, &grid).unwrap();
        for k in 1..=3 {
            let exact = 1.0 / (k as f64 * std::f64::consts::PI).powi(2);
            assert!((eig[k - 1] - exact).abs() / exact < 0.01, "k={k}: {}", eig[k - 1]);
        }
    }

    #[test]
    fn psd_projection_is_idempotent_on_spectrum() {
        let grid = make_uniform_grid(9).unwrap();
        let mut rng = stream_rng(3, 0);
        let series: Vec<f64> = (0..40 * 9).map(|_| rng.sample(StandardNormal)).collect();
        let lrc = estimate_lrc(&series, 9, Bandwidth::Fixed(6), KernelName::FlatTop).unwrap();
        let before = eigenvalues_of(&lrc, &grid).unwrap();
        let projected = lrc.psd_projected(&grid).unwrap();
        let after = eigenvalues_of(&projected, &grid).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-10);
        }
        let twice = eigenvalues_of(&projected.psd_projected(&grid).unwrap(), &grid).unwrap();
        for (a, b) in after.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_kernel_rejected() {
        let grid = make_uniform_grid(2).unwrap();
        let lrc = LongRunCovariance {
            kernel: vec![1.0, f64::NAN, 0.0, 1.0],
            grid_len: 2,
            bandwidth: 0,
            kernel_name: KernelName::Bartlett,
        };
        assert!(eigenvalues_of(&lrc, &grid).is_err());
    }

    #[test]
    fn truncation_share() {
        assert_eq!(retained_count(&[5.0, 4.0, 1.0], 0.99), 3);
        assert_eq!(retained_count(&[99.0, 1.0, 0.0], 0.99), 1);
        assert_eq!(retained_count(&[1.0, 0.0], 0.99), 1);
    }

    #[test]
    fn zero_spectrum_is_degenerate() {
        let spec = spec_of(vec![0.0, 0.0], 10, 10, 1);
        assert!(matches!(
            simulate_null(&spec),
            Err(Error::DegenerateDistribution)
        ));
        assert!(NullSpec::from_eigenvalues(vec![0.0, 0.0], &controls(10, 10, 0))
            .map(|s| simulate_null(&s))
            .unwrap()
            .is_err());
    }

    #[test]
    fn draws_scale_linearly_with_eigenvalues() {
        let a = simulate_null(&spec_of(vec![1.0, 0.5], 200, 100, 9)).unwrap();
        let b = simulate_null(&spec_of(vec![3.0, 1.5], 200, 100, 9)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((3.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn draws_are_seed_deterministic() {
        let spec = spec_of(vec![2.0, 1.0, 0.25], 300, 64, 42);
        assert_eq!(simulate_null(&spec).unwrap(), simulate_null(&spec).unwrap());
        assert_ne!(
            simulate_null(&spec).unwrap(),
            simulate_null(&spec.with_seed(43)).unwrap()
        );
    }

    #[test]
    fn draw_count_does_not_change_shared_draws() {
        // draw d depends on (seed, d) only
        let spec = spec_of(vec![1.0], 50, 32, 5);
        let (mut acc, mut br) = (vec![0.0; 33], vec![0.0; 33]);
        let first = one_draw(&spec, 7, &mut acc, &mut br);
        let bigger = NullSpec {
            n_draws: 500,
            ..spec.clone()
        };
        assert_eq!(first, one_draw(&bigger, 7, &mut acc, &mut br));
    }

    #[test]
    fn bridge_endpoints_and_midpoint_variance() {
        let mut rng = stream_rng(77, 0);
        let m = 100;
        let mut buf = vec![0.0; m + 1];
        let reps = 4000;
        let mut sum_sq = 0.0;
        for _ in 0..reps {
            fill_brownian_bridge(&mut rng, &mut buf);
            assert_eq!(buf[0], 0.0);
            assert_eq!(buf[m], 0.0);
            sum_sq += buf[m / 2] * buf[m / 2];
        }
        let var = sum_sq / reps as f64;
        // Var B(1/2) = 1/4; sd of the estimator is 0.25·√(2/reps)
        let se = 0.25 * (2.0 / reps as f64).sqrt();
        assert!((var - 0.25).abs() < 3.0 * se, "{var}");
    }

    #[test]
    fn single_bridge_matches_kolmogorov_quantile() {
        // sup|B| has the Kolmogorov law, 95% point 1.3581, so sup B² is near 1.8443.
        // The lattice sup sits about 0.583/√m low on the |B| scale.
        let spec = spec_of(vec![1.0], 20_000, 4000, 2024);
        let q = critical_value(&simulate_null(&spec).unwrap(), 0.05).unwrap();
        assert!((q - 1.8443).abs() < 0.06, "{q}");
    }

    #[test]
    fn order_statistic_quantiles() {
        let draws: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(critical_value(&draws, 0.05).unwrap(), 95.0);
        assert_eq!(critical_value(&draws, 0.01).unwrap(), 99.0);
        assert_eq!(critical_value(&draws, 0.10).unwrap(), 90.0);
        let sym = [-2.0, -1.0, 0.0, 1.0, 2.0];
        assert_eq!(critical_value(&sym, 0.5).unwrap(), 0.0);
        assert!(critical_value(&draws, 0.0).is_err());
        assert!(critical_value(&draws, 1.0).is_err());
        assert!(critical_value(&[], 0.5).is_err());
    }

    #[test]
    fn add_one_p_values() {
        let draws: Vec<f64> = (1..=99).map(f64::from).collect();
        assert_eq!(p_value(&draws, 0.0), 1.0);
        assert_eq!(p_value(&draws, 1000.0), 1.0 / 100.0);
        assert_eq!(p_value(&draws, 50.0), 51.0 / 100.0);
        assert_eq!(p_value(&draws, 50.5), 50.0 / 100.0);
    }

    #[test]
    fn null_spec_json_round_trip() {
        let spec = NullSpec::from_eigenvalues(vec![3.0, 1.0, 0.5], &controls(100, 50, 8)).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        let back: NullSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn spec_validation() {
        let mut s = spec_of(vec![1.0, 2.0], 10, 10, 0);
        assert!(s.validate().is_err());
        s.eigenvalues = vec![2.0, 1.0];
        s.n_bridges = 3;
        assert!(s.validate().is_err());
    }
}
