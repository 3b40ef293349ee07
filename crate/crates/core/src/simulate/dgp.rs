//! Simulated panels: Fourier-basis errors with VAR(1) scores and step breaks.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nulldist::{lrc_trace, Bandwidth, KernelName};
use crate::panel::{make_uniform_grid, Curve, FunctionalPanel, Grid};
use crate::rng::{stream_rng, StreamRng};

pub const MAX_BASIS: usize = 21;
pub const BURN_IN: usize = 100;
const MAX_VAR_DRAWS: usize = 100;

/// Breaks concentrated on a few common times.
///
/// The last `⌊sdr · N⌋` subjects carry breaks and are split, in index order,
/// into `fractions.len()` consecutive groups of (nearly) equal size; group
/// `k` breaks at `⌊fractions[k] · T⌋`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDesign {
    pub fractions: Vec<f64>,
}

impl GroupDesign {
    /// Three groups at a quarter, half and three quarters of the sample.
    pub fn three_groups() -> Self {
        Self {
            fractions: vec![0.25, 0.5, 0.75],
        }
    }

    pub fn break_times(&self, t: usize) -> Result<Vec<usize>> {
        self.fractions
            .iter()
            .map(|f| {
                let b = (f * t as f64 + 1e-9).floor() as usize;
                if f.is_finite() && (1..t).contains(&b) {
                    Ok(b)
                } else {
                    Err(invalid(format!("group break fraction {f} gives time {b}")))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n: usize,
    pub t: usize,
    pub grid_size: usize,
    pub j_basis: usize,
    pub var_band: usize,
    pub var_coef_range: (f64, f64),
    pub sdr: f64,
    pub snr: f64,
    pub m: usize,
    pub break_window: (f64, f64),
    pub seed: u64,
    pub k0_design: Option<GroupDesign>,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 200,
            t: 200,
            grid_size: 101,
            j_basis: MAX_BASIS,
            var_band: 3,
            var_coef_range: (-0.3, 0.3),
            sdr: 0.1,
            snr: 0.1,
            m: 1,
            break_window: (0.25, 0.75),
            seed: 0,
            k0_design: None,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t < 4 {
            return Err(invalid("need N >= 1 and T >= 4"));
        }
        if self.grid_size < 2 {
            return Err(invalid("grid_size must be at least 2"));
        }
        if self.j_basis == 0 || self.j_basis > MAX_BASIS {
            return Err(invalid(format!("j_basis must lie in 1..={MAX_BASIS}")));
        }
        if !(0.0..=1.0).contains(&self.sdr) {
            return Err(invalid(format!("sdr must lie in [0, 1], got {}", self.sdr)));
        }
        if !(self.snr >= 0.0) || !self.snr.is_finite() {
            return Err(invalid(format!("snr must be nonnegative, got {}", self.snr)));
        }
        if self.m == 0 || self.m > self.j_basis {
            return Err(invalid(format!("m must lie in 1..={}", self.j_basis)));
        }
        let (lo, hi) = self.var_coef_range;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid("var_coef_range must be a finite interval"));
        }
        let (a, b) = self.break_window;
        if !(0.0 < a && a <= b && b < 1.0) {
            return Err(invalid("break_window fractions must satisfy 0 < lo <= hi < 1"));
        }
        let (first, last) = self.break_lattice();
        if first < 1 || last >= self.t || first > last {
            return Err(invalid(format!(
                "break window gives empty time range {first}..={last}"
            )));
        }
        if let Some(d) = &self.k0_design {
            if d.fractions.is_empty() {
                return Err(invalid("group design needs at least one group"));
            }
            d.break_times(self.t)?;
            if self.n_breaks() < d.fractions.len() {
                return Err(invalid("fewer break subjects than design groups"));
            }
        }
        Ok(())
    }

    /// `⌊sdr · N⌋`.
    pub fn n_breaks(&self) -> usize {
        (self.sdr * self.n as f64 + 1e-9).floor() as usize
    }

    /// `(⌈lo · T⌉, ⌊hi · T⌋)`.
    pub fn break_lattice(&self) -> (usize, usize) {
        let t = self.t as f64;
        (
            (self.break_window.0 * t - 1e-9).ceil() as usize,
            (self.break_window.1 * t + 1e-9).floor() as usize,
        )
    }

    pub fn grid(&self) -> Result<Grid> {
        make_uniform_grid(self.grid_size)
    }
}

/// Constant, then `√2 cos(2πku)`, `√2 sin(2πku)` for `k = 1..=10`.
pub fn fourier_system(grid: &Grid) -> Vec<Curve> {
    let mut out = Vec::with_capacity(MAX_BASIS);
    out.push(Curve(vec![1.0; grid.len()]));
    for k in 1..=(MAX_BASIS - 1) / 2 {
        let w = 2.0 * PI * k as f64;
        out.push(Curve(grid.points().iter().map(|u| SQRT_2 * (w * u).cos()).collect()));
        out.push(Curve(grid.points().iter().map(|u| SQRT_2 * (w * u).sin()).collect()));
    }
    out
}

/// A random `j_basis` of the 21 Fourier functions and their indices in [`fourier_system`].
pub fn fourier_basis<R: Rng + ?Sized>(
    j_basis: usize,
    grid: &Grid,
    rng: &mut R,
) -> Result<(Vec<Curve>, Vec<usize>)> {
    if j_basis == 0 || j_basis > MAX_BASIS {
        return Err(invalid(format!("j_basis must lie in 1..={MAX_BASIS}")));
    }
    let system = fourier_system(grid);
    let mut order: Vec<usize> = (0..MAX_BASIS).collect();
    order.shuffle(rng);
    order.truncate(j_basis);
    let basis = order.iter().map(|&k| system[k].clone()).collect();
    Ok((basis, order))
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Banded `N × N` matrix with `U(lo, hi)` entries on `|i - j| ≤ band`,
/// redrawn until its spectral radius is below one.
pub fn draw_var_matrix<R: Rng + ?Sized>(
    n: usize,
    band: usize,
    range: (f64, f64),
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (lo, hi) = range;
    for _ in 0..MAX_VAR_DRAWS {
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(band)..(i + band + 1).min(n) {
                a[(i, j)] = if lo == hi { lo } else { rng.random_range(lo..hi) };
            }
        }
        if spectral_radius(&a) < 1.0 {
            return Ok(a);
        }
    }
    Err(Error::Calibration(format!(
        "no stationary VAR matrix in {MAX_VAR_DRAWS} draws"
    )))
}

/// `T × N` path of `β_t = A β_{t-1} + ν_t`, `ν_t ~ N(0, I)`, after `burn_in`
/// steps from zero. Only the band of `A` is read.
pub fn simulate_var<R: Rng + ?Sized>(
    a: &DMatrix<f64>,
    band: usize,
    t: usize,
    burn_in: usize,
    rng: &mut R,
) -> Vec<f64> {
    let n = a.nrows();
    let mut beta = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut out = Vec::with_capacity(t * n);
    for step in 0..burn_in + t {
        for i in 0..n {
            let mut acc = 0.0;
            for k in i.saturating_sub(band)..(i + band + 1).min(n) {
                acc += a[(i, k)] * beta[k];
            }
            next[i] = acc + rng.sample::<f64, _>(StandardNormal);
        }
        std::mem::swap(&mut beta, &mut next);
        if step >= burn_in {
            out.extend_from_slice(&beta);
        }
    }
    out
}

/// `ε_it(u) = Σ_j (β_{it,j} + η_{it,j}) f_j(u)` as an `N × T × G` block.
///
/// Each basis coordinate gets its own VAR path across subjects;
/// `η_{it,j} ~ N(0, 1/j)` with `j` the 1-based position in `basis`.
pub fn gen_errors<R: Rng + ?Sized>(
    cfg: &DgpConfig,
    a: &DMatrix<f64>,
    basis: &[Curve],
    rng: &mut R,
) -> Vec<f64> {
    let (n, t) = (cfg.n, cfg.t);
    let g = basis[0].len();
    let jb = basis.len();
    let mut coef = vec![0.0; n * t * jb];
    for (j, _) in basis.iter().enumerate() {
        let path = simulate_var(a, cfg.var_band, t, BURN_IN, rng);
        let sd = (1.0 / (j + 1) as f64).sqrt();
        for t0 in 0..t {
            for i in 0..n {
                let eta: f64 = rng.sample(StandardNormal);
                coef[(i * t + t0) * jb + j] = path[t0 * n + i] + sd * eta;
            }
        }
    }
    let mut out = vec![0.0; n * t * g];
    for (row, c) in out.chunks_exact_mut(g).zip(coef.chunks_exact(jb)) {
        for (cj, f) in c.iter().zip(basis) {
            for (o, v) in row.iter_mut().zip(&f.0) {
                *o += cj * v;
            }
        }
    }
    out
}

/// `√c* · m^{-1/2} Σ_{j ≤ m} f_j`.
pub fn break_function(m: usize, c_star: f64, basis: &[Curve]) -> Result<Curve> {
    if m == 0 || m > basis.len() {
        return Err(invalid(format!("m must lie in 1..={}", basis.len())));
    }
    if !(c_star >= 0.0) {
        return Err(invalid(format!("c_star must be nonnegative, got {c_star}")));
    }
    let scale = c_star.sqrt() / (m as f64).sqrt();
    let mut out = vec![0.0; basis[0].len()];
    for f in &basis[..m] {
        for (o, v) in out.iter_mut().zip(&f.0) {
            *o += scale * v;
        }
    }
    Ok(Curve(out))
}

/// `tr Ω_{ε_i} = J [(I - A)^{-1}(I - Aᵀ)^{-1}]_{ii} + Σ_{j ≤ J} 1/j` for every subject.
pub fn error_lrv_traces(a: &DMatrix<f64>, j_basis: usize) -> Result<Vec<f64>> {
    let n = a.nrows();
    let inv = (DMatrix::identity(n, n) - a)
        .try_inverse()
        .ok_or_else(|| Error::Calibration("I - A is singular".into()))?;
    let harmonic: f64 = (1..=j_basis).map(|j| 1.0 / j as f64).sum();
    Ok((0..n)
        .map(|i| j_basis as f64 * inv.row(i).norm_squared() + harmonic)
        .collect())
}

/// `c* = SNR · tr Ω / ((τ/T)(1 - τ/T))`.
pub fn calibrate_c_star(snr: f64, tau: usize, t: usize, lrv_trace: f64) -> Result<f64> {
    if tau == 0 || tau >= t {
        return Err(invalid(format!("break time {tau} must lie in 1..{t}")));
    }
    let x = tau as f64 / t as f64;
    Ok(snr * lrv_trace / (x * (1.0 - x)))
}

/// What was generated. Subject indices are 0-based in memory, 1-based in JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "GroundTruthWire")]
pub struct GroundTruth {
    pub break_set: BTreeSet<usize>,
    pub tau: BTreeMap<usize, usize>,
    pub delta: BTreeMap<usize, Curve>,
    /// `(b_k, members)` for a group design.
    pub clusters: Option<Vec<(usize, Vec<usize>)>>,
    /// Indices into [`fourier_system`] of the basis used, in order.
    pub basis_order: Vec<usize>,
    /// Error long-run variance trace of every subject.
    pub lrv_traces: Vec<f64>,
}

#[derive(Serialize)]
struct GroundTruthWire {
    break_set: Vec<usize>,
    tau: BTreeMap<usize, usize>,
    delta: BTreeMap<usize, Curve>,
    clusters: Option<Vec<(usize, Vec<usize>)>>,
    basis_order: Vec<usize>,
    lrv_traces: Vec<f64>,
}

impl From<GroundTruth> for GroundTruthWire {
    fn from(g: GroundTruth) -> Self {
        Self {
            break_set: g.break_set.iter().map(|i| i + 1).collect(),
            tau: g.tau.into_iter().map(|(i, t)| (i + 1, t)).collect(),
            delta: g.delta.into_iter().map(|(i, d)| (i + 1, d)).collect(),
            clusters: g.clusters.map(|cs| {
                cs.into_iter()
                    .map(|(b, m)| (b, m.into_iter().map(|i| i + 1).collect()))
                    .collect()
            }),
            basis_order: g.basis_order,
            lrv_traces: g.lrv_traces,
        }
    }
}

impl GroundTruth {
    /// `(τ_i/T)(1 - τ_i/T) ‖δ_i‖² / tr Ω_{ε_i}` for each break subject.
    pub fn realized_snr(&self, grid: &Grid, t: usize) -> Result<BTreeMap<usize, f64>> {
        self.tau
            .iter()
            .map(|(&i, &tau)| {
                let x = tau as f64 / t as f64;
                let norm = grid.l2_norm_sq(&self.delta[&i].0)?;
                Ok((i, x * (1.0 - x) * norm / self.lrv_traces[i]))
            })
            .collect()
    }

    /// True groups ordered by break time, or one group per distinct break time.
    pub fn partition(&self) -> Vec<(usize, Vec<usize>)> {
        if let Some(c) = &self.clusters {
            return c.clone();
        }
        let mut by_time: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&i, &t) in &self.tau {
            by_time.entry(t).or_default().push(i);
        }
        by_time.into_iter().collect()
    }
}

/// A simulated panel with the error block it was built on.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub panel: FunctionalPanel,
    pub errors: Vec<f64>,
    pub truth: GroundTruth,
    pub var_matrix: DMatrix<f64>,
}

fn assign_breaks(cfg: &DgpConfig, rng: &mut StreamRng) -> Result<(BTreeMap<usize, usize>, Option<Vec<(usize, Vec<usize>)>>)> {
    let n_breaks = cfg.n_breaks();
    match &cfg.k0_design {
        None => {
            let (first, last) = cfg.break_lattice();
            let subjects = rand::seq::index::sample(rng, cfg.n, n_breaks).into_vec();
            let mut tau = BTreeMap::new();
            for i in subjects {
                tau.insert(i, rng.random_range(first..=last));
            }
            Ok((tau, None))
        }
        Some(design) => {
            let times = design.break_times(cfg.t)?;
            let k = times.len();
            let start = cfg.n - n_breaks;
            let mut tau = BTreeMap::new();
            let mut clusters = Vec::with_capacity(k);
            for (g, &b) in times.iter().enumerate() {
                let lo = start + g * n_breaks / k;
                let hi = start + (g + 1) * n_breaks / k;
                let members: Vec<usize> = (lo..hi).collect();
                for &i in &members {
                    tau.insert(i, b);
                }
                clusters.push((b, members));
            }
            Ok((tau, Some(clusters)))
        }
    }
}

/// Generates a panel and its ground truth; fully determined by `cfg.seed`.
///
/// Draw order: VAR matrix, basis permutation, errors, break subjects and times.
pub fn simulate_panel(cfg: &DgpConfig) -> Result<Simulated> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut rng = stream_rng(cfg.seed, 0);
    let a = draw_var_matrix(cfg.n, cfg.var_band, cfg.var_coef_range, &mut rng)?;
    let (basis, basis_order) = fourier_basis(cfg.j_basis, &grid, &mut rng)?;
    let errors = gen_errors(cfg, &a, &basis, &mut rng);
    let (tau, clusters) = assign_breaks(cfg, &mut rng)?;
    let lrv_traces = error_lrv_traces(&a, cfg.j_basis)?;

    let g = grid.len();
    let mut data = errors.clone();
    let mut delta = BTreeMap::new();
    for (&i, &t_break) in &tau {
        let c_star = calibrate_c_star(cfg.snr, t_break, cfg.t, lrv_traces[i])?;
        let d = break_function(cfg.m, c_star, &basis)?;
        for t0 in t_break..cfg.t {
            let row = &mut data[(i * cfg.t + t0) * g..(i * cfg.t + t0 + 1) * g];
            for (x, v) in row.iter_mut().zip(&d.0) {
                *x += v;
            }
        }
        delta.insert(i, d);
    }
    let panel = FunctionalPanel::new(cfg.n, cfg.t, grid, data)?;
    let truth = GroundTruth {
        break_set: tau.keys().copied().collect(),
        tau,
        delta,
        clusters,
        basis_order,
        lrv_traces,
    };
    Ok(Simulated {
        panel,
        errors,
        truth,
        var_matrix: a,
    })
}

impl Simulated {
    /// Kernel estimate of `tr Ω_{ε_i}` from the simulated errors of subject `i`.
    pub fn estimated_error_trace(
        &self,
        i: usize,
        bandwidth: Bandwidth,
        kernel: KernelName,
    ) -> Result<f64> {
        self.panel.check_subject(i)?;
        let len = self.panel.n_times() * self.panel.grid_len();
        lrc_trace(&self.errors[i * len..(i + 1) * len], self.panel.grid(), bandwidth, kernel)
    }

    /// Break-subject SNRs with `tr Ω` replaced by its estimate from the errors.
    pub fn empirical_snr(&self, bandwidth: Bandwidth, kernel: KernelName) -> Result<BTreeMap<usize, f64>> {
        let t = self.panel.n_times();
        let grid = self.panel.grid();
        self.truth
            .tau
            .iter()
            .map(|(&i, &tau)| {
                let x = tau as f64 / t as f64;
                let norm = grid.l2_norm_sq(&self.truth.delta[&i].0)?;
                let tr = self.estimated_error_trace(i, bandwidth, kernel)?;
                Ok((i, x * (1.0 - x) * norm / tr))
            })
            .collect()
    }
}

/// [`simulate_panel`] without the error block.
pub fn gen_panel(cfg: &DgpConfig) -> Result<(FunctionalPanel, GroundTruth)> {
    let s = simulate_panel(cfg)?;
    Ok((s.panel, s.truth))
}
