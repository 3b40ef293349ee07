//! Functional CUSUM statistics and the power-enhancement (PE) component.
//!
//! For a `T × G` block of curves `Y_1, …, Y_T` with partial sums
//! `S(t) = Σ_{s≤t} Y_s`, the CUSUM process on the lattice `x = t/T` is
//!
//! ```text
//! Z(t/T; u) = c · [ S(t; u) - (t/T) · S(T; u) ]
//! ```
//!
//! with `c = √(N/T)` applied to the cross-sectional mean series (pooled form)
//! and `c = 1/√T` applied to one subject's series. The sup over `x ∈ [0, 1]`
//! of `∫ Z² du` is the max over `t ∈ {1..T}` of the row integrals.
//!
//! The PE component counts subjects whose own sup statistic strictly exceeds
//! the high-criticism threshold `ξ` and scales the count by `√(N ∨ T)`:
//!
//! ```text
//! Z⋄ = √(N ∨ T) · #{ i : sup_x ∫ Z_i² du > ξ }
//! ξ₁ = c_ξ · ln(NT) · ln ln(NT)
//! ξ₂ = c_ξ · ln(N ∨ T) · ln ln(N ∨ T)
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nulldist::NullDistribution;
use crate::panel::{cross_sectional_mean_block, FunctionalPanel, Grid};

/// Which normalisation a CUSUM field carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CusumScale {
    /// `√(N/T)` on the cross-sectional mean.
    Pooled,
    /// `1/√T` on a single subject.
    Subject,
}

/// `Z(t/T; u_j)` for `t = 1..=T`, stored row-major `T × G`.
#[derive(Debug, Clone, PartialEq)]
pub struct CusumField {
    values: Vec<f64>,
    n_times: usize,
    grid: Grid,
    scale: CusumScale,
}

impl CusumField {
    pub fn new(values: Vec<f64>, n_times: usize, grid: Grid, scale: CusumScale) -> Result<Self> {
        if values.len() != n_times * grid.len() {
            return Err(crate::Error::Shape {
                expected: n_times * grid.len(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("CUSUM field values must be finite"));
        }
        Ok(Self {
            values,
            n_times,
            grid,
            scale,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn scale(&self) -> CusumScale {
        self.scale
    }

    /// Row at the 1-based time `t`.
    pub fn row(&self, t: usize) -> &[f64] {
        let g = self.grid.len();
        &self.values[(t - 1) * g..t * g]
    }

    /// `∫ Z²(t/T; u) du` for `t = 1..=T`.
    pub fn row_integrals(&self) -> Vec<f64> {
        self.values
            .chunks_exact(self.grid.len())
            .map(|row| self.grid.norm_sq_unchecked(row))
            .collect()
    }
}

/// Runs the CUSUM recursion over a `T × G` block, handing each row to `sink`.
///
/// Both the field builders and the fused objective path go through here, so
/// they agree bit for bit.
fn cusum_rows(block: &[f64], g: usize, factor: f64, mut sink: impl FnMut(usize, &[f64])) {
    let n_times = block.len() / g;
    let mut total = vec![0.0; g];
    for row in block.chunks_exact(g) {
        for (acc, v) in total.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut partial = vec![0.0; g];
    let mut z = vec![0.0; g];
    for (t0, row) in block.chunks_exact(g).enumerate() {
        for (acc, v) in partial.iter_mut().zip(row) {
            *acc += v;
        }
        let frac = (t0 + 1) as f64 / n_times as f64;
        for j in 0..g {
            z[j] = factor * (partial[j] - frac * total[j]);
        }
        sink(t0 + 1, &z);
    }
}

fn field_from_block(block: &[f64], grid: &Grid, factor: f64, scale: CusumScale) -> CusumField {
    let g = grid.len();
    let mut values = Vec::with_capacity(block.len());
    cusum_rows(block, g, factor, |_, z| values.extend_from_slice(z));
    CusumField {
        values,
        n_times: block.len() / g,
        grid: grid.clone(),
        scale,
    }
}

fn objective_from_block(block: &[f64], grid: &Grid, factor: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(block.len() / grid.len());
    cusum_rows(block, grid.len(), factor, |_, z| {
        out.push(grid.norm_sq_unchecked(z))
    });
    out
}

fn check_times(panel: &FunctionalPanel) -> Result<()> {
    if panel.n_times() < 2 {
        return Err(invalid("CUSUM needs T >= 2"));
    }
    Ok(())
}

/// Pooled CUSUM field of the cross-sectional mean series.
pub fn pooled_cusum(panel: &FunctionalPanel) -> Result<CusumField> {
    check_times(panel)?;
    let mean = cross_sectional_mean_block(panel);
    let factor = (panel.n_subjects() as f64 / panel.n_times() as f64).sqrt();
    Ok(field_from_block(
        &mean,
        panel.grid(),
        factor,
        CusumScale::Pooled,
    ))
}

/// `max_t ∫ Z²(t/T; u) du`.
pub fn cusum_statistic(field: &CusumField) -> f64 {
    field.row_integrals().into_iter().fold(0.0, f64::max)
}

/// CUSUM field of subject `i` (0-based) with the `1/√T` scale.
pub fn subject_cusum(panel: &FunctionalPanel, i: usize) -> Result<CusumField> {
    check_times(panel)?;
    panel.check_subject(i)?;
    let factor = 1.0 / (panel.n_times() as f64).sqrt();
    Ok(field_from_block(
        panel.subject(i),
        panel.grid(),
        factor,
        CusumScale::Subject,
    ))
}

/// `∫ Z_iT²(t/T; u) du` for `t = 1..=T` (index `t - 1`), without materialising the field.
pub fn subject_objective(panel: &FunctionalPanel, i: usize) -> Result<Vec<f64>> {
    check_times(panel)?;
    panel.check_subject(i)?;
    let factor = 1.0 / (panel.n_times() as f64).sqrt();
    Ok(objective_from_block(panel.subject(i), panel.grid(), factor))
}

/// Objectives of every subject, `N` vectors of length `T`.
pub fn subject_objectives(panel: &FunctionalPanel) -> Result<Vec<Vec<f64>>> {
    check_times(panel)?;
    let factor = 1.0 / (panel.n_times() as f64).sqrt();
    Ok((0..panel.n_subjects())
        .into_par_iter()
        .map(|i| objective_from_block(panel.subject(i), panel.grid(), factor))
        .collect())
}

/// Pooled objective `∫ Z̃²(t/T; u) du` for `t = 1..=T`.
pub fn pooled_objective(panel: &FunctionalPanel) -> Result<Vec<f64>> {
    check_times(panel)?;
    let mean = cross_sectional_mean_block(panel);
    let factor = (panel.n_subjects() as f64 / panel.n_times() as f64).sqrt();
    Ok(objective_from_block(&mean, panel.grid(), factor))
}

/// `sup_x ∫ Z_iT² du` for every subject.
pub fn subject_sup_stats(panel: &FunctionalPanel) -> Result<Vec<f64>> {
    Ok(subject_objectives(panel)?
        .into_iter()
        .map(|obj| obj.into_iter().fold(0.0, f64::max))
        .collect())
}

/// Which high-criticism threshold formula to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeVariant {
    /// `c_ξ ln(NT) ln ln(NT)`
    Xi1,
    /// `c_ξ ln(N∨T) ln ln(N∨T)`
    Xi2,
}

impl PeVariant {
    pub fn name(self) -> &'static str {
        match self {
            PeVariant::Xi1 => "xi1",
            PeVariant::Xi2 => "xi2",
        }
    }
}

impl std::str::FromStr for PeVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xi1" | "1" => Ok(PeVariant::Xi1),
            "xi2" | "2" => Ok(PeVariant::Xi2),
            other => Err(invalid(format!("unknown PE variant {other:?}"))),
        }
    }
}

/// Source of the constant `c_ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum CXi {
    Fixed(f64),
    /// `λ̂₁^{1/2}`, the root of the leading long-run covariance eigenvalue.
    LeadingEigenRoot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeConfig {
    pub c_xi: CXi,
    pub variant: PeVariant,
}

impl Default for PeConfig {
    fn default() -> Self {
        Self {
            c_xi: CXi::LeadingEigenRoot,
            variant: PeVariant::Xi2,
        }
    }
}

impl PeConfig {
    pub fn fixed(c_xi: f64, variant: PeVariant) -> Self {
        Self {
            c_xi: CXi::Fixed(c_xi),
            variant,
        }
    }

    /// Resolves `c_ξ`, reading `λ̂₁` when the data-driven mode is selected.
    pub fn resolve_c_xi(&self, leading_eigenvalue: Option<f64>) -> Result<f64> {
        let c = match self.c_xi {
            CXi::Fixed(c) => c,
            CXi::LeadingEigenRoot => {
                let l1 = leading_eigenvalue.ok_or_else(|| {
                    invalid("data-driven c_xi needs the leading long-run covariance eigenvalue")
                })?;
                l1.sqrt()
            }
        };
        if !(c > 0.0 && c.is_finite()) {
            return Err(invalid(format!("c_xi must be positive and finite, got {c}")));
        }
        Ok(c)
    }

    pub fn threshold(&self, n: usize, t: usize, leading_eigenvalue: Option<f64>) -> Result<f64> {
        threshold(self.variant, self.resolve_c_xi(leading_eigenvalue)?, n, t)
    }
}

/// High-criticism threshold `ξ` for `N` subjects and `T` times.
pub fn threshold(variant: PeVariant, c_xi: f64, n: usize, t: usize) -> Result<f64> {
    if !(c_xi > 0.0 && c_xi.is_finite()) {
        return Err(invalid(format!("c_xi must be positive and finite, got {c_xi}")));
    }
    let arg = match variant {
        PeVariant::Xi1 => n as f64 * t as f64,
        PeVariant::Xi2 => n.max(t) as f64,
    };
    if arg <= std::f64::consts::E {
        return Err(invalid(format!(
            "threshold argument {arg} must exceed e so that ln ln is positive"
        )));
    }
    let l = arg.ln();
    Ok(c_xi * l * l.ln())
}

/// Number of subjects whose sup statistic is strictly above `xi`.
pub fn exceedances(sups: &[f64], xi: f64) -> usize {
    sups.iter().filter(|&&s| s > xi).count()
}

/// `√(N ∨ T) · #{i : sups_i > xi}`.
pub fn pe_component(sups: &[f64], xi: f64, n: usize, t: usize) -> f64 {
    (n.max(t) as f64).sqrt() * exceedances(sups, xi) as f64
}

/// Outcome of one PE-CUSUM test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub z_nt: f64,
    pub z_pe: f64,
    pub z_hat: f64,
    pub exceedances: usize,
    pub subject_sups: Vec<f64>,
    pub threshold: f64,
    pub c_xi: f64,
    pub variant: PeVariant,
    /// p-value of `z_hat` under the simulated limit law, when one was supplied.
    pub p_value: Option<f64>,
    /// p-value of `z_nt` alone (the plain CUSUM test).
    pub cusum_p_value: Option<f64>,
}

impl TestResult {
    pub fn rejects(&self, critical_value: f64) -> bool {
        self.z_hat > critical_value
    }
}

/// PE-CUSUM test `Ẑ = Z + Z⋄` on a panel.
///
/// The data-driven `c_ξ` reads `λ̂₁` from `null`, so it needs one.
pub fn pe_cusum_test(
    panel: &FunctionalPanel,
    cfg: &PeConfig,
    null: Option<&NullDistribution>,
) -> Result<TestResult> {
    let z_nt = cusum_statistic(&pooled_cusum(panel)?);
    let sups = subject_sup_stats(panel)?;
    let lambda1 = match null {
        Some(d) => Some(d.spec().leading_eigenvalue()?),
        None => None,
    };
    let c_xi = cfg.resolve_c_xi(lambda1)?;
    let (n, t) = (panel.n_subjects(), panel.n_times());
    let xi = threshold(cfg.variant, c_xi, n, t)?;
    let count = exceedances(&sups, xi);
    let z_pe = pe_component(&sups, xi, n, t);
    let z_hat = z_nt + z_pe;
    Ok(TestResult {
        z_nt,
        z_pe,
        z_hat,
        exceedances: count,
        subject_sups: sups,
        threshold: xi,
        c_xi,
        variant: cfg.variant,
        p_value: null.map(|d| d.p_value(z_hat)),
        cusum_p_value: null.map(|d| d.p_value(z_nt)),
    })
}
