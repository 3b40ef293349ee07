//! Discretised functional data: grids, quadrature, and the `N × T × G` panel.
//!
//! Curves live on a common grid `0 ≤ u_1 < … < u_G ≤ 1`. Integrals over the
//! domain use trapezoid weights on that grid, which integrate the piecewise
//! linear interpolant of a curve exactly:
//!
//! ```text
//! ∫ f(u) du ≈ Σ_j w_j f(u_j),   w_1 = (u_2 - u_1)/2,  w_j = (u_{j+1} - u_{j-1})/2,  w_G = (u_G - u_{G-1})/2
//! ```
//!
//! Subject indices are 0-based throughout the library; time indices are the
//! natural `1..=T` when they denote break times.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Ordered evaluation points in `[0, 1]` with trapezoid quadrature weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridPoints", into = "GridPoints")]
pub struct Grid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridPoints {
    points: Vec<f64>,
}

impl TryFrom<GridPoints> for Grid {
    type Error = Error;

    fn try_from(value: GridPoints) -> Result<Self> {
        Grid::new(value.points)
    }
}

impl From<Grid> for GridPoints {
    fn from(grid: Grid) -> Self {
        GridPoints {
            points: grid.points,
        }
    }
}

impl Grid {
    /// Builds a grid from strictly increasing points inside `[0, 1]`.
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid(format!(
                "a grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(invalid("grid points must be finite"));
        }
        if points[0] < 0.0 || points[points.len() - 1] > 1.0 {
            return Err(invalid("grid points must lie in [0, 1]"));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("grid points must be strictly increasing"));
        }
        let g = points.len();
        let mut weights = vec![0.0; g];
        for j in 0..g - 1 {
            let half = 0.5 * (points[j + 1] - points[j]);
            weights[j] += half;
            weights[j + 1] += half;
        }
        Ok(Self { points, weights })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(Error::Shape {
                expected: self.len(),
                actual: len,
            });
        }
        Ok(())
    }

    /// `Σ_j w_j f(u_j)`.
    pub fn integrate(&self, values: &[f64]) -> Result<f64> {
        self.check(values.len())?;
        Ok(self.integrate_unchecked(values))
    }

    pub fn inner(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check(a.len())?;
        self.check(b.len())?;
        Ok(self.inner_unchecked(a, b))
    }

    pub fn l2_norm_sq(&self, values: &[f64]) -> Result<f64> {
        self.check(values.len())?;
        Ok(self.norm_sq_unchecked(values))
    }

    #[inline]
    pub(crate) fn integrate_unchecked(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    #[inline]
    pub(crate) fn inner_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * (x * y))
            .sum()
    }

    #[inline]
    pub(crate) fn norm_sq_unchecked(&self, values: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(values)
            .map(|(w, v)| w * v * v)
            .sum()
    }

    /// Linear interpolation of `values` (given on this grid) onto `target`.
    /// Target points outside this grid's range take the nearest end value.
    pub fn interpolate(&self, values: &[f64], target: &Grid) -> Result<Vec<f64>> {
        self.check(values.len())?;
        let pts = &self.points;
        let out = target
            .points
            .iter()
            .map(|&x| {
                if x <= pts[0] {
                    return values[0];
                }
                if x >= pts[pts.len() - 1] {
                    return values[pts.len() - 1];
                }
                let hi = pts.partition_point(|&p| p < x);
                if pts[hi] == x {
                    return values[hi];
                }
                let lo = hi - 1;
                let frac = (x - pts[lo]) / (pts[hi] - pts[lo]);
                values[lo] + frac * (values[hi] - values[lo])
            })
            .collect();
        Ok(out)
    }
}

/// `g` equally spaced points on `[0, 1]`, endpoints included.
pub fn make_uniform_grid(g: usize) -> Result<Grid> {
    if g < 2 {
        return Err(invalid(format!("uniform grid needs g >= 2, got {g}")));
    }
    let step = 1.0 / (g - 1) as f64;
    let mut points: Vec<f64> = (0..g).map(|j| j as f64 * step).collect();
    points[g - 1] = 1.0;
    Grid::new(points)
}

/// Squared L2 norm of a curve under the grid quadrature.
pub fn l2_norm_sq(curve: &[f64], grid: &Grid) -> Result<f64> {
    grid.l2_norm_sq(curve)
}

/// L2 inner product of two curves under the grid quadrature.
pub fn inner(a: &[f64], b: &[f64], grid: &Grid) -> Result<f64> {
    grid.inner(a, b)
}

/// Values of a single curve on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Curve(pub Vec<f64>);

impl Curve {
    pub fn new(values: Vec<f64>, grid: &Grid) -> Result<Self> {
        grid.check(values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("curve values must be finite"));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for Curve {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// `N` subjects observed at `T` times, each observation a curve on the grid.
///
/// Storage is dense row-major: subject, then time, then grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalPanel {
    n_subjects: usize,
    n_times: usize,
    grid: Grid,
    data: Vec<f64>,
}

impl FunctionalPanel {
    pub fn new(n_subjects: usize, n_times: usize, grid: Grid, data: Vec<f64>) -> Result<Self> {
        if n_subjects < 1 {
            return Err(invalid("panel needs at least one subject"));
        }
        if n_times < 2 {
            return Err(invalid(format!(
                "panel needs at least 2 time points, got {n_times}"
            )));
        }
        let expected = n_subjects * n_times * grid.len();
        if data.len() != expected {
            return Err(Error::Shape {
                expected,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let g = grid.len();
            return Err(invalid(format!(
                "non-finite value at subject {}, time {}, grid point {}",
                pos / (n_times * g),
                (pos / g) % n_times + 1,
                pos % g
            )));
        }
        Ok(Self {
            n_subjects,
            n_times,
            grid,
            data,
        })
    }

    /// Builds a panel by evaluating `f(subject, time, grid_index)`; `time` is 0-based.
    pub fn from_fn(
        n_subjects: usize,
        n_times: usize,
        grid: Grid,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let g = grid.len();
        let mut data = Vec::with_capacity(n_subjects * n_times * g);
        for i in 0..n_subjects {
            for t in 0..n_times {
                for j in 0..g {
                    data.push(f(i, t, j));
                }
            }
        }
        Self::new(n_subjects, n_times, grid, data)
    }

    pub fn zeros(n_subjects: usize, n_times: usize, grid: Grid) -> Result<Self> {
        let len = n_subjects * n_times * grid.len();
        Self::new(n_subjects, n_times, grid, vec![0.0; len])
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn grid_len(&self) -> usize {
        self.grid.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Curve of subject `i` at 0-based time `t`.
    pub fn curve(&self, i: usize, t: usize) -> &[f64] {
        let g = self.grid.len();
        let start = (i * self.n_times + t) * g;
        &self.data[start..start + g]
    }

    /// Whole `T × G` block of subject `i`.
    pub fn subject(&self, i: usize) -> &[f64] {
        let block = self.n_times * self.grid.len();
        &self.data[i * block..(i + 1) * block]
    }

    pub fn check_subject(&self, i: usize) -> Result<()> {
        if i >= self.n_subjects {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.n_subjects,
            });
        }
        Ok(())
    }

    /// Panel restricted to the listed subjects, in the given order.
    pub fn select_subjects(&self, subjects: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(subjects.len() * self.n_times * self.grid.len());
        for &i in subjects {
            self.check_subject(i)?;
            data.extend_from_slice(self.subject(i));
        }
        Self::new(subjects.len(), self.n_times, self.grid.clone(), data)
    }

    /// Every curve linearly interpolated onto `target`.
    pub fn resample_linear(&self, target: &Grid) -> Result<Self> {
        let g = self.grid.len();
        let mut data = Vec::with_capacity(self.n_subjects * self.n_times * target.len());
        for curve in self.data.chunks_exact(g) {
            data.extend(self.grid.interpolate(curve, target)?);
        }
        Self::new(self.n_subjects, self.n_times, target.clone(), data)
    }
}

/// Pointwise average over subjects at each time, as a `T × G` row-major block.
///
/// Sums run over subjects in index order so the result does not depend on
/// how callers parallelise elsewhere.
pub fn cross_sectional_mean_block(panel: &FunctionalPanel) -> Vec<f64> {
    let block = panel.n_times * panel.grid.len();
    let mut out = vec![0.0; block];
    for i in 0..panel.n_subjects {
        for (acc, v) in out.iter_mut().zip(panel.subject(i)) {
            *acc += v;
        }
    }
    let scale = 1.0 / panel.n_subjects as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// `X̃_t = N⁻¹ Σ_i X_it` for `t = 1..=T`.
pub fn cross_sectional_mean(panel: &FunctionalPanel) -> Vec<Curve> {
    cross_sectional_mean_block(panel)
        .chunks_exact(panel.grid.len())
        .map(|c| Curve(c.to_vec()))
        .collect()
}
