//! Structural-break detection in high-dimensional functional time series.
//!
//! The power-enhanced CUSUM test, subject-level break estimation, clustering
//! of break times into latent groups and the Monte-Carlo design used to study
//! them.

pub mod breaks;
pub mod cusum;
pub mod error;
pub mod io;
pub mod nulldist;
pub mod panel;
pub mod rng;
pub mod simulate;

pub use breaks::{BreakReport, ClusterModel};
pub use cusum::{PeConfig, PeVariant, TestResult};
pub use error::{Error, Result};
pub use nulldist::{NullDistribution, NullSpec};
pub use panel::{Curve, FunctionalPanel, Grid};
