//! Synthetic-control-family estimation and confounding-aware
//! inference for panel data.
//!
//! The crate covers the full pipeline:
//!
//! - [`panel`]: block-structured panels where the last `N1` units are
//!   treated in the last `T1` periods, plus weight containers and
//!   (de)serialization.
//! - [`dgp`]: an interactive fixed-effects simulator with independent
//!   random substreams for factors, loadings, and noise.
//! - [`solver`]: penalized least squares over capped simplices for
//!   horizontal (time) and vertical (unit) weights, with oracle variants
//!   that solve on conditional means.
//! - [`estimators`]: horizontal, vertical, and doubly reweighted
//!   two-way contrasts, a placebo estimator, and a PCA factor baseline.
//! - [`inference`]: plug-in variance estimates, worst-case intervals
//!   for the two-way contrast, and permutation p-values.
//! - [`mc`]: a deterministic Monte Carlo harness over design grids.
//!
//! ```
//! use scpanel::{dgp, estimators, solver, TreatmentPattern};
//!
//! let pattern = TreatmentPattern::new(20, 20, 5, 5).unwrap();
//! let spec = dgp::DgpSpec::matched_example(pattern, 7);
//! let (panel, _draw) = dgp::simulate(&spec).unwrap();
//! let cfg = solver::SolverConfig::default();
//! let ws_h = solver::solve_horizontal(&panel, &cfg).unwrap();
//! let ws_v = solver::solve_vertical(&panel, &cfg).unwrap();
//! let est = estimators::estimate_dr(&panel, &ws_h, &ws_v).unwrap();
//! assert!(est.tau_hat.is_finite());
//! ```

pub mod dgp;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod mc;
pub mod panel;
pub mod solver;

pub use error::{Error, Result};
pub use panel::{
    AggregationWeights, Direction, Panel, TreatmentPattern, WeightSet, load_panel, save_panel,
};
