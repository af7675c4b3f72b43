//! Plug-in variance estimators, Gaussian confidence intervals, and the
//! placebo permutation test.
//!
//! The regression CIs treat the aggregated outcomes on the `v` side as the
//! dominant noise source: the horizontal interval conditions on loadings
//! and estimates the variance across post periods, the vertical one
//! conditions on factors and estimates it across treated units. The
//! double-robust interval takes the worst case of the two plug-ins.
//! Critical values are Gaussian throughout; no small-sample t correction
//! is applied.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{self, TauEstimate};
use crate::panel::{AggregationWeights, Direction, Panel, WeightSet};

/// What the reported interval is valid conditional on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Valid given the realized loadings (horizontal regression).
    GivenLoadings,
    /// Valid given the realized factors (vertical regression).
    GivenFactors,
    /// Worst case over the two conditioning sets (double-robust).
    WorstCase,
    /// Finite-sample permutation logic (placebo test).
    Permutation,
}

/// A point estimate with its Gaussian confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub tau_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub conditioning: Conditioning,
    pub variance_components: BTreeMap<String, f64>,
}

fn check_level(level: f64) -> Result<f64> {
    if !(level.is_finite() && 0.0 < level && level < 1.0) {
        return Err(Error::invalid(format!("confidence level must be in (0, 1), got {level}")));
    }
    Ok(level)
}

/// Two-sided Gaussian critical value `z_{1 - alpha/2}` for `level = 1 - alpha`.
pub fn z_critical(level: f64) -> Result<f64> {
    check_level(level)?;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

fn sample_variance(z: &DVector<f64>) -> f64 {
    let n = z.len() as f64;
    let mean = z.sum() / n;
    z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Horizontal plug-in variance: `||v||^2` times the sample variance of the
/// q-aggregated treated outcomes across post periods. Needs at least 3
/// post periods.
pub fn variance_horizontal(
    panel: &Panel,
    ws: &WeightSet,
    q: Option<&AggregationWeights>,
) -> Result<f64> {
    if ws.direction != Direction::Horizontal {
        return Err(Error::invalid("variance_horizontal expects horizontal weights"));
    }
    ws.validate()?;
    let p = panel.pattern();
    if p.n_post() < 3 {
        return Err(Error::invalid(format!(
            "horizontal variance needs at least 3 post periods, got {}",
            p.n_post()
        )));
    }
    if ws.v.len() != p.n_post() {
        return Err(Error::invalid("weight length does not match the post block"));
    }
    let q = resolve_q(q, p.n_treated())?;
    // Z_t = sum_n q_n Y[n, t] over post periods t.
    let z = panel.treated_post().transpose() * &q.q;
    Ok(ws.v.norm_squared() * sample_variance(&z))
}

/// Vertical plug-in variance: `||v||^2` times the sample variance of the
/// q-aggregated post outcomes across treated units. Needs at least 3
/// treated units.
pub fn variance_vertical(
    panel: &Panel,
    ws: &WeightSet,
    q: Option<&AggregationWeights>,
) -> Result<f64> {
    if ws.direction != Direction::Vertical {
        return Err(Error::invalid("variance_vertical expects vertical weights"));
    }
    ws.validate()?;
    let p = panel.pattern();
    if p.n_treated() < 3 {
        return Err(Error::invalid(format!(
            "vertical variance needs at least 3 treated units, got {}",
            p.n_treated()
        )));
    }
    if ws.v.len() != p.n_treated() {
        return Err(Error::invalid("weight length does not match the treated block"));
    }
    let q = resolve_q(q, p.n_post())?;
    // Z_n = sum_t q_t Y[n, t] over treated units n.
    let z = panel.treated_post() * &q.q;
    Ok(ws.v.norm_squared() * sample_variance(&z))
}

fn resolve_q(q: Option<&AggregationWeights>, len: usize) -> Result<AggregationWeights> {
    match q {
        Some(qq) => {
            qq.validate()?;
            if qq.len() != len {
                return Err(Error::invalid(format!(
                    "aggregation weights must have length {len}, got {}",
                    qq.len()
                )));
            }
            Ok(qq.clone())
        }
        None => AggregationWeights::uniform(len),
    }
}

/// Point estimate and Gaussian CI for a single-direction regression
/// estimator; the direction is taken from the weight set.
pub fn ci_regression(
    panel: &Panel,
    ws: &WeightSet,
    q: Option<&AggregationWeights>,
    level: f64,
) -> Result<EstimateReport> {
    check_level(level)?;
    let (est, var, conditioning, key) = match ws.direction {
        Direction::Horizontal => (
            estimators::estimate_horizontal(panel, ws, q)?,
            variance_horizontal(panel, ws, q)?,
            Conditioning::GivenLoadings,
            "horizontal",
        ),
        Direction::Vertical => (
            estimators::estimate_vertical(panel, ws, q)?,
            variance_vertical(panel, ws, q)?,
            Conditioning::GivenFactors,
            "vertical",
        ),
    };
    build_report(est.tau_hat, var.max(0.0), level, conditioning, BTreeMap::from([(key.to_string(), var)]))
}

/// Double-robust estimate with the worst-case interval: the larger of the
/// horizontal-style and vertical-style plug-in variances.
pub fn ci_dr(panel: &Panel, ws_h: &WeightSet, ws_v: &WeightSet, level: f64) -> Result<EstimateReport> {
    check_level(level)?;
    let est = estimators::estimate_dr(panel, ws_h, ws_v)?;
    let p = panel.pattern();
    if p.n_post() < 3 || p.n_treated() < 3 {
        return Err(Error::invalid(
            "double-robust variance needs at least 3 post periods and 3 treated units",
        ));
    }

    // D_t: treated mix minus control mix at post period t.
    let d = panel.treated_post().transpose() * &ws_v.v
        - panel.control_post().transpose() * &ws_v.w;
    let v_h = ws_h.v.norm_squared() * sample_variance(&d);

    // E_n: post mix minus pre mix for unit n (controls and treated alike
    // enter through their own rows).
    let e = panel.treated_post() * &ws_h.v - panel.treated_pre() * &ws_h.w;
    let v_v = ws_v.v.norm_squared() * sample_variance(&e);

    let components = BTreeMap::from([
        ("horizontal".to_string(), v_h),
        ("vertical".to_string(), v_v),
    ]);
    build_report(est.tau_hat, v_h.max(v_v).max(0.0), level, Conditioning::WorstCase, components)
}

fn build_report(
    tau_hat: f64,
    variance: f64,
    level: f64,
    conditioning: Conditioning,
    variance_components: BTreeMap<String, f64>,
) -> Result<EstimateReport> {
    let se = variance.sqrt();
    let z = z_critical(level)?;
    Ok(EstimateReport {
        tau_hat,
        se,
        ci_low: tau_hat - z * se,
        ci_high: tau_hat + z * se,
        level,
        conditioning,
        variance_components,
    })
}

/// Permutation p-value: the rank share of the treated estimate among the
/// placebo estimates, `(1 + #{j != treated : |tau_j| >= |tau_treated|}) / n`.
pub fn placebo_test(estimates: &[TauEstimate], treated_index: usize) -> Result<f64> {
    if estimates.len() < 2 {
        return Err(Error::invalid(format!(
            "placebo test needs at least 2 estimates, got {}",
            estimates.len()
        )));
    }
    if treated_index >= estimates.len() {
        return Err(Error::invalid(format!(
            "treated index {treated_index} out of range for {} estimates",
            estimates.len()
        )));
    }
    let treated = estimates[treated_index].tau_hat.abs();
    if !treated.is_finite() {
        return Err(Error::invalid("treated estimate is not finite"));
    }
    let n_ge = estimates
        .iter()
        .enumerate()
        .filter(|(j, e)| *j != treated_index && e.tau_hat.abs() >= treated)
        .count();
    Ok((1 + n_ge) as f64 / estimates.len() as f64)
}
