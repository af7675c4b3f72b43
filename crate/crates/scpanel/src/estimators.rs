//! Treatment-effect estimators built on weight sets.
//!
//! All estimators contrast weighted post-treatment outcomes with weighted
//! pre-treatment outcomes. The horizontal estimator works per treated
//! unit, the vertical one per post period, and the double-robust one
//! combines both weight sets so that either a correct horizontal or a
//! correct vertical side removes the confounding bias. Unit and time fixed
//! effects cancel exactly in the double-robust contrast, which therefore
//! uses no intercept.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dgp::DgpSpec;
use crate::error::{Error, Result};
use crate::panel::{AggregationWeights, Direction, Panel, WeightSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Horizontal,
    Vertical,
    SyntheticDid,
    Placebo,
    PcaBaseline,
}

/// A point estimate together with the weights that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    pub tau_hat: f64,
    pub estimator: EstimatorKind,
    pub weights_used: Vec<WeightSet>,
    pub q_used: Option<AggregationWeights>,
}

fn expect_direction(ws: &WeightSet, want: Direction) -> Result<()> {
    if ws.direction != want {
        return Err(Error::invalid(format!(
            "expected {want} weights, got {} weights",
            ws.direction
        )));
    }
    ws.validate()
}

fn check_lengths(ws: &WeightSet, dim_w: usize, dim_v: usize, what: &str) -> Result<()> {
    if ws.w.len() != dim_w || ws.v.len() != dim_v {
        return Err(Error::invalid(format!(
            "{what} weights have lengths ({}, {}) but the panel requires ({dim_w}, {dim_v})",
            ws.w.len(),
            ws.v.len()
        )));
    }
    Ok(())
}

fn resolve_q(q: Option<&AggregationWeights>, len: usize, what: &str) -> Result<AggregationWeights> {
    match q {
        Some(qq) => {
            qq.validate()?;
            if qq.len() != len {
                return Err(Error::invalid(format!(
                    "aggregation weights must have one entry per {what} ({len}), got {}",
                    qq.len()
                )));
            }
            Ok(qq.clone())
        }
        None => AggregationWeights::uniform(len),
    }
}

/// Horizontal estimate: per treated unit `n`, contrast its weighted post
/// outcomes with its weighted pre outcomes minus the intercept, then
/// aggregate with `q` (uniform by default) across treated units.
pub fn estimate_horizontal(
    panel: &Panel,
    ws: &WeightSet,
    q: Option<&AggregationWeights>,
) -> Result<TauEstimate> {
    expect_direction(ws, Direction::Horizontal)?;
    let p = panel.pattern();
    check_lengths(ws, p.n_pre(), p.n_post(), "horizontal")?;
    let q = resolve_q(q, p.n_treated(), "treated unit")?;

    let per_unit = panel.treated_post() * &ws.v - panel.treated_pre() * &ws.w;
    let tau_hat = q.q.dot(&per_unit) - ws.beta;
    Ok(TauEstimate {
        tau_hat,
        estimator: EstimatorKind::Horizontal,
        weights_used: vec![ws.clone()],
        q_used: Some(q),
    })
}

/// Vertical estimate: per post period `t`, contrast the weighted treated
/// average with the weighted control average minus the intercept, then
/// aggregate with `q` across post periods.
pub fn estimate_vertical(
    panel: &Panel,
    ws: &WeightSet,
    q: Option<&AggregationWeights>,
) -> Result<TauEstimate> {
    expect_direction(ws, Direction::Vertical)?;
    let p = panel.pattern();
    check_lengths(ws, p.n_controls(), p.n_treated(), "vertical")?;
    let q = resolve_q(q, p.n_post(), "post period")?;

    let per_period = panel.treated_post().transpose() * &ws.v
        - panel.control_post().transpose() * &ws.w;
    let tau_hat = q.q.dot(&per_period) - ws.beta;
    Ok(TauEstimate {
        tau_hat,
        estimator: EstimatorKind::Vertical,
        weights_used: vec![ws.clone()],
        q_used: Some(q),
    })
}

/// Double-robust estimate: the two-way weighted contrast
///
/// ```text
/// sum_{n,t} v_v[n] v_h[t] (Y[n,t] - sum_s w_h[s] Y[n,s]
///                          - sum_i w_v[i] Y[i,t]
///                          + sum_{i,s} w_v[i] w_h[s] Y[i,s])
/// ```
///
/// Unit and time fixed effects cancel exactly, so no intercept appears.
pub fn estimate_dr(panel: &Panel, ws_h: &WeightSet, ws_v: &WeightSet) -> Result<TauEstimate> {
    expect_direction(ws_h, Direction::Horizontal)?;
    expect_direction(ws_v, Direction::Vertical)?;
    let p = panel.pattern();
    check_lengths(ws_h, p.n_pre(), p.n_post(), "horizontal")?;
    check_lengths(ws_v, p.n_controls(), p.n_treated(), "vertical")?;

    // treated x (post - weighted pre), then mix controls the same way.
    let treated_contrast = panel.treated_post() * &ws_h.v - panel.treated_pre() * &ws_h.w;
    let control_contrast = panel.control_post() * &ws_h.v - panel.control_pre() * &ws_h.w;
    let tau_hat = ws_v.v.dot(&treated_contrast) - ws_v.w.dot(&control_contrast);
    Ok(TauEstimate {
        tau_hat,
        estimator: EstimatorKind::SyntheticDid,
        weights_used: vec![ws_h.clone(), ws_v.clone()],
        q_used: None,
    })
}

/// Expected double-robust estimation error `E[tau_hat] - tau` implied by
/// the deterministic confounders of `spec`: the inner product of the
/// loading mismatch (weighted controls minus weighted treated) with the
/// factor mismatch (weighted pre minus weighted post). Exogenous draws
/// have mean zero and drop out. Either mismatch vector being zero kills
/// the bias, which is the double-robustness property.
pub fn bias_oracle(spec: &DgpSpec, ws_h: &WeightSet, ws_v: &WeightSet) -> Result<f64> {
    spec.validate()?;
    expect_direction(ws_h, Direction::Horizontal)?;
    expect_direction(ws_v, Direction::Vertical)?;
    let p = &spec.pattern;
    check_lengths(ws_h, p.n_pre(), p.n_post(), "horizontal")?;
    check_lengths(ws_v, p.n_controls(), p.n_treated(), "vertical")?;

    let mut loading_gap = DVector::zeros(spec.r);
    for i in 0..p.n_controls() {
        loading_gap += ws_v.w[i] * spec.gamma.row(i).transpose();
    }
    for n in 0..p.n_treated() {
        loading_gap -= ws_v.v[n] * spec.gamma.row(p.n_controls() + n).transpose();
    }
    let mut factor_gap = DVector::zeros(spec.r);
    for s in 0..p.n_pre() {
        factor_gap += ws_h.w[s] * spec.lambda.row(s).transpose();
    }
    for t in 0..p.n_post() {
        factor_gap -= ws_h.v[t] * spec.lambda.row(p.n_pre() + t).transpose();
    }
    Ok(loading_gap.dot(&factor_gap))
}

/// Placebo estimates for every unit in `placebo_units` (in the given
/// order). Each unit `j` is contrasted against its own donor mix
/// `per_unit_vertical[j]`, whose weight vector spans the full unit axis
/// and must be zero on every excluded unit (the placebo pool and all
/// treated units). The same horizontal weights are shared across units.
pub fn estimate_placebo_set(
    panel: &Panel,
    placebo_units: &[usize],
    ws_h: &WeightSet,
    per_unit_vertical: &BTreeMap<usize, WeightSet>,
) -> Result<Vec<TauEstimate>> {
    expect_direction(ws_h, Direction::Horizontal)?;
    let p = panel.pattern();
    check_lengths(ws_h, p.n_pre(), p.n_post(), "horizontal")?;
    let pool = crate::solver::validate_placebo_pool(p, placebo_units)?;

    let mut out = Vec::with_capacity(placebo_units.len());
    for &j in placebo_units {
        let ws = per_unit_vertical.get(&j).ok_or_else(|| {
            Error::invalid(format!("missing vertical weights for placebo unit {j}"))
        })?;
        if ws.direction != Direction::Vertical {
            return Err(Error::invalid(format!(
                "weights for placebo unit {j} must be vertical"
            )));
        }
        if ws.w.len() != p.n_units() {
            return Err(Error::invalid(format!(
                "weights for placebo unit {j} must span all {} units, got {}",
                p.n_units(),
                ws.w.len()
            )));
        }
        for k in 0..p.n_units() {
            let excluded = pool.contains(&k) || k >= p.n_controls();
            if excluded && ws.w[k] != 0.0 {
                return Err(Error::invalid(format!(
                    "weights for placebo unit {j} touch excluded unit {k} (weight {})",
                    ws.w[k]
                )));
            }
        }
        crate::panel::validate_simplex_box("w", &ws.w, ws.cap_w)?;

        // tau_pl(j) = sum_t v_h[t] (Y[j,t] - mix[t]) - sum_s w_h[s] (Y[j,s] - mix[s])
        let mixed = panel.outcomes().transpose() * &ws.w;
        let mut tau = 0.0;
        for t in 0..p.n_post() {
            let col = p.n_pre() + t;
            tau += ws_h.v[t] * (panel.outcomes()[(j, col)] - mixed[col]);
        }
        for s in 0..p.n_pre() {
            tau -= ws_h.w[s] * (panel.outcomes()[(j, s)] - mixed[s]);
        }
        out.push(TauEstimate {
            tau_hat: tau,
            estimator: EstimatorKind::Placebo,
            weights_used: vec![ws_h.clone(), ws.clone()],
            q_used: None,
        });
    }
    Ok(out)
}

/// Number of factors chosen by the information criterion
/// `IC(k) = ln(SSR_k/(NT)) + k ((N+T)/(NT)) ln(NT min(N,T)/(N+T))`
/// on the time-demeaned control block, for `k = 1..=max_factors`
/// (truncated so the per-unit regressions stay identified).
pub fn pca_factor_count(panel: &Panel, max_factors: usize) -> Result<usize> {
    let (_, k) = pca_factor_series(panel, max_factors)?;
    Ok(k)
}

/// Factor series (all periods) and the selected factor count.
fn pca_factor_series(panel: &Panel, max_factors: usize) -> Result<(DMatrix<f64>, usize)> {
    let p = panel.pattern();
    let n = p.n_controls();
    let t = p.n_periods();
    if n < 2 {
        return Err(Error::invalid("PCA baseline needs at least 2 control units"));
    }
    if max_factors == 0 {
        return Err(Error::invalid("max_factors must be at least 1"));
    }

    // Demean each period across control units, then extract principal
    // components over all periods.
    let controls = panel.outcomes().rows(0, n);
    let mut xd = controls.into_owned();
    for col in 0..t {
        let mean = xd.column(col).sum() / n as f64;
        for row in 0..n {
            xd[(row, col)] -= mean;
        }
    }

    let mut svd = xd.clone().svd(true, true);
    svd.sort_by_singular_values();
    let sv = &svd.singular_values;
    let scale = panel.outcomes().amax().max(1.0);
    if sv.max() <= 1e-12 * scale {
        return Err(Error::computation(
            "control block has rank 0 after demeaning: zero variance across controls",
        ));
    }

    // k is capped by the matrix rank bound and by the pre-period
    // regression's degrees of freedom (intercept + k coefficients).
    let k_max = max_factors.min(n.min(t)).min(p.n_pre().saturating_sub(1)).max(1);
    let total_ss: f64 = sv.iter().map(|s| s * s).sum();
    let nt = (n * t) as f64;
    let penalty_unit = ((n + t) as f64 / nt) * ((nt * n.min(t) as f64 / (n + t) as f64).ln());
    let mut best_k = 1;
    let mut best_ic = f64::INFINITY;
    let mut explained = 0.0;
    for k in 1..=k_max {
        explained += sv[k - 1] * sv[k - 1];
        let ssr = (total_ss - explained).max(1e-300);
        let ic = (ssr / nt).ln() + k as f64 * penalty_unit;
        if ic < best_ic {
            best_ic = ic;
            best_k = k;
        }
    }

    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::computation("SVD did not return V"))?;
    let factors = v_t.rows(0, best_k).transpose();
    Ok((factors, best_k))
}

/// PCA baseline: principal-component factors from the time-demeaned
/// control block, a pre-period regression (with intercept) per treated
/// unit, and the average post-period gap between observed and predicted
/// outcomes.
pub fn estimate_pca_baseline(panel: &Panel, max_factors: usize) -> Result<TauEstimate> {
    let p = panel.pattern();
    let (factors, k) = pca_factor_series(panel, max_factors)?;
    let n_pre = p.n_pre();
    let n_post = p.n_post();

    let mut design = DMatrix::zeros(n_pre, k + 1);
    for s in 0..n_pre {
        design[(s, 0)] = 1.0;
        for j in 0..k {
            design[(s, j + 1)] = factors[(s, j)];
        }
    }
    let design_svd = design.svd(true, true);

    let mut gap_sum = 0.0;
    for unit in 0..p.n_treated() {
        let row = p.n_controls() + unit;
        let y_pre = DVector::from_fn(n_pre, |s, _| panel.outcomes()[(row, s)]);
        let coef = design_svd
            .solve(&y_pre, 1e-12)
            .map_err(|e| Error::computation(format!("pre-period regression failed: {e}")))?;
        for tpost in 0..n_post {
            let col = n_pre + tpost;
            let mut fitted = coef[0];
            for j in 0..k {
                fitted += coef[j + 1] * factors[(col, j)];
            }
            gap_sum += panel.outcomes()[(row, col)] - fitted;
        }
    }
    let tau_hat = gap_sum / (p.n_treated() * n_post) as f64;
    Ok(TauEstimate {
        tau_hat,
        estimator: EstimatorKind::PcaBaseline,
        weights_used: Vec::new(),
        q_used: None,
    })
}
