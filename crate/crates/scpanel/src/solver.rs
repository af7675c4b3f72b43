//! Constrained weight estimation.
//!
//! Both weight regressions minimize a penalized least-squares loss over a
//! pair of capped simplices:
//!
//! ```text
//! L(w, v, beta) = sum_i delta_i (a_i'v - b_i'w - beta)^2
//!                 + P (||w||^2 + ||v||^2)
//! ```
//!
//! Horizontally the samples `i` are control units, `b_i` their pre-period
//! outcomes and `a_i` their post-period outcomes; vertically the samples
//! are pre periods with `b_i` over control units and `a_i` over treated
//! units. The feasible set for each weight vector is
//! `{x : x >= 0, sum(x) = 1, x <= cap}` with `cap = cap_scale * base^(-2/3)`
//! (`base` is `t0`/`t1` on the time axis and `n0`/`n1` on the unit axis).
//!
//! The intercept is profiled out in closed form at every iterate and the
//! remaining problem is solved by projected gradient descent with a
//! monotone (Armijo-style) backtracking line search. The same machinery
//! fits oracle weights: replace observed outcomes by their deterministic
//! conditional means and the penalty by `penalty_star`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Direction, Panel, TreatmentPattern, WeightSet};

/// Step-size policy for the projected gradient loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Adaptive step with a sufficient-decrease backtracking test.
    #[default]
    Backtracking,
    /// Constant step `1/L` from a conservative curvature bound.
    Fixed,
}

/// Solver knobs. `penalty` is the ridge coefficient `p` (the loss uses
/// `p` times the block base count); `cap_scale` multiplies the
/// `base^(-2/3)` box caps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub penalty: f64,
    pub cap_scale: f64,
    pub max_iters: usize,
    pub tol: f64,
    #[serde(default)]
    pub step_rule: StepRule,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            penalty: 0.01,
            cap_scale: 1.0,
            max_iters: 50_000,
            tol: 1e-8,
            step_rule: StepRule::Backtracking,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.penalty.is_finite() || self.penalty < 0.0 {
            return Err(Error::invalid(format!(
                "penalty must be nonnegative and finite, got {}",
                self.penalty
            )));
        }
        if !self.cap_scale.is_finite() || self.cap_scale <= 0.0 {
            return Err(Error::invalid(format!(
                "cap_scale must be positive and finite, got {}",
                self.cap_scale
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(Error::invalid(format!("tol must be positive and finite, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Box cap `cap_scale * base^(-2/3)` for a weight block.
pub fn block_cap(base: usize, cap_scale: f64) -> f64 {
    cap_scale * (base as f64).powf(-2.0 / 3.0)
}

/// Euclidean projection onto `{x : x >= 0, sum(x) = 1, x <= cap}`.
///
/// Requires `cap * len >= 1`, otherwise the set is empty. The returned
/// point satisfies the box constraints exactly and the sum constraint to
/// within `1e-12`.
pub fn project_simplex_box(y: &DVector<f64>, cap: f64) -> Result<DVector<f64>> {
    let n = y.len();
    if n == 0 {
        return Err(Error::invalid("cannot project an empty vector"));
    }
    if !cap.is_finite() || cap <= 0.0 {
        return Err(Error::invalid(format!("cap must be positive and finite, got {cap}")));
    }
    if y.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("projection input contains non-finite entries"));
    }
    if cap * (n as f64) < 1.0 - 1e-12 {
        return Err(Error::invalid(format!(
            "infeasible box: cap {cap} * len {n} = {} < 1",
            cap * n as f64
        )));
    }

    // g(t) = sum_i clip(y_i - t, 0, cap) - 1 is continuous and
    // non-increasing; bisect, then sharpen t with the closed form on the
    // identified active set.
    let clip_sum = |t: f64| -> f64 { y.iter().map(|&yi| (yi - t).clamp(0.0, cap)).sum::<f64>() };
    let mut lo = y.min() - cap;
    let mut hi = y.max();
    for _ in 0..128 {
        let mid = 0.5 * (lo + hi);
        if clip_sum(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()).max(1.0) {
            break;
        }
    }
    let mut tau = 0.5 * (lo + hi);

    // Closed-form refinement: with the free set F and capped set C fixed,
    // sum_F (y_i - t) + cap*|C| = 1.
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    let mut capped = 0usize;
    for &yi in y.iter() {
        let z = yi - tau;
        if z >= cap {
            capped += 1;
        } else if z > 0.0 {
            free_sum += yi;
            free_count += 1;
        }
    }
    if free_count > 0 {
        let refined = (free_sum + cap * capped as f64 - 1.0) / free_count as f64;
        if (clip_sum(refined) - 1.0).abs() <= (clip_sum(tau) - 1.0).abs() {
            tau = refined;
        }
    }

    let x = DVector::from_fn(n, |i, _| (y[i] - tau).clamp(0.0, cap));
    let gap = (x.sum() - 1.0).abs();
    if gap > 1e-12 && gap > (cap * n as f64 - 1.0).abs() + 1e-15 {
        return Err(Error::computation(format!(
            "simplex-box projection did not meet its tolerance: residual {gap:e}"
        )));
    }
    Ok(x)
}

/// One penalized least-squares instance over two capped simplices.
///
/// `a` is `n_samples x dim_v`, `b` is `n_samples x dim_w`; `delta` holds
/// nonnegative per-sample weights and `penalty` the total ridge
/// coefficient (block base count already multiplied in).
struct QuadProblem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    delta: DVector<f64>,
    delta_sum: f64,
    penalty: f64,
    cap_w: f64,
    cap_v: f64,
}

struct Objective {
    value: f64,
    beta: f64,
    grad_w: DVector<f64>,
    grad_v: DVector<f64>,
}

impl QuadProblem {
    fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        delta: DVector<f64>,
        penalty: f64,
        cap_w: f64,
        cap_v: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if b.nrows() != n {
            return Err(Error::invalid(format!(
                "sample counts disagree: {} rows vs {} rows",
                n,
                b.nrows()
            )));
        }
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 regression samples, got {n}")));
        }
        if delta.len() != n {
            return Err(Error::invalid(format!(
                "delta must have one entry per sample ({n}), got {}",
                delta.len()
            )));
        }
        if delta.iter().any(|&d| !d.is_finite() || d < 0.0) {
            return Err(Error::invalid("delta entries must be nonnegative and finite"));
        }
        let delta_sum = delta.sum();
        if delta_sum <= 0.0 {
            return Err(Error::invalid("delta must have positive total mass"));
        }
        for (name, m) in [("post-side samples", &a), ("pre-side samples", &b)] {
            if m.ncols() == 0 {
                return Err(Error::invalid(format!("{name} have zero width")));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("{name} contain non-finite values")));
            }
        }
        check_cap_feasible("w", b.ncols(), cap_w)?;
        check_cap_feasible("v", a.ncols(), cap_v)?;
        Ok(QuadProblem { a, b, delta, delta_sum, penalty, cap_w, cap_v })
    }

    /// Loss, profiled intercept, and gradients at `(w, v)`. With the
    /// intercept at its closed-form optimum the partial gradients in
    /// `(w, v)` equal the gradients of the profiled objective.
    fn eval(&self, w: &DVector<f64>, v: &DVector<f64>) -> Objective {
        let c = &self.a * v - &self.b * w;
        let beta = self.delta.dot(&c) / self.delta_sum;
        let e = c.map(|ci| ci - beta);
        let de = e.component_mul(&self.delta);
        let value = e.dot(&de) + self.penalty * (w.dot(w) + v.dot(v));
        let grad_v = 2.0 * (self.a.transpose() * &de) + 2.0 * self.penalty * v;
        let grad_w = -2.0 * (self.b.transpose() * &de) + 2.0 * self.penalty * w;
        Objective { value, beta, grad_w, grad_v }
    }

    /// Conservative curvature bound: `2 (||B||_F^2 + ||A||_F^2) * max(delta)
    /// + 2 penalty` dominates the largest Hessian eigenvalue.
    fn lipschitz_bound(&self) -> f64 {
        let dmax = self.delta.max();
        2.0 * dmax * (self.a.norm_squared() + self.b.norm_squared()) + 2.0 * self.penalty
    }

    fn solve(&self, cfg: &SolverConfig) -> Result<(DVector<f64>, DVector<f64>, f64)> {
        let dw = self.b.ncols();
        let dv = self.a.ncols();
        let mut w = DVector::from_element(dw, 1.0 / dw as f64);
        let mut v = DVector::from_element(dv, 1.0 / dv as f64);
        // Caps below 1/len make the uniform start infeasible; project it in.
        if self.cap_w < 1.0 / dw as f64 {
            w = project_simplex_box(&w, self.cap_w)?;
        }
        if self.cap_v < 1.0 / dv as f64 {
            v = project_simplex_box(&v, self.cap_v)?;
        }

        let lip = self.lipschitz_bound().max(f64::MIN_POSITIVE);
        let mut alpha = 1.0 / lip;
        let mut cur = self.eval(&w, &v);

        for _ in 0..cfg.max_iters {
            // Stationarity: norm of the unit-step projected-gradient map.
            let gw = project_simplex_box(&(&w - &cur.grad_w), self.cap_w)?;
            let gv = project_simplex_box(&(&v - &cur.grad_v), self.cap_v)?;
            let map_norm = ((&w - &gw).norm_squared() + (&v - &gv).norm_squared()).sqrt();
            if map_norm <= cfg.tol {
                return Ok((w, v, cur.beta));
            }

            match cfg.step_rule {
                StepRule::Fixed => {
                    let w_next = project_simplex_box(&(&w - alpha * &cur.grad_w), self.cap_w)?;
                    let v_next = project_simplex_box(&(&v - alpha * &cur.grad_v), self.cap_v)?;
                    let next = self.eval(&w_next, &v_next);
                    debug_assert!(
                        next.value <= cur.value + 1e-9 * cur.value.abs().max(1.0),
                        "fixed-step iteration increased the loss"
                    );
                    w = w_next;
                    v = v_next;
                    cur = next;
                }
                StepRule::Backtracking => {
                    // Accept when the quadratic model at step alpha
                    // dominates the exact curvature along the step. The
                    // loss is a quadratic, so the curvature is a sum of
                    // squares and the test stays meaningful arbitrarily
                    // close to the optimum; comparing loss values instead
                    // would drown in cancellation noise there and let
                    // oversized steps orbit the solution.
                    let mut accepted = false;
                    for _ in 0..60 {
                        let w_next =
                            project_simplex_box(&(&w - alpha * &cur.grad_w), self.cap_w)?;
                        let v_next =
                            project_simplex_box(&(&v - alpha * &cur.grad_v), self.cap_v)?;
                        let dw = &w_next - &w;
                        let dv = &v_next - &v;
                        let dwv = dw.norm_squared() + dv.norm_squared();
                        let d = &self.a * &dv - &self.b * &dw;
                        let d_centered = d.add_scalar(-self.delta.dot(&d) / self.delta_sum);
                        let curv_half = d_centered.dot(&d_centered.component_mul(&self.delta))
                            + self.penalty * dwv;
                        if 2.0 * alpha * curv_half <= dwv * (1.0 + 1e-12) {
                            let next = self.eval(&w_next, &v_next);
                            debug_assert!(
                                next.value <= cur.value + 1e-9 * cur.value.abs().max(1.0),
                                "backtracking accepted an ascent step"
                            );
                            w = w_next;
                            v = v_next;
                            cur = next;
                            alpha *= 1.5;
                            accepted = true;
                            break;
                        }
                        alpha *= 0.5;
                    }
                    if !accepted {
                        return Err(Error::computation(
                            "line search stalled: no acceptable step after 60 halvings",
                        ));
                    }
                }
            }
        }
        Err(Error::computation(format!(
            "projected gradient did not reach tol {:e} within {} iterations",
            cfg.tol, cfg.max_iters
        )))
    }
}

fn check_cap_feasible(name: &str, len: usize, cap: f64) -> Result<()> {
    if !cap.is_finite() || cap <= 0.0 {
        return Err(Error::invalid(format!("{name} cap must be positive, got {cap}")));
    }
    if cap * (len as f64) < 1.0 - 1e-12 {
        return Err(Error::invalid(format!(
            "{name} cap {cap:.6} over {len} coordinates cannot reach sum 1; \
             increase cap_scale by a factor of at least {:.6}",
            1.0 / (cap * len as f64)
        )));
    }
    Ok(())
}

/// Fits horizontal weights: `w` over pre periods, `v` over post periods,
/// regression samples are the control units. Requires at least two control
/// units and two pre periods.
pub fn solve_horizontal(panel: &Panel, cfg: &SolverConfig) -> Result<WeightSet> {
    cfg.validate()?;
    let p = panel.pattern();
    require_min_design(p)?;
    let cap_w = block_cap(p.t0(), cfg.cap_scale);
    let cap_v = block_cap(p.t1(), cfg.cap_scale);
    let problem = QuadProblem::new(
        panel.control_post().into_owned(),
        panel.control_pre().into_owned(),
        DVector::from_element(p.n_controls(), 1.0),
        cfg.penalty * p.n0() as f64,
        cap_w,
        cap_v,
    )?;
    let (w, v, beta) = problem.solve(cfg)?;
    Ok(WeightSet { direction: Direction::Horizontal, w, v, beta, cap_w, cap_v })
}

/// Fits vertical weights: `w` over control units, `v` over treated units,
/// regression samples are the pre periods. Requires at least two control
/// units and two pre periods.
pub fn solve_vertical(panel: &Panel, cfg: &SolverConfig) -> Result<WeightSet> {
    cfg.validate()?;
    let p = panel.pattern();
    require_min_design(p)?;
    let cap_w = block_cap(p.n0(), cfg.cap_scale);
    let cap_v = block_cap(p.n1(), cfg.cap_scale);
    let problem = QuadProblem::new(
        panel.treated_pre().transpose(),
        panel.control_pre().transpose(),
        DVector::from_element(p.n_pre(), 1.0),
        cfg.penalty * p.t0() as f64,
        cap_w,
        cap_v,
    )?;
    let (w, v, beta) = problem.solve(cfg)?;
    Ok(WeightSet { direction: Direction::Vertical, w, v, beta, cap_w, cap_v })
}

fn require_min_design(p: &TreatmentPattern) -> Result<()> {
    if p.n_controls() < 2 {
        return Err(Error::invalid(format!(
            "weight estimation needs at least 2 control units, got {}",
            p.n_controls()
        )));
    }
    if p.n_pre() < 2 {
        return Err(Error::invalid(format!(
            "weight estimation needs at least 2 pre periods, got {}",
            p.n_pre()
        )));
    }
    Ok(())
}

/// Inputs for oracle weights: the deterministic structure that replaces
/// observed outcomes in the penalized loss.
///
/// For the horizontal oracle, `axis_path` holds the factor path `lambda_t`
/// (`n_periods x r`), `axis_effects` the time effects, and
/// `sample_multipliers` one loading vector per control unit
/// (`n_controls x r`). For the vertical oracle the roles transpose:
/// loadings `gamma_i` per unit on the axis, factors per pre period as
/// sample multipliers. `delta` weights the regression samples (all-ones
/// default) and `penalty_star` replaces the solver penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleInputs {
    pub axis_path: DMatrix<f64>,
    pub axis_effects: DVector<f64>,
    pub sample_multipliers: DMatrix<f64>,
    pub delta: DVector<f64>,
    pub penalty_star: f64,
}

impl OracleInputs {
    /// Horizontal oracle inputs from a DGP spec: loadings of the control
    /// units (realized loadings when a draw is supplied, deterministic
    /// `gamma` otherwise) against the full factor path and time effects.
    pub fn horizontal(
        spec: &crate::dgp::DgpSpec,
        draw: Option<&crate::dgp::LatentDraw>,
        penalty_star: f64,
    ) -> Result<Self> {
        spec.validate()?;
        let nc = spec.pattern.n_controls();
        let mut multipliers = spec.gamma.rows(0, nc).into_owned();
        if let Some(d) = draw {
            if d.gamma_tilde.nrows() != spec.gamma.nrows() || d.gamma_tilde.ncols() != spec.r {
                return Err(Error::invalid("draw does not match the spec's dimensions"));
            }
            multipliers += d.gamma_tilde.rows(0, nc);
        }
        Ok(OracleInputs {
            axis_path: spec.lambda.clone(),
            axis_effects: spec.iota_time.clone(),
            sample_multipliers: multipliers,
            delta: DVector::from_element(nc, 1.0),
            penalty_star,
        })
    }

    /// Vertical oracle inputs: factors of the pre periods (realized when a
    /// draw is supplied) against the full loading path and unit effects.
    pub fn vertical(
        spec: &crate::dgp::DgpSpec,
        draw: Option<&crate::dgp::LatentDraw>,
        penalty_star: f64,
    ) -> Result<Self> {
        spec.validate()?;
        let npre = spec.pattern.n_pre();
        let mut multipliers = spec.lambda.rows(0, npre).into_owned();
        if let Some(d) = draw {
            if d.lambda_tilde.nrows() != spec.lambda.nrows() || d.lambda_tilde.ncols() != spec.r {
                return Err(Error::invalid("draw does not match the spec's dimensions"));
            }
            multipliers += d.lambda_tilde.rows(0, npre);
        }
        Ok(OracleInputs {
            axis_path: spec.gamma.clone(),
            axis_effects: spec.iota_unit.clone(),
            sample_multipliers: multipliers,
            delta: DVector::from_element(npre, 1.0),
            penalty_star,
        })
    }

    fn validate(&self, axis_len: usize, n_samples: usize) -> Result<()> {
        if self.axis_path.nrows() != axis_len {
            return Err(Error::invalid(format!(
                "axis path must have {axis_len} rows, got {}",
                self.axis_path.nrows()
            )));
        }
        if self.axis_effects.len() != axis_len {
            return Err(Error::invalid(format!(
                "axis effects must have length {axis_len}, got {}",
                self.axis_effects.len()
            )));
        }
        if self.sample_multipliers.nrows() != n_samples {
            return Err(Error::invalid(format!(
                "need one multiplier row per sample ({n_samples}), got {}",
                self.sample_multipliers.nrows()
            )));
        }
        if self.sample_multipliers.ncols() != self.axis_path.ncols() {
            return Err(Error::invalid(format!(
                "multiplier dimension {} does not match factor dimension {}",
                self.sample_multipliers.ncols(),
                self.axis_path.ncols()
            )));
        }
        if self.delta.len() != n_samples {
            return Err(Error::invalid(format!(
                "delta must have length {n_samples}, got {}",
                self.delta.len()
            )));
        }
        if !self.penalty_star.is_finite() || self.penalty_star < 0.0 {
            return Err(Error::invalid(format!(
                "penalty_star must be nonnegative and finite, got {}",
                self.penalty_star
            )));
        }
        Ok(())
    }

    /// Conditional-mean outcome for sample `s` at axis position `k`.
    fn mean_outcome(&self, s: usize, k: usize) -> f64 {
        self.sample_multipliers.row(s).dot(&self.axis_path.row(k)) + self.axis_effects[k]
    }
}

/// Oracle horizontal weights for `pattern`: the solver run on conditional
/// means instead of outcomes, with penalty `penalty_star`. `cfg.penalty`
/// is ignored.
pub fn oracle_weights_horizontal(
    inputs: &OracleInputs,
    pattern: &TreatmentPattern,
    cfg: &SolverConfig,
) -> Result<WeightSet> {
    cfg.validate()?;
    require_min_design(pattern)?;
    inputs.validate(pattern.n_periods(), pattern.n_controls())?;
    let n = pattern.n_controls();
    let b = DMatrix::from_fn(n, pattern.n_pre(), |i, s| inputs.mean_outcome(i, s));
    let a = DMatrix::from_fn(n, pattern.n_post(), |i, t| {
        inputs.mean_outcome(i, pattern.n_pre() + t)
    });
    let cap_w = block_cap(pattern.t0(), cfg.cap_scale);
    let cap_v = block_cap(pattern.t1(), cfg.cap_scale);
    let problem = QuadProblem::new(
        a,
        b,
        inputs.delta.clone(),
        inputs.penalty_star * pattern.n0() as f64,
        cap_w,
        cap_v,
    )?;
    let (w, v, beta) = problem.solve(cfg)?;
    Ok(WeightSet { direction: Direction::Horizontal, w, v, beta, cap_w, cap_v })
}

/// Oracle vertical weights; mirror of [`oracle_weights_horizontal`].
pub fn oracle_weights_vertical(
    inputs: &OracleInputs,
    pattern: &TreatmentPattern,
    cfg: &SolverConfig,
) -> Result<WeightSet> {
    cfg.validate()?;
    require_min_design(pattern)?;
    inputs.validate(pattern.n_units(), pattern.n_pre())?;
    let n = pattern.n_pre();
    let b = DMatrix::from_fn(n, pattern.n_controls(), |s, i| inputs.mean_outcome(s, i));
    let a = DMatrix::from_fn(n, pattern.n_treated(), |s, j| {
        inputs.mean_outcome(s, pattern.n_controls() + j)
    });
    let cap_w = block_cap(pattern.n0(), cfg.cap_scale);
    let cap_v = block_cap(pattern.n1(), cfg.cap_scale);
    let problem = QuadProblem::new(
        a,
        b,
        inputs.delta.clone(),
        inputs.penalty_star * pattern.t0() as f64,
        cap_w,
        cap_v,
    )?;
    let (w, v, beta) = problem.solve(cfg)?;
    Ok(WeightSet { direction: Direction::Vertical, w, v, beta, cap_w, cap_v })
}

/// Uniform weights in the given direction with the intercept profiled on
/// the panel. Caps use `cap_scale` and must admit the uniform point.
pub fn uniform_weight_set(panel: &Panel, direction: Direction, cap_scale: f64) -> Result<WeightSet> {
    let p = panel.pattern();
    let (dim_w, dim_v, cap_w, cap_v) = match direction {
        Direction::Horizontal => (
            p.n_pre(),
            p.n_post(),
            block_cap(p.t0(), cap_scale),
            block_cap(p.t1(), cap_scale),
        ),
        Direction::Vertical => (
            p.n_controls(),
            p.n_treated(),
            block_cap(p.n0(), cap_scale),
            block_cap(p.n1(), cap_scale),
        ),
    };
    let w = DVector::from_element(dim_w, 1.0 / dim_w as f64);
    let v = DVector::from_element(dim_v, 1.0 / dim_v as f64);
    if w[0] > cap_w || v[0] > cap_v {
        return Err(Error::invalid(format!(
            "uniform weights violate the caps (1/{dim_w} vs {cap_w:.6}, 1/{dim_v} vs {cap_v:.6})"
        )));
    }
    let beta = profiled_intercept(panel, direction, &w, &v)?;
    Ok(WeightSet { direction, w, v, beta, cap_w, cap_v })
}

/// Loss-minimizing intercept for fixed weights: the mean over regression
/// samples of `a_i'v - b_i'w`.
pub fn profiled_intercept(
    panel: &Panel,
    direction: Direction,
    w: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<f64> {
    let p = panel.pattern();
    let (a, b) = match direction {
        Direction::Horizontal => {
            (panel.control_post().into_owned(), panel.control_pre().into_owned())
        }
        Direction::Vertical => {
            (panel.treated_pre().transpose(), panel.control_pre().transpose())
        }
    };
    if w.len() != b.ncols() || v.len() != a.ncols() {
        return Err(Error::invalid(format!(
            "weight lengths ({}, {}) do not match the {direction} design ({}, {})",
            w.len(),
            v.len(),
            b.ncols(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    if n == 0 {
        return Err(Error::invalid("no regression samples to profile the intercept on"));
    }
    let c = a * v - b * w;
    let _ = p;
    Ok(c.sum() / n as f64)
}

/// Per-unit vertical weights for a placebo study. Every unit in
/// `placebo_units` gets weights over the shared donor pool (control units
/// outside the placebo set), embedded in a full-length vector that is zero
/// on excluded units. Treated units are never donors.
pub fn fit_placebo_weights(
    panel: &Panel,
    placebo_units: &[usize],
    cfg: &SolverConfig,
) -> Result<BTreeMap<usize, WeightSet>> {
    cfg.validate()?;
    let p = panel.pattern();
    let pool = validate_placebo_pool(p, placebo_units)?;
    let donors: Vec<usize> =
        (0..p.n_controls()).filter(|i| !pool.contains(i)).collect();
    if donors.len() < 2 {
        return Err(Error::invalid(format!(
            "placebo fit needs at least 2 donor units, got {}",
            donors.len()
        )));
    }

    let sub_pattern = TreatmentPattern::new(donors.len() + 1, p.t0(), 1, p.t1())?;
    let mut out = BTreeMap::new();
    for &j in pool.iter() {
        let mut rows = Vec::with_capacity(donors.len() + 1);
        rows.extend(donors.iter().copied());
        rows.push(j);
        let sub = DMatrix::from_fn(rows.len(), p.n_periods(), |i, t| {
            panel.outcomes()[(rows[i], t)]
        });
        let sub_panel = Panel::from_matrix(sub, sub_pattern)?;
        let fitted = solve_vertical(&sub_panel, cfg)?;
        let mut w_full = DVector::zeros(p.n_units());
        for (k, &d) in donors.iter().enumerate() {
            w_full[d] = fitted.w[k];
        }
        out.insert(
            j,
            WeightSet {
                direction: Direction::Vertical,
                w: w_full,
                v: fitted.v,
                beta: fitted.beta,
                cap_w: fitted.cap_w,
                cap_v: fitted.cap_v,
            },
        );
    }
    Ok(out)
}

/// Checks placebo indices: in range, no duplicates, and never a pure
/// control-and-treated mix that leaves the pool empty. Returns the pool as
/// a sorted set.
pub(crate) fn validate_placebo_pool(
    p: &TreatmentPattern,
    placebo_units: &[usize],
) -> Result<std::collections::BTreeSet<usize>> {
    let mut pool = std::collections::BTreeSet::new();
    for &j in placebo_units {
        if j >= p.n_units() {
            return Err(Error::invalid(format!(
                "placebo unit {j} is out of range for {} units",
                p.n_units()
            )));
        }
        if !pool.insert(j) {
            return Err(Error::invalid(format!("placebo unit {j} listed twice")));
        }
    }
    if pool.len() < 2 {
        return Err(Error::invalid("a placebo set needs at least 2 units"));
    }
    Ok(pool)
}
