//! Property tests for the structural invariants of the library: projection
//! optimality, weight validation, serialization round trips, estimator
//! symmetries, and solver feasibility. Oracles are re-derived locally so a
//! bug in the library cannot hide inside its own checker.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use scpanel::dgp::{self, DgpSpec};
use scpanel::estimators;
use scpanel::panel::validate_simplex_box;
use scpanel::solver::{block_cap, project_simplex_box, solve_horizontal, SolverConfig, StepRule};
use scpanel::{Direction, Panel, TreatmentPattern, WeightSet};

/// KKT residual of `x` as a candidate projection of `y` onto
/// `{x : sum x = 1, 0 <= x_i <= cap}`. The multiplier `tau` is recovered
/// from coordinates classified by a small margin; misclassified coordinates
/// still show up in the clip-form residual, so the bound stays sound.
fn kkt_residual(y: &DVector<f64>, x: &DVector<f64>, cap: f64) -> f64 {
    let margin = 1e-7;
    let mut interior = Vec::new();
    let (mut tau_lo, mut tau_hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..x.len() {
        let t = y[i] - x[i];
        if x[i] <= margin {
            tau_lo = tau_lo.max(t);
        } else if x[i] >= cap - margin {
            tau_hi = tau_hi.min(t);
        } else {
            interior.push(t);
        }
    }
    let tau = if !interior.is_empty() {
        interior.sort_by(|a, b| a.partial_cmp(b).unwrap());
        interior[interior.len() / 2]
    } else if tau_lo.is_finite() && tau_hi.is_finite() {
        0.5 * (tau_lo + tau_hi)
    } else if tau_lo.is_finite() {
        tau_lo
    } else {
        tau_hi
    };
    let mut res = (x.sum() - 1.0).abs();
    for i in 0..x.len() {
        res = res.max((x[i] - (y[i] - tau).clamp(0.0, cap)).abs());
    }
    res
}

fn squared_distance(y: &DVector<f64>, x: &DVector<f64>) -> f64 {
    (y - x).norm_squared()
}

/// All vertices of `{x : sum x = 1, 0 <= x_i <= cap}`: every subset of
/// coordinates pinned at `cap` plus at most one fractional coordinate.
fn polytope_vertices(n: usize, cap: f64) -> Vec<DVector<f64>> {
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        let k = mask.count_ones() as f64;
        let rem = 1.0 - k * cap;
        if rem.abs() <= 1e-12 {
            let mut x = DVector::zeros(n);
            for i in 0..n {
                if mask & (1 << i) != 0 {
                    x[i] = cap;
                }
            }
            out.push(x);
        } else if rem > 0.0 && rem < cap {
            for j in 0..n {
                if mask & (1 << j) != 0 {
                    continue;
                }
                let mut x = DVector::zeros(n);
                for i in 0..n {
                    if mask & (1 << i) != 0 {
                        x[i] = cap;
                    }
                }
                x[j] = rem;
                out.push(x);
            }
        }
    }
    out
}

/// Exact restatement of the feasibility rule: coordinates in `[0, cap]`
/// and the sum within 1e-9 of one.
fn feasible_oracle(x: &DVector<f64>, cap: f64) -> bool {
    x.iter().all(|&xi| (0.0..=cap).contains(&xi)) && (x.sum() - 1.0).abs() <= 1e-9
}

fn vector(y: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(y)
}

fn cap_for(n: usize, chi: f64) -> f64 {
    (1.0 + chi) / n as f64
}

fn small_panel(
    n0: usize,
    t0: usize,
    n1: usize,
    t1: usize,
    cells: &[f64],
) -> Panel {
    let pat = TreatmentPattern::new(n0, t0, n1, t1).unwrap();
    let (nu, np) = (pat.n_units(), pat.n_periods());
    let m = DMatrix::from_fn(nu, np, |i, j| cells[(i * np + j) % cells.len()]);
    Panel::from_matrix(m, pat).unwrap()
}

fn uniform_weight_vec(len: usize) -> DVector<f64> {
    DVector::from_element(len, 1.0 / len as f64)
}

fn weight_set(direction: Direction, w: DVector<f64>, v: DVector<f64>, beta: f64) -> WeightSet {
    let cap_w = w.amax().max(1.0 / w.len() as f64) + 1e-12;
    let cap_v = v.amax().max(1.0 / v.len() as f64) + 1e-12;
    WeightSet { direction, w, v, beta, cap_w, cap_v }
}

/// Horizontal objective restated from its definition: squared fit error of
/// the control units' post contrast against their pre contrast with a
/// profiled intercept, plus an l2 penalty on both weight vectors.
fn horizontal_loss(panel: &Panel, penalty_total: f64, ws: &WeightSet) -> f64 {
    let a = panel.control_post();
    let b = panel.control_pre();
    let n = a.nrows();
    let resid: Vec<f64> = (0..n)
        .map(|i| a.row(i).transpose().dot(&ws.v) - b.row(i).transpose().dot(&ws.w))
        .collect();
    let beta = resid.iter().sum::<f64>() / n as f64;
    let fit: f64 = resid.iter().map(|r| (r - beta).powi(2)).sum();
    fit + penalty_total * (ws.w.norm_squared() + ws.v.norm_squared())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projection_satisfies_kkt(
        y in prop::collection::vec(-5.0f64..5.0, 2..12),
        chi in 0.05f64..3.0,
    ) {
        let cap = cap_for(y.len(), chi);
        let y = vector(y);
        let x = project_simplex_box(&y, cap).unwrap();
        prop_assert!(kkt_residual(&y, &x, cap) <= 1e-9);
    }

    #[test]
    fn projection_is_idempotent(
        y in prop::collection::vec(-5.0f64..5.0, 2..12),
        chi in 0.05f64..3.0,
    ) {
        let cap = cap_for(y.len(), chi);
        let x = project_simplex_box(&vector(y), cap).unwrap();
        let x2 = project_simplex_box(&x, cap).unwrap();
        prop_assert!((&x2 - &x).amax() <= 1e-12);
    }

    #[test]
    fn projection_beats_every_vertex(
        y in prop::collection::vec(-5.0f64..5.0, 2..7),
        chi in 0.05f64..3.0,
    ) {
        // The distance to y is convex, so beating every vertex and staying
        // feasible pins the projection down to the true minimizer's value.
        let cap = cap_for(y.len(), chi);
        let y = vector(y);
        let x = project_simplex_box(&y, cap).unwrap();
        prop_assert!(feasible_oracle(&x, cap + 1e-12));
        let dx = squared_distance(&y, &x);
        for vtx in polytope_vertices(y.len(), cap) {
            prop_assert!(dx <= squared_distance(&y, &vtx) + 1e-9);
        }
    }

    #[test]
    fn simplex_box_validation_matches_oracle(
        raw in prop::collection::vec(-0.2f64..1.2, 2..9),
        chi in 0.05f64..2.0,
        normalize in prop::bool::ANY,
    ) {
        // Half the cases are rescaled to sum to one so both accept and
        // reject paths get exercised; the cap can still cut them off.
        let cap = cap_for(raw.len(), chi);
        let mut x = vector(raw);
        if normalize {
            let s: f64 = x.iter().map(|t| t.abs()).sum();
            prop_assume!(s > 1e-6);
            x = x.map(|t| t.abs() / s);
        }
        let accepted = validate_simplex_box("w", &x, cap).is_ok();
        prop_assert_eq!(accepted, feasible_oracle(&x, cap));
    }

    #[test]
    fn panel_csv_round_trip_is_bit_exact(
        n0 in 2usize..5,
        t0 in 2usize..5,
        n1 in 1usize..4,
        t1 in 1usize..4,
        cells in prop::collection::vec(-1e6f64..1e6, 7..13),
    ) {
        let panel = small_panel(n0, t0, n1, t1, &cells);
        let mut buf = Vec::new();
        panel.to_csv_writer(&mut buf).unwrap();
        let back = Panel::from_csv_reader(buf.as_slice(), panel.pattern().clone()).unwrap();
        prop_assert_eq!(back.outcomes(), panel.outcomes());
        prop_assert_eq!(back.unit_ids(), panel.unit_ids());
        prop_assert_eq!(back.period_ids(), panel.period_ids());
    }

    #[test]
    fn dr_estimate_ignores_two_way_shifts(
        n0 in 3usize..6,
        t0 in 3usize..6,
        n1 in 1usize..3,
        t1 in 1usize..3,
        cells in prop::collection::vec(-3.0f64..3.0, 9..15),
        unit_fx in prop::collection::vec(-5.0f64..5.0, 8),
        time_fx in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let panel = small_panel(n0, t0, n1, t1, &cells);
        let p = panel.pattern().clone();
        let ws_h = weight_set(
            Direction::Horizontal,
            uniform_weight_vec(p.n_pre()),
            uniform_weight_vec(p.n_post()),
            0.0,
        );
        let ws_v = weight_set(
            Direction::Vertical,
            uniform_weight_vec(p.n_controls()),
            uniform_weight_vec(p.n_treated()),
            0.0,
        );
        let base = estimators::estimate_dr(&panel, &ws_h, &ws_v).unwrap().tau_hat;

        let shifted = DMatrix::from_fn(p.n_units(), p.n_periods(), |i, t| {
            panel.outcomes()[(i, t)] + unit_fx[i % unit_fx.len()] + time_fx[t % time_fx.len()]
        });
        let shifted = Panel::from_matrix(shifted, p).unwrap();
        let moved = estimators::estimate_dr(&shifted, &ws_h, &ws_v).unwrap().tau_hat;
        prop_assert!((base - moved).abs() <= 1e-10);
    }

    #[test]
    fn vertical_estimate_mirrors_horizontal_on_transpose(
        n0 in 2usize..6,
        t0 in 2usize..6,
        n1 in 1usize..4,
        t1 in 1usize..4,
        cells in prop::collection::vec(-3.0f64..3.0, 9..15),
        beta in -2.0f64..2.0,
    ) {
        let panel = small_panel(n0, t0, n1, t1, &cells);
        let p = panel.pattern().clone();
        let w = uniform_weight_vec(p.n_controls());
        let v = uniform_weight_vec(p.n_treated());
        let ws_v = weight_set(Direction::Vertical, w.clone(), v.clone(), beta);
        let ws_flip = weight_set(Direction::Horizontal, w, v, beta);
        let direct = estimators::estimate_vertical(&panel, &ws_v, None).unwrap().tau_hat;
        let mirrored =
            estimators::estimate_horizontal(&panel.transposed(), &ws_flip, None).unwrap().tau_hat;
        prop_assert!((direct - mirrored).abs() <= 1e-10);
    }

    #[test]
    fn pattern_deserialization_enforces_bounds(
        n0 in 0usize..5,
        t0 in 0usize..5,
        n1 in 0usize..4,
        t1 in 0usize..4,
    ) {
        let json = format!(r#"{{"n0":{n0},"t0":{t0},"n1":{n1},"t1":{t1}}}"#);
        let parsed: Result<TreatmentPattern, _> = serde_json::from_str(&json);
        let valid = n0 >= 2 && t0 >= 2 && n1 >= 1 && t1 >= 1;
        prop_assert_eq!(parsed.is_ok(), valid);
        if let Ok(p) = parsed {
            let echo = serde_json::to_string(&p).unwrap();
            let again: TreatmentPattern = serde_json::from_str(&echo).unwrap();
            prop_assert_eq!(again, p);
        }
    }

    #[test]
    fn simulation_is_deterministic_in_the_seed(
        seed in 0u64..1_000_000,
        tau in -2.0f64..2.0,
    ) {
        let pat = TreatmentPattern::new(4, 5, 2, 2).unwrap();
        let mut spec = DgpSpec::matched_example(pat, seed);
        spec.tau = tau;
        let (p1, d1) = dgp::simulate(&spec).unwrap();
        let (p2, d2) = dgp::simulate(&spec).unwrap();
        prop_assert_eq!(p1.outcomes(), p2.outcomes());
        prop_assert_eq!(&d1, &d2);
        let (p3, _) = dgp::simulate(&spec.with_seed(seed + 1)).unwrap();
        prop_assert!(p1.outcomes() != p3.outcomes());
    }

    #[test]
    fn latent_rows_respect_l2_bound(
        seed in 0u64..100_000,
        bound in 0.05f64..0.8,
    ) {
        let pat = TreatmentPattern::new(4, 5, 2, 2).unwrap();
        let mut spec = DgpSpec::matched_example(pat, seed);
        spec.bound_l2 = Some(bound);
        let (_, draw) = dgp::simulate(&spec).unwrap();
        for i in 0..draw.lambda_tilde.nrows() {
            prop_assert!(draw.lambda_tilde.row(i).norm() <= bound + 1e-12);
        }
        for i in 0..draw.gamma_tilde.nrows() {
            prop_assert!(draw.gamma_tilde.row(i).norm() <= bound + 1e-12);
        }
    }
}

proptest! {
    // Each case runs the projected-gradient solver to stationarity, so the
    // case budget is kept small.
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solver_output_is_feasible_and_beats_uniform(
        n0 in 3usize..6,
        t0 in 3usize..6,
        n1 in 1usize..3,
        t1 in 1usize..3,
        cells in prop::collection::vec(-2.0f64..2.0, 11..17),
        penalty in 0.01f64..1.0,
    ) {
        let panel = small_panel(n0, t0, n1, t1, &cells);
        let cfg = SolverConfig {
            penalty,
            cap_scale: 1.4,
            tol: 1e-8,
            max_iters: 200_000,
            step_rule: StepRule::Backtracking,
        };
        let ws = solve_horizontal(&panel, &cfg).unwrap();
        prop_assert!(ws.validate().is_ok());
        prop_assert!(feasible_oracle(&ws.w, ws.cap_w));
        prop_assert!(feasible_oracle(&ws.v, ws.cap_v));
        prop_assert_eq!(ws.cap_w, block_cap(t0, 1.4));
        prop_assert_eq!(ws.cap_v, block_cap(t1, 1.4));

        // Descent from the uniform start guarantees the fit is no worse
        // than uniform weights under the same objective.
        let p = panel.pattern();
        let uniform = weight_set(
            Direction::Horizontal,
            uniform_weight_vec(p.n_pre()),
            uniform_weight_vec(p.n_post()),
            0.0,
        );
        let total = penalty * n0 as f64;
        prop_assert!(
            horizontal_loss(&panel, total, &ws)
                <= horizontal_loss(&panel, total, &uniform) + 1e-9
        );
    }
}
