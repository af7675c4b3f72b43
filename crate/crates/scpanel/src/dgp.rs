//! Interactive factor-model data generator.
//!
//! Untreated outcomes follow
//! `Y[i,t] = (lambda_t + ltilde_t)'(gamma_i + gtilde_i) + iota_unit[i]
//!  + iota_time[t] + eps[i,t]`,
//! and treated cells receive an additive constant effect `tau`. The
//! deterministic `lambda`/`gamma` carry the confounding: they may differ
//! across the pre/post and control/treated blocks. The tilde draws are iid
//! Gaussian with the given covariances and the noise is iid
//! `N(0, sigma_eps^2)`.
//!
//! Randomness is split into three independent substreams (factor draws,
//! loading draws, noise) of one counter-based generator, so changing how
//! one component is consumed never perturbs the others.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{serde_dmatrix_rows, serde_dvector, Direction, Panel, TreatmentPattern};

const STREAM_LAMBDA: u64 = 1;
const STREAM_GAMMA: u64 = 2;
const STREAM_EPS: u64 = 3;

/// Full description of one simulated design.
///
/// `lambda` stacks the deterministic factor vectors by period
/// (`n_periods x r`, row `t` is `lambda_t`); `gamma` stacks the
/// deterministic loadings by unit (`n_units x r`). Covariances are `r x r`
/// and must be symmetric positive definite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub r: usize,
    #[serde(with = "serde_dmatrix_rows")]
    pub lambda: DMatrix<f64>,
    #[serde(with = "serde_dmatrix_rows")]
    pub gamma: DMatrix<f64>,
    #[serde(with = "serde_dmatrix_rows")]
    pub sigma_lambda: DMatrix<f64>,
    #[serde(with = "serde_dmatrix_rows")]
    pub sigma_gamma: DMatrix<f64>,
    #[serde(with = "serde_dvector")]
    pub iota_unit: DVector<f64>,
    #[serde(with = "serde_dvector")]
    pub iota_time: DVector<f64>,
    pub sigma_eps: f64,
    pub tau: f64,
    pub pattern: TreatmentPattern,
    pub bound_l2: Option<f64>,
    pub seed: u64,
}

/// Realized exogenous draws for one replication. Rows follow the same
/// layout as [`DgpSpec`]: `lambda_tilde` is `n_periods x r`, `gamma_tilde`
/// is `n_units x r`, `eps` is `n_units x n_periods`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDraw {
    #[serde(with = "serde_dmatrix_rows")]
    pub lambda_tilde: DMatrix<f64>,
    #[serde(with = "serde_dmatrix_rows")]
    pub gamma_tilde: DMatrix<f64>,
    #[serde(with = "serde_dmatrix_rows")]
    pub eps: DMatrix<f64>,
}

/// Components of a [`LatentDraw`] to hold fixed while the rest is redrawn.
/// Noise is always redrawn.
#[derive(Debug, Clone, Default)]
pub struct PartialDraw {
    pub lambda_tilde: Option<DMatrix<f64>>,
    pub gamma_tilde: Option<DMatrix<f64>>,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::invalid("factor dimension r must be at least 1"));
        }
        let n_units = self.pattern.n_units();
        let n_periods = self.pattern.n_periods();
        check_shape("lambda", &self.lambda, n_periods, self.r)?;
        check_shape("gamma", &self.gamma, n_units, self.r)?;
        check_covariance("sigma_lambda", &self.sigma_lambda, self.r)?;
        check_covariance("sigma_gamma", &self.sigma_gamma, self.r)?;
        check_len("iota_unit", &self.iota_unit, n_units)?;
        check_len("iota_time", &self.iota_time, n_periods)?;
        if !self.sigma_eps.is_finite() || self.sigma_eps <= 0.0 {
            return Err(Error::invalid(format!(
                "sigma_eps must be positive and finite, got {}",
                self.sigma_eps
            )));
        }
        if !self.tau.is_finite() {
            return Err(Error::invalid(format!("tau is not finite: {}", self.tau)));
        }
        if let Some(b) = self.bound_l2 {
            if !b.is_finite() || b <= 0.0 {
                return Err(Error::invalid(format!(
                    "bound_l2 must be positive and finite, got {b}"
                )));
            }
        }
        Ok(())
    }

    /// Copy with a different base seed.
    pub fn with_seed(&self, seed: u64) -> DgpSpec {
        DgpSpec { seed, ..self.clone() }
    }

    /// Copy with the deterministic confounders `lambda` and `gamma` scaled
    /// by `c`. `c = 0` removes all confounding.
    pub fn with_confounding_scale(&self, c: f64) -> DgpSpec {
        let mut out = self.clone();
        out.lambda *= c;
        out.gamma *= c;
        out
    }

    /// Copy resized to `pattern`. When the pattern is unchanged this is the
    /// identity. Otherwise every per-period quantity is replaced by its
    /// block mean (pre rows get the pre-block mean, post rows the
    /// post-block mean) and per-unit quantities likewise, so matched
    /// designs stay matched and block-level gaps are preserved across
    /// sizes.
    pub fn resized(&self, pattern: TreatmentPattern) -> Result<DgpSpec> {
        self.validate()?;
        if pattern == self.pattern {
            return Ok(self.clone());
        }
        let lambda = block_mean_resize(
            &self.lambda,
            self.pattern.n_pre(),
            pattern.n_pre(),
            pattern.n_periods(),
        );
        let gamma = block_mean_resize(
            &self.gamma,
            self.pattern.n_controls(),
            pattern.n_controls(),
            pattern.n_units(),
        );
        let iota_time = block_mean_resize_vec(
            &self.iota_time,
            self.pattern.n_pre(),
            pattern.n_pre(),
            pattern.n_periods(),
        );
        let iota_unit = block_mean_resize_vec(
            &self.iota_unit,
            self.pattern.n_controls(),
            pattern.n_controls(),
            pattern.n_units(),
        );
        Ok(DgpSpec { lambda, gamma, iota_time, iota_unit, pattern, ..self.clone() })
    }

    /// Ready-made one-factor design with constant factor paths and
    /// loadings, so uniform weights are exactly matched. Handy as a
    /// template for spec files and as a smoke-test design.
    pub fn matched_example(pattern: TreatmentPattern, seed: u64) -> DgpSpec {
        DgpSpec {
            r: 1,
            lambda: DMatrix::from_element(pattern.n_periods(), 1, 0.5),
            gamma: DMatrix::from_element(pattern.n_units(), 1, 0.5),
            sigma_lambda: DMatrix::from_element(1, 1, 0.04),
            sigma_gamma: DMatrix::from_element(1, 1, 0.04),
            iota_unit: DVector::zeros(pattern.n_units()),
            iota_time: DVector::zeros(pattern.n_periods()),
            sigma_eps: 0.3,
            tau: 1.0,
            pattern,
            bound_l2: None,
            seed,
        }
    }
}

fn check_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::invalid(format!(
            "{name} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{name} contains non-finite entries")));
    }
    Ok(())
}

fn check_len(name: &str, v: &DVector<f64>, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::invalid(format!("{name} must have length {len}, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{name} contains non-finite entries")));
    }
    Ok(())
}

fn check_covariance(name: &str, m: &DMatrix<f64>, r: usize) -> Result<()> {
    check_shape(name, m, r, r)?;
    let scale = m.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1.0);
    for i in 0..r {
        for j in (i + 1)..r {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::invalid(format!("{name} is not symmetric")));
            }
        }
    }
    if cholesky_of(m).is_none() {
        return Err(Error::invalid(format!("{name} is not positive definite")));
    }
    Ok(())
}

fn cholesky_of(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
}

fn block_mean_resize(m: &DMatrix<f64>, old_split: usize, new_split: usize, new_len: usize) -> DMatrix<f64> {
    let r = m.ncols();
    let pre_mean = block_col_mean(m, 0, old_split);
    let post_mean = block_col_mean(m, old_split, m.nrows());
    DMatrix::from_fn(new_len, r, |i, j| if i < new_split { pre_mean[j] } else { post_mean[j] })
}

fn block_col_mean(m: &DMatrix<f64>, from: usize, to: usize) -> DVector<f64> {
    let mut mean = DVector::zeros(m.ncols());
    for i in from..to {
        mean += m.row(i).transpose();
    }
    mean / (to - from) as f64
}

fn block_mean_resize_vec(v: &DVector<f64>, old_split: usize, new_split: usize, new_len: usize) -> DVector<f64> {
    let pre: f64 = v.rows(0, old_split).sum() / old_split as f64;
    let post: f64 = v.rows(old_split, v.len() - old_split).sum() / (v.len() - old_split) as f64;
    DVector::from_fn(new_len, |i, _| if i < new_split { pre } else { post })
}

/// Draws one replication and assembles the observed panel.
pub fn simulate(spec: &DgpSpec) -> Result<(Panel, LatentDraw)> {
    simulate_conditional(spec, &PartialDraw::default())
}

/// Like [`simulate`], but keeps the supplied components of the latent draw
/// fixed. Useful for studying estimators conditional on loadings or
/// factors. The substream for a fixed component is simply not consumed;
/// the other streams are unaffected either way.
pub fn simulate_conditional(spec: &DgpSpec, fixed: &PartialDraw) -> Result<(Panel, LatentDraw)> {
    spec.validate()?;
    let n_units = spec.pattern.n_units();
    let n_periods = spec.pattern.n_periods();

    let lambda_tilde = match &fixed.lambda_tilde {
        Some(lt) => {
            check_shape("fixed lambda_tilde", lt, n_periods, spec.r)?;
            lt.clone()
        }
        None => draw_rows(
            spec.seed,
            STREAM_LAMBDA,
            n_periods,
            &spec.sigma_lambda,
            spec.bound_l2,
        )?,
    };
    let gamma_tilde = match &fixed.gamma_tilde {
        Some(gt) => {
            check_shape("fixed gamma_tilde", gt, n_units, spec.r)?;
            gt.clone()
        }
        None => draw_rows(spec.seed, STREAM_GAMMA, n_units, &spec.sigma_gamma, spec.bound_l2)?,
    };

    let mut rng = stream_rng(spec.seed, STREAM_EPS);
    let eps = DMatrix::from_fn(n_units, n_periods, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        spec.sigma_eps * z
    });

    let draw = LatentDraw { lambda_tilde, gamma_tilde, eps };
    let y0 = counterfactual_outcomes(spec, &draw)?;
    let mut y = y0;
    for i in 0..n_units {
        for t in 0..n_periods {
            if spec.pattern.is_treated(i, t) {
                y[(i, t)] += spec.tau;
            }
        }
    }
    let panel = Panel::from_matrix(y, spec.pattern)?;
    Ok((panel, draw))
}

/// Untreated outcome matrix implied by a spec and a latent draw.
pub fn counterfactual_outcomes(spec: &DgpSpec, draw: &LatentDraw) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n_units = spec.pattern.n_units();
    let n_periods = spec.pattern.n_periods();
    check_shape("lambda_tilde", &draw.lambda_tilde, n_periods, spec.r)?;
    check_shape("gamma_tilde", &draw.gamma_tilde, n_units, spec.r)?;
    check_shape("eps", &draw.eps, n_units, n_periods)?;

    let factors = &spec.lambda + &draw.lambda_tilde;
    let loadings = &spec.gamma + &draw.gamma_tilde;
    let mut y0 = loadings * factors.transpose();
    for i in 0..n_units {
        for t in 0..n_periods {
            y0[(i, t)] += spec.iota_unit[i] + spec.iota_time[t] + draw.eps[(i, t)];
        }
    }
    Ok(y0)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_rows(
    seed: u64,
    stream: u64,
    n: usize,
    cov: &DMatrix<f64>,
    bound_l2: Option<f64>,
) -> Result<DMatrix<f64>> {
    let r = cov.nrows();
    let chol = cholesky_of(cov)
        .ok_or_else(|| Error::computation("covariance lost positive definiteness"))?;
    let l = chol.l();
    let mut rng = stream_rng(seed, stream);
    let mut out = DMatrix::zeros(n, r);
    let mut z = DVector::zeros(r);
    for i in 0..n {
        for k in 0..r {
            z[k] = rng.sample(StandardNormal);
        }
        let mut x = &l * &z;
        if let Some(b) = bound_l2 {
            let norm = x.norm();
            if norm > b {
                x *= b / norm;
            }
        }
        out.row_mut(i).copy_from(&x.transpose());
    }
    Ok(out)
}

/// Returns a copy of `spec` whose deterministic `lambda` (horizontal) or
/// `gamma` (vertical) is recentred blockwise: each block loses its own
/// mean and gains the overall mean, so uniform weights satisfy the exact
/// matching condition while the overall level is preserved.
pub fn make_matched_spec(spec: &DgpSpec, direction: Direction) -> Result<DgpSpec> {
    spec.validate()?;
    let mut out = spec.clone();
    match direction {
        Direction::Horizontal => {
            out.lambda = recenter_blocks(&spec.lambda, spec.pattern.n_pre())?;
        }
        Direction::Vertical => {
            out.gamma = recenter_blocks(&spec.gamma, spec.pattern.n_controls())?;
        }
    }
    Ok(out)
}

fn recenter_blocks(m: &DMatrix<f64>, split: usize) -> Result<DMatrix<f64>> {
    if split == 0 || split >= m.nrows() {
        return Err(Error::invalid(format!(
            "block split at {split} leaves an empty block in a {}-row matrix",
            m.nrows()
        )));
    }
    let pre_mean = block_col_mean(m, 0, split);
    let post_mean = block_col_mean(m, split, m.nrows());
    let all_mean = block_col_mean(m, 0, m.nrows());
    let mut out = m.clone();
    for i in 0..m.nrows() {
        let block = if i < split { &pre_mean } else { &post_mean };
        for j in 0..m.ncols() {
            out[(i, j)] += all_mean[j] - block[j];
        }
    }
    Ok(out)
}
