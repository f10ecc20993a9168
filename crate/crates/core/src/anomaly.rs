//! Validation gating of observations against the one-step predictive
//! distribution `N(H mu, H Sigma H^T + R)`.
//!
//! An observation is rejected when its Mahalanobis distance from the
//! predictive mean exceeds the threshold `gamma`. Rejected observations are
//! skipped by the filter update but kept, flagged, in the decision log.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::grid::Observation;
use crate::linalg::{cholesky, quadratic_form, select_block, select_vector};
use crate::model::{regularized, symmetrize, ModelMatrices, StateGaussian};

pub const DEFAULT_GAMMA: f64 = 5.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// One decision over all observed rows of a step.
    #[default]
    Joint,
    /// One decision per depth (A,B pair).
    PerDepth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub gamma: f64,
    pub mode: GateMode,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            mode: GateMode::Joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub grid_index: usize,
    /// Depth index for per-depth gating, `None` for joint gating.
    pub depth: Option<usize>,
    pub distance: f64,
    pub threshold: f64,
    pub accepted: bool,
    /// `P(chi^2_k > distance^2)` with `k` the number of gated rows.
    pub tail_probability: f64,
    /// Observation rows the decision covers.
    pub rows: Vec<usize>,
    pub observation: Observation,
}

/// `(H mu, H Sigma H^T + R)` for a predicted state.
pub fn predictive_distribution(
    prior: &StateGaussian,
    model: &ModelMatrices,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if prior.dim() != model.dim_state() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} entries, model expects {}",
            prior.dim(),
            model.dim_state()
        )));
    }
    let mean = &model.h * &prior.mean;
    let cov = &model.h * &prior.covariance * model.h.transpose() + &model.r;
    Ok((mean, symmetrize(&cov)))
}

/// `sqrt((x - mu)^T Sigma^{-1} (x - mu))` via a Cholesky factor of the
/// regularized covariance.
pub fn mahalanobis(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    covariance: &DMatrix<f64>,
) -> Result<f64> {
    if x.len() != mean.len() || covariance.nrows() != x.len() || covariance.ncols() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "mahalanobis: vector {} / mean {} / covariance {}x{}",
            x.len(),
            mean.len(),
            covariance.nrows(),
            covariance.ncols()
        )));
    }
    let chol = cholesky(&regularized(covariance)).ok_or(Error::SingularGate)?;
    Ok(quadratic_form(&chol, &(x - mean)).sqrt())
}

pub fn chi2_tail(distance: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    match ChiSquared::new(dof as f64) {
        Ok(d) => d.sf(distance * distance),
        Err(_) => f64::NAN,
    }
}

fn decide(
    prior: &StateGaussian,
    observation: &Observation,
    rows: Vec<usize>,
    depth: Option<usize>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    gamma: f64,
) -> Result<GateDecision> {
    let x = select_vector(observation.values(), &rows);
    let mu = select_vector(mean, &rows);
    let sigma = select_block(cov, &rows, &rows);
    let distance = mahalanobis(&x, &mu, &sigma)?;
    Ok(GateDecision {
        grid_index: prior.grid_index,
        depth,
        distance,
        threshold: gamma,
        accepted: distance <= gamma,
        tail_probability: chi2_tail(distance, rows.len()),
        rows,
        observation: observation.clone(),
    })
}

/// Joint gate over all observed rows of `observation`.
pub fn gate_step(
    prior: &StateGaussian,
    observation: &Observation,
    model: &ModelMatrices,
    gamma: f64,
) -> Result<GateDecision> {
    check_gamma(gamma)?;
    let (mean, cov) = predictive_distribution(prior, model)?;
    decide(
        prior,
        observation,
        observation.observed_rows(),
        None,
        &mean,
        &cov,
        gamma,
    )
}

/// Gate according to `config.mode`; returns one decision per gated group.
pub fn gate_observation(
    prior: &StateGaussian,
    observation: &Observation,
    model: &ModelMatrices,
    config: &GateConfig,
) -> Result<Vec<GateDecision>> {
    check_gamma(config.gamma)?;
    match config.mode {
        GateMode::Joint => Ok(vec![gate_step(prior, observation, model, config.gamma)?]),
        GateMode::PerDepth => {
            let (mean, cov) = predictive_distribution(prior, model)?;
            let observed = observation.observed();
            (0..observation.len() / 2)
                .filter_map(|d| {
                    let rows: Vec<usize> = [2 * d, 2 * d + 1]
                        .into_iter()
                        .filter(|&r| observed[r])
                        .collect();
                    (!rows.is_empty()).then_some((d, rows))
                })
                .map(|(d, rows)| {
                    decide(prior, observation, rows, Some(d), &mean, &cov, config.gamma)
                })
                .collect()
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "gate threshold must be positive, got {gamma}"
        )))
    }
}
