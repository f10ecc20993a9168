//! Kalman filter, Rauch-Tung-Striebel smoother and EM estimation of the
//! process covariance.
//!
//! Gap slots get a predict-only step. When gating is enabled, rejected
//! observation rows are dropped from the update of their step.

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::anomaly::{gate_observation, GateConfig, GateDecision};
use crate::error::{Error, Result};
use crate::forecast::build_lambda;
use crate::grid::{GriddedObservations, Observation};
use crate::linalg::{cholesky, log_det, quadratic_form, select_block, select_vector};
use crate::model::{symmetrize, ModelMatrices, StateGaussian, StateLayout};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub const DEFAULT_WINDOW: usize = 200;
pub const DEFAULT_EM_TOL: f64 = 1e-4;
pub const DEFAULT_EM_MAX_ITERS: usize = 50;
/// Smallest number of observation slots EM accepts in its window.
pub const MIN_WINDOW_OBSERVATIONS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Innovation {
    /// Observation rows used in the update.
    pub rows: Vec<usize>,
    pub residual: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub predicted: StateGaussian,
    /// `None` when no row was used for an update (gap or full rejection).
    pub posterior: Option<StateGaussian>,
    pub innovation: Option<Innovation>,
    pub gate: Vec<GateDecision>,
}

impl FilterStep {
    pub fn filtered(&self) -> &StateGaussian {
        self.posterior.as_ref().unwrap_or(&self.predicted)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace {
    pub steps: Vec<FilterStep>,
    /// Log-likelihood of the rows used in updates.
    pub log_likelihood: f64,
}

impl FilterTrace {
    pub fn decisions(&self) -> impl Iterator<Item = &GateDecision> {
        self.steps.iter().flat_map(|s| s.gate.iter())
    }

    pub fn rejected_count(&self) -> usize {
        self.decisions().filter(|d| !d.accepted).count()
    }

    fn rejection_signature(&self) -> Vec<(usize, Option<usize>)> {
        self.decisions()
            .filter(|d| !d.accepted)
            .map(|d| (d.grid_index, d.depth))
            .collect()
    }
}

fn check_inputs(
    grid: &GriddedObservations,
    model: &ModelMatrices,
    initial: &StateGaussian,
) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InsufficientData("empty grid".into()));
    }
    if (grid.dt - model.dt).abs() > 1e-12 * grid.dt.max(model.dt) {
        return Err(Error::InvalidParameter(format!(
            "grid spacing {} differs from model spacing {}",
            grid.dt, model.dt
        )));
    }
    if initial.dim() != model.dim_state() {
        return Err(Error::DimensionMismatch(format!(
            "initial state has {} entries, model expects {}",
            initial.dim(),
            model.dim_state()
        )));
    }
    for slot in grid.slots.iter().flatten() {
        if slot.observation.len() != model.dim_obs() {
            return Err(Error::DimensionMismatch(format!(
                "observation has {} rows, model expects {}",
                slot.observation.len(),
                model.dim_obs()
            )));
        }
    }
    Ok(())
}

/// Forward filtering pass. `initial` is the prior of the first slot.
pub fn kalman_forward(
    grid: &GriddedObservations,
    model: &ModelMatrices,
    initial: &StateGaussian,
    gate: Option<&GateConfig>,
) -> Result<FilterTrace> {
    check_inputs(grid, model, initial)?;
    let ft = model.f.transpose();
    let mut steps: Vec<FilterStep> = Vec::with_capacity(grid.len());
    let mut log_likelihood = 0.0;

    for (pos, slot) in grid.slots.iter().enumerate() {
        let index = grid.first_index + pos;
        let predicted = match steps.last() {
            None => StateGaussian {
                grid_index: index,
                ..initial.clone()
            },
            Some(prev) => {
                let f = prev.filtered();
                StateGaussian {
                    mean: &model.f * &f.mean,
                    covariance: symmetrize(&(&model.f * &f.covariance * &ft + &model.q)),
                    grid_index: index,
                }
            }
        };

        let mut step = FilterStep {
            predicted,
            posterior: None,
            innovation: None,
            gate: Vec::new(),
        };
        if let Some(slot) = slot {
            let obs = &slot.observation;
            let mut rows = obs.observed_rows();
            if let Some(config) = gate {
                if obs.any_observed() {
                    step.gate = gate_observation(&step.predicted, obs, model, config)?;
                    let rejected: Vec<usize> = step
                        .gate
                        .iter()
                        .filter(|d| !d.accepted)
                        .flat_map(|d| d.rows.iter().copied())
                        .collect();
                    rows.retain(|r| !rejected.contains(r));
                }
            }
            if !rows.is_empty() {
                let (posterior, innovation, ll) = update(&step.predicted, obs, &rows, model)?;
                log_likelihood += ll;
                step.posterior = Some(posterior);
                step.innovation = Some(innovation);
            }
        }
        steps.push(step);
    }

    Ok(FilterTrace {
        steps,
        log_likelihood,
    })
}

/// Joseph-form measurement update on the given observation rows.
fn update(
    prior: &StateGaussian,
    obs: &Observation,
    rows: &[usize],
    model: &ModelMatrices,
) -> Result<(StateGaussian, Innovation, f64)> {
    let all_cols: Vec<usize> = (0..model.dim_state()).collect();
    let h = select_block(&model.h, rows, &all_cols);
    let r = select_block(&model.r, rows, rows);
    let z = select_vector(obs.values(), rows);

    let p = &prior.covariance;
    let ph_t = p * h.transpose();
    let s = symmetrize(&(&h * &ph_t + &r));
    let chol = cholesky(&s).ok_or_else(|| Error::SingularModel {
        step: prior.grid_index,
        what: "innovation covariance is not positive definite".into(),
    })?;
    let residual = z - &h * &prior.mean;
    // K = P H^T S^-1
    let gain = chol.solve(&ph_t.transpose()).transpose();
    let mean = &prior.mean + &gain * &residual;
    let i_kh = DMatrix::identity(model.dim_state(), model.dim_state()) - &gain * &h;
    let covariance = symmetrize(&(&i_kh * p * i_kh.transpose() + &gain * &r * gain.transpose()));

    let ll =
        -0.5 * (rows.len() as f64 * LN_2PI + log_det(&chol) + quadratic_form(&chol, &residual));
    Ok((
        StateGaussian {
            mean,
            covariance,
            grid_index: prior.grid_index,
        },
        Innovation {
            rows: rows.to_vec(),
            residual,
            covariance: s,
        },
        ll,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub states: Vec<StateGaussian>,
    /// `cov(x_k, x_{k-1} | all data)`; entry 0 is unused and zero.
    pub lag_one: Vec<DMatrix<f64>>,
}

/// Backward RTS pass over a forward trace.
pub fn rts_smooth(trace: &FilterTrace, model: &ModelMatrices) -> Result<Smoothed> {
    let n = trace.steps.len();
    if n == 0 {
        return Err(Error::InsufficientData("empty filter trace".into()));
    }
    let dim = model.dim_state();
    let mut states: Vec<StateGaussian> = vec![trace.steps[n - 1].filtered().clone(); n];
    let mut lag_one = vec![DMatrix::zeros(dim, dim); n];

    for k in (0..n - 1).rev() {
        let filtered = trace.steps[k].filtered();
        let next_pred = &trace.steps[k + 1].predicted;
        let chol = cholesky(&next_pred.covariance).ok_or_else(|| Error::SingularModel {
            step: next_pred.grid_index,
            what: "predicted covariance is not positive definite".into(),
        })?;
        // G = P_f F^T P_pred^-1
        let gain = chol.solve(&(&model.f * &filtered.covariance)).transpose();
        let next = &states[k + 1];
        let mean = &filtered.mean + &gain * (&next.mean - &next_pred.mean);
        let covariance = symmetrize(
            &(&filtered.covariance
                + &gain * (&next.covariance - &next_pred.covariance) * gain.transpose()),
        );
        lag_one[k + 1] = &next.covariance * gain.transpose();
        states[k] = StateGaussian {
            mean,
            covariance,
            grid_index: filtered.grid_index,
        };
    }
    Ok(Smoothed { states, lag_one })
}

/// Closed-form maximiser of the expected complete-data log-likelihood in `Q`.
fn m_step(smoothed: &Smoothed, f: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = f.nrows();
    let ft = f.transpose();
    let transitions = smoothed.states.len() - 1;
    let mut acc = DMatrix::zeros(dim, dim);
    for k in 1..=transitions {
        let cur = &smoothed.states[k];
        let prev = &smoothed.states[k - 1];
        let resid = &cur.mean - f * &prev.mean;
        let cross = &smoothed.lag_one[k] * &ft;
        acc += &resid * resid.transpose() + &cur.covariance - &cross - cross.transpose()
            + f * &prev.covariance * &ft;
    }
    symmetrize(&(acc / transitions as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    /// Number of most recent grid steps used.
    pub window: usize,
    /// Relative Frobenius change of `Q` at which iteration stops.
    pub tol: f64,
    pub max_iters: usize,
    pub gate: Option<GateConfig>,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            tol: DEFAULT_EM_TOL,
            max_iters: DEFAULT_EM_MAX_ITERS,
            gate: Some(GateConfig::default()),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < MIN_WINDOW_OBSERVATIONS {
            return Err(Error::InvalidParameter(format!(
                "smoother window must be at least {MIN_WINDOW_OBSERVATIONS} steps, got {}",
                self.window
            )));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "EM tolerance must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter(
                "EM needs at least one iteration".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmIteration {
    /// Log-likelihood of the E-step run with the `Q` entering this iteration.
    pub log_likelihood: f64,
    pub q_change: f64,
    pub gated: bool,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherResult {
    /// The windowed grid the result refers to.
    pub grid: GriddedObservations,
    pub smoothed: Vec<StateGaussian>,
    pub lag_one: Vec<DMatrix<f64>>,
    pub q: DMatrix<f64>,
    pub em_iterations: usize,
    pub converged: bool,
    /// Log-likelihood of the final pass with the learned `Q`.
    pub log_likelihood: f64,
    pub history: Vec<EmIteration>,
    /// Final forward pass, including gate decisions.
    pub trace: FilterTrace,
}

impl SmootherResult {
    pub fn last_state(&self) -> &StateGaussian {
        self.smoothed
            .last()
            .expect("smoother result is never empty")
    }

    pub fn decisions(&self) -> impl Iterator<Item = &GateDecision> {
        self.trace.decisions()
    }
}

type RejectionSet = Vec<(usize, Option<usize>)>;

/// Learns `Q` by EM over the last `config.window` steps of `grid`.
///
/// `model.q` is the starting point; `initial` is the prior of the first
/// windowed slot. A configured gate is applied in every E-step.
pub fn em_learn_q(
    grid: &GriddedObservations,
    model: &ModelMatrices,
    initial: &StateGaussian,
    config: &EmConfig,
) -> Result<SmootherResult> {
    config.validate()?;
    let window = grid.tail(config.window);
    let observed = window.filled_count();
    if observed < MIN_WINDOW_OBSERVATIONS {
        return Err(Error::InsufficientData(format!(
            "smoother window holds {observed} observation steps, need {MIN_WINDOW_OBSERVATIONS}"
        )));
    }
    if window.len() < 2 {
        return Err(Error::InsufficientData(
            "EM needs at least two grid steps".into(),
        ));
    }
    let initial = StateGaussian {
        grid_index: window.first_index,
        ..initial.clone()
    };

    let mut q = symmetrize(&model.q);
    let mut history = Vec::new();
    let gate = config.gate.as_ref();
    let mut converged = false;
    let mut decreases = 0usize;
    let mut previous: Option<(f64, RejectionSet)> = None;
    for _ in 0..config.max_iters {
        let current = model.with_q(q.clone());
        let trace = kalman_forward(&window, &current, &initial, gate)?;
        let smoothed = rts_smooth(&trace, &current)?;
        let q_new = m_step(&smoothed, &current.f);
        let norm = q.norm();
        let q_change = if norm > 0.0 {
            (&q_new - &q).norm() / norm
        } else if q_new.norm() == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };

        // a changed rejection set changes the likelihood being maximised
        let signature = trace.rejection_signature();
        if let Some((ll_prev, sig_prev)) = &previous {
            let slack = config.tol * ll_prev.abs().max(1.0);
            if *sig_prev == signature && trace.log_likelihood < ll_prev - slack {
                decreases += 1;
            } else {
                decreases = 0;
            }
        }
        history.push(EmIteration {
            log_likelihood: trace.log_likelihood,
            q_change,
            gated: gate.is_some(),
            rejected: signature.len(),
        });
        if decreases >= 3 {
            return Err(Error::EmDivergence {
                log_likelihoods: history.iter().map(|h| h.log_likelihood).collect(),
            });
        }
        debug!(
            "EM iteration {}: ll={:.6} dQ={:.3e} rejected={}",
            history.len(),
            trace.log_likelihood,
            q_change,
            signature.len()
        );
        previous = Some((trace.log_likelihood, signature));
        q = q_new;
        if q_change < config.tol {
            converged = true;
            break;
        }
    }

    let learned = model.with_q(q.clone());
    let trace = kalman_forward(&window, &learned, &initial, gate)?;
    let smoothed = rts_smooth(&trace, &learned)?;
    Ok(SmootherResult {
        grid: window,
        smoothed: smoothed.states,
        lag_one: smoothed.lag_one,
        q,
        em_iterations: history.len(),
        converged,
        log_likelihood: trace.log_likelihood,
        history,
        trace,
    })
}

/// Diffuse prior for the first slot of `grid`. Positions start at their first
/// observed value with variance `(10 eps_m d)^2`. Velocities start at the
/// finite difference of the first two observations of each row, with variance
/// `1 (mm/day)^2` plus twice the position variance over the squared gap.
pub fn diffuse_prior(
    layout: &StateLayout,
    grid: &GriddedObservations,
    eps_m: f64,
) -> Result<StateGaussian> {
    let n_obs = layout.dim_obs();
    // (slot, value) of the first two observations per row
    let mut first: Vec<Option<(usize, f64)>> = vec![None; n_obs];
    let mut second: Vec<Option<(usize, f64)>> = vec![None; n_obs];
    for (k, slot) in grid.slots.iter().enumerate() {
        let Some(slot) = slot else { continue };
        let obs = &slot.observation;
        if obs.len() != n_obs {
            return Err(Error::DimensionMismatch(format!(
                "observation has {} rows, layout expects {n_obs}",
                obs.len()
            )));
        }
        for r in obs.observed_rows() {
            let entry = Some((k, obs.values()[r]));
            if first[r].is_none() {
                first[r] = entry;
            } else if second[r].is_none() {
                second[r] = entry;
            }
        }
        if second.iter().all(Option::is_some) {
            break;
        }
    }
    let dim = layout.dim_state();
    let mut mean = DVector::zeros(dim);
    let mut variances = DVector::from_element(dim, 1.0);
    for (d, depth) in layout.depths().iter().enumerate() {
        let v = (10.0 * eps_m * depth).powi(2);
        for r in [2 * d, 2 * d + 1] {
            variances[r] = v;
            if let Some((k0, z0)) = first[r] {
                mean[r] = z0;
                if let Some((k1, z1)) = second[r] {
                    let gap = (k1 - k0) as f64 * grid.dt;
                    mean[n_obs + r] = (z1 - z0) / gap;
                    variances[n_obs + r] += 2.0 * v / (gap * gap);
                }
            }
        }
    }
    StateGaussian::new(mean, DMatrix::from_diagonal(&variances), grid.first_index)
}

/// `sigma_0 * Lambda(dt)` with `trace = 0.01 * trace(R)`.
pub fn initial_process_covariance(
    layout: &StateLayout,
    dt: f64,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let lambda = build_lambda(layout, dt)?;
    let sigma0 = 0.01 * r.trace() / lambda.trace();
    Ok(lambda * sigma0)
}
