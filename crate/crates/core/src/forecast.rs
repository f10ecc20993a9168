//! Kinematic process-noise template and open-loop forecasting.
//!
//! The EM-learned `Q` is tied to the smoothing grid spacing. Projecting it
//! onto the white-noise-acceleration template `Lambda(dt)` gives a scalar
//! intensity `sigma_alpha`, and `sigma_alpha * Lambda(dt_f)` is then a valid
//! process covariance for any forecast spacing `dt_f`.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::frobenius_inner;
use crate::model::{build_transition, symmetrize, ModelMatrices, StateGaussian, StateLayout};

pub const DEFAULT_HORIZON_DAYS: f64 = 30.0;

/// Van Loan discretization of white-noise acceleration:
/// `[[dt^3/3 I, dt^2/2 I], [dt^2/2 I, dt I]]`.
pub fn build_lambda(layout: &StateLayout, dt: f64) -> Result<DMatrix<f64>> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "template timestep must be positive, got {dt}"
        )));
    }
    let half = layout.dim_obs();
    let mut lambda = DMatrix::zeros(layout.dim_state(), layout.dim_state());
    let pos = dt.powi(3) / 3.0;
    let cross = dt * dt / 2.0;
    for i in 0..half {
        lambda[(i, i)] = pos;
        lambda[(i, i + half)] = cross;
        lambda[(i + half, i)] = cross;
        lambda[(i + half, i + half)] = dt;
    }
    Ok(lambda)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicNoiseFit {
    /// Non-negative intensity used for forecasting.
    pub sigma_alpha: f64,
    /// Least-squares coefficient before clamping.
    pub raw_sigma_alpha: f64,
    /// `||Q - sigma_alpha * Lambda||_F`
    pub residual_norm: f64,
    pub dt_fit: f64,
    pub clamped: bool,
}

/// Frobenius least-squares fit of `q_learned ~ sigma_alpha * lambda`.
pub fn fit_sigma_alpha(
    q_learned: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    dt_fit: f64,
) -> Result<KinematicNoiseFit> {
    if q_learned.shape() != lambda.shape() {
        return Err(Error::DimensionMismatch(format!(
            "Q is {:?}, template is {:?}",
            q_learned.shape(),
            lambda.shape()
        )));
    }
    let denom = frobenius_inner(lambda, lambda);
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::DegenerateTemplate);
    }
    let raw = frobenius_inner(q_learned, lambda) / denom;
    let clamped = raw < 0.0;
    if clamped {
        warn!("learned process covariance projects negatively onto the kinematic template ({raw:e}); clamping to 0");
    }
    let sigma_alpha = raw.max(0.0);
    Ok(KinematicNoiseFit {
        sigma_alpha,
        raw_sigma_alpha: raw,
        residual_norm: (q_learned - lambda * sigma_alpha).norm(),
        dt_fit,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveObservation {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl PredictiveObservation {
    pub fn std_dev(&self, row: usize) -> f64 {
        self.covariance[(row, row)].max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBundle {
    /// Grid index of the state the forecast starts from.
    pub start_index: usize,
    /// Days after the grid origin of the starting state.
    pub start_offset_days: f64,
    pub states: Vec<StateGaussian>,
    pub predictive_obs: Vec<PredictiveObservation>,
    pub horizon: f64,
    pub dt_forecast: f64,
    pub sigma_alpha: f64,
}

impl ForecastBundle {
    /// Days after the starting state for forecast step `j` (0-based).
    pub fn lead_days(&self, j: usize) -> f64 {
        (j + 1) as f64 * self.dt_forecast
    }
}

/// Number of forecast steps covering `horizon`.
pub fn forecast_steps(dt_forecast: f64, horizon: f64) -> usize {
    (horizon / dt_forecast - 1e-9).ceil().max(1.0) as usize
}

/// Open-loop propagation with `F(dt_f)` and `sigma_alpha * Lambda(dt_f)`.
///
/// `states[j]` is the forecast `j + 1` steps after `last_state`; its
/// `grid_index` counts forecast steps, not grid steps.
pub fn forecast_states(
    last_state: &StateGaussian,
    layout: &StateLayout,
    fit: &KinematicNoiseFit,
    dt_forecast: f64,
    horizon: f64,
    model: &ModelMatrices,
) -> Result<ForecastBundle> {
    if !dt_forecast.is_finite() || dt_forecast <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "forecast timestep must be positive, got {dt_forecast}"
        )));
    }
    if !horizon.is_finite() || horizon < dt_forecast {
        return Err(Error::InvalidParameter(format!(
            "forecast horizon {horizon} must be finite and at least the timestep {dt_forecast}"
        )));
    }
    if !fit.sigma_alpha.is_finite() || fit.sigma_alpha < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "sigma_alpha must be finite and non-negative, got {}",
            fit.sigma_alpha
        )));
    }
    if last_state
        .mean
        .iter()
        .chain(last_state.covariance.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::InvalidParameter(
            "forecast start state is not finite".into(),
        ));
    }
    if last_state.dim() != layout.dim_state() || model.dim_state() != layout.dim_state() {
        return Err(Error::DimensionMismatch(
            "forecast start state, layout and model disagree".into(),
        ));
    }

    let f = build_transition(layout, dt_forecast)?;
    let ft = f.transpose();
    let q = build_lambda(layout, dt_forecast)? * fit.sigma_alpha;
    let ht = model.h.transpose();
    let steps = forecast_steps(dt_forecast, horizon);

    let mut states = Vec::with_capacity(steps);
    let mut predictive_obs = Vec::with_capacity(steps);
    let mut mean = last_state.mean.clone();
    let mut cov = last_state.covariance.clone();
    for j in 1..=steps {
        mean = &f * &mean;
        cov = symmetrize(&(&f * &cov * &ft + &q));
        predictive_obs.push(PredictiveObservation {
            mean: &model.h * &mean,
            covariance: symmetrize(&(&model.h * &cov * &ht + &model.r)),
        });
        states.push(StateGaussian {
            mean: mean.clone(),
            covariance: cov.clone(),
            grid_index: j,
        });
    }

    Ok(ForecastBundle {
        start_index: last_state.grid_index,
        start_offset_days: last_state.grid_index as f64 * model.dt,
        states,
        predictive_obs,
        horizon,
        dt_forecast,
        sigma_alpha: fit.sigma_alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::is_symmetric_psd;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn layout(n: usize) -> StateLayout {
        StateLayout::new((1..=n).map(|i| i as f64).collect()).unwrap()
    }

    fn fit(sigma: f64) -> KinematicNoiseFit {
        KinematicNoiseFit {
            sigma_alpha: sigma,
            raw_sigma_alpha: sigma,
            residual_norm: 0.0,
            dt_fit: 1.0,
            clamped: false,
        }
    }

    #[test]
    fn lambda_unit_step() {
        let l = build_lambda(&layout(1), 1.0).unwrap();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0 / 3.0,
                0.0,
                0.5,
                0.0, //
                0.0,
                1.0 / 3.0,
                0.0,
                0.5, //
                0.5,
                0.0,
                1.0,
                0.0, //
                0.0,
                0.5,
                0.0,
                1.0,
            ],
        );
        assert_eq!(l, expected);
    }

    #[test]
    fn lambda_two_day_step() {
        let l = build_lambda(&layout(1), 2.0).unwrap();
        assert_relative_eq!(l[(0, 0)], 8.0 / 3.0);
        assert_relative_eq!(l[(1, 1)], 8.0 / 3.0);
        assert_eq!(l[(0, 2)], 2.0);
        assert_eq!(l[(3, 1)], 2.0);
        assert_eq!(l[(2, 2)], 2.0);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn lambda_rejects_non_positive() {
        assert!(build_lambda(&layout(1), 0.0).is_err());
        assert!(build_lambda(&layout(1), -1.0).is_err());
    }

    #[test]
    fn fit_exact_multiple_and_zero() {
        let lam = build_lambda(&layout(2), 0.7).unwrap();
        let f = fit_sigma_alpha(&(&lam * 2.0), &lam, 0.7).unwrap();
        assert_relative_eq!(f.sigma_alpha, 2.0, max_relative = 1e-14);
        assert!(f.residual_norm < 1e-14);
        let f = fit_sigma_alpha(&DMatrix::zeros(8, 8), &lam, 0.7).unwrap();
        assert_eq!(f.sigma_alpha, 0.0);
        assert!(!f.clamped);
    }

    #[test]
    fn fit_orthogonal_perturbation() {
        let lam = build_lambda(&layout(1), 1.5).unwrap();
        // Gram-Schmidt a perturbation against lambda
        let raw = DMatrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let raw = symmetrize(&raw);
        let e = &raw - &lam * (frobenius_inner(&raw, &lam) / frobenius_inner(&lam, &lam));
        assert!(frobenius_inner(&e, &lam).abs() < 1e-12);
        let f = fit_sigma_alpha(&(&lam + &e), &lam, 1.5).unwrap();
        assert_relative_eq!(f.sigma_alpha, 1.0, max_relative = 1e-12);
        assert_relative_eq!(f.residual_norm, e.norm(), max_relative = 1e-12);
    }

    #[test]
    fn fit_clamps_negative() {
        let lam = build_lambda(&layout(1), 1.0).unwrap();
        let f = fit_sigma_alpha(&(&lam * -3.0), &lam, 1.0).unwrap();
        assert!(f.clamped);
        assert_eq!(f.sigma_alpha, 0.0);
        assert_relative_eq!(f.raw_sigma_alpha, -3.0, max_relative = 1e-14);
        assert!(matches!(
            fit_sigma_alpha(&lam, &DMatrix::zeros(4, 4), 1.0),
            Err(Error::DegenerateTemplate)
        ));
    }

    fn model(l: &StateLayout, dt: f64) -> ModelMatrices {
        ModelMatrices::kinematic(l, dt, 0.1, DMatrix::zeros(l.dim_state(), l.dim_state())).unwrap()
    }

    #[test]
    fn noise_free_forecast_follows_velocity() {
        let l = layout(1);
        let start = StateGaussian::new(
            DVector::from_vec(vec![1.0, -1.0, 0.2, 0.05]),
            DMatrix::identity(4, 4) * 1e-3,
            40,
        )
        .unwrap();
        for dt in [1.0, 0.5, 0.25, 3.0] {
            let b = forecast_states(&start, &l, &fit(0.0), dt, 30.0, &model(&l, 1.0)).unwrap();
            let last = b.states.last().unwrap();
            let t = b.lead_days(b.states.len() - 1);
            assert_relative_eq!(last.mean[0], 1.0 + 0.2 * t, max_relative = 1e-12);
            assert_relative_eq!(last.mean[1], -1.0 + 0.05 * t, max_relative = 1e-12);
        }
    }

    #[test]
    fn one_step_covariance_by_hand() {
        let l = layout(1);
        let s0 = DMatrix::from_row_slice(
            4,
            4,
            &[
                2.0, 0.1, 0.3, 0.0, //
                0.1, 1.0, 0.0, 0.2, //
                0.3, 0.0, 0.5, 0.05, //
                0.0, 0.2, 0.05, 0.4,
            ],
        );
        let start = StateGaussian::new(DVector::zeros(4), s0.clone(), 0).unwrap();
        let (dt, sigma) = (2.0, 0.3);
        let b = forecast_states(&start, &l, &fit(sigma), dt, dt, &model(&l, 1.0)).unwrap();
        assert_eq!(b.states.len(), 1);
        let s1 = &b.states[0].covariance;
        // Sigma_1 = F S F^T + sigma Lambda, F = [[1,0,dt,0],[0,1,0,dt],[0,0,1,0],[0,0,0,1]]
        let s = |i: usize, j: usize| s0[(i, j)];
        let expected_00 =
            s(0, 0) + 2.0 * dt * s(0, 2) + dt * dt * s(2, 2) + sigma * dt.powi(3) / 3.0;
        let expected_01 = s(0, 1) + dt * s(0, 3) + dt * s(2, 1) + dt * dt * s(2, 3);
        let expected_02 = s(0, 2) + dt * s(2, 2) + sigma * dt * dt / 2.0;
        let expected_03 = s(0, 3) + dt * s(2, 3);
        let expected_11 =
            s(1, 1) + 2.0 * dt * s(1, 3) + dt * dt * s(3, 3) + sigma * dt.powi(3) / 3.0;
        let expected_13 = s(1, 3) + dt * s(3, 3) + sigma * dt * dt / 2.0;
        let expected_22 = s(2, 2) + sigma * dt;
        let expected_23 = s(2, 3);
        let expected_33 = s(3, 3) + sigma * dt;
        for (i, j, v) in [
            (0, 0, expected_00),
            (0, 1, expected_01),
            (0, 2, expected_02),
            (0, 3, expected_03),
            (1, 1, expected_11),
            (1, 3, expected_13),
            (2, 2, expected_22),
            (2, 3, expected_23),
            (3, 3, expected_33),
        ] {
            assert_relative_eq!(s1[(i, j)], v, max_relative = 1e-12);
            assert_relative_eq!(s1[(j, i)], v, max_relative = 1e-12);
        }
        assert_relative_eq!(s1[(1, 2)], s(1, 2) + dt * s(3, 2), max_relative = 1e-12);
    }

    #[test]
    fn lambda_semigroup_identity() {
        let l = layout(2);
        for delta in [0.1, 0.5, 1.0, 3.7] {
            let f = build_transition(&l, delta).unwrap();
            let lam = build_lambda(&l, delta).unwrap();
            let composed = &f * &lam * f.transpose() + &lam;
            let double = build_lambda(&l, 2.0 * delta).unwrap();
            assert!((composed - &double).amax() <= 1e-10 * double.amax());
        }
    }

    #[test]
    fn forecast_rejects_bad_arguments() {
        let l = layout(1);
        let start = StateGaussian::new(DVector::zeros(4), DMatrix::identity(4, 4), 0).unwrap();
        let m = model(&l, 1.0);
        assert!(forecast_states(&start, &l, &fit(1.0), 0.0, 30.0, &m).is_err());
        assert!(forecast_states(&start, &l, &fit(1.0), 1.0, 0.5, &m).is_err());
        assert!(forecast_states(&start, &l, &fit(f64::NAN), 1.0, 30.0, &m).is_err());
        assert!(forecast_states(&start, &l, &fit(1.0), 1.0, f64::INFINITY, &m).is_err());
    }

    #[test]
    fn step_count_is_ceiling() {
        assert_eq!(forecast_steps(1.0, 30.0), 30);
        assert_eq!(forecast_steps(1.0 / 3.0, 30.0), 90);
        assert_eq!(forecast_steps(0.7, 30.0), 43);
        assert_eq!(forecast_steps(7.0, 30.0), 5);
    }

    proptest! {
        #[test]
        fn lambda_symmetric_psd(n in 1usize..4, dt in 1e-3f64..50.0) {
            let lam = build_lambda(&layout(n), dt).unwrap();
            prop_assert!(is_symmetric_psd(&lam));
            prop_assert!(lam.symmetric_eigenvalues().min() > 0.0);
        }

        #[test]
        fn residual_orthogonal_to_template(
            seed in proptest::collection::vec(-1.0f64..1.0, 16),
            dt in 0.1f64..5.0,
        ) {
            let a = DMatrix::from_row_slice(4, 4, &seed);
            let q = &a * a.transpose();
            let lam = build_lambda(&layout(1), dt).unwrap();
            let f = fit_sigma_alpha(&q, &lam, dt).unwrap();
            prop_assume!(!f.clamped);
            let resid = &q - &lam * f.sigma_alpha;
            let scale = q.norm() * lam.norm();
            prop_assert!(frobenius_inner(&resid, &lam).abs() <= 1e-10 * scale.max(1e-300));
        }

        #[test]
        fn means_independent_of_sigma(s1 in 0.0f64..10.0, s2 in 0.0f64..10.0, dt in 0.1f64..3.0) {
            let l = layout(2);
            let start = StateGaussian::new(
                DVector::from_fn(8, |i, _| i as f64 * 0.3 - 1.0),
                DMatrix::identity(8, 8),
                0,
            ).unwrap();
            let m = model(&l, 1.0);
            let a = forecast_states(&start, &l, &fit(s1), dt, 10.0, &m).unwrap();
            let b = forecast_states(&start, &l, &fit(s2), dt, 10.0, &m).unwrap();
            for (x, y) in a.states.iter().zip(&b.states) {
                prop_assert_eq!(&x.mean, &y.mean);
            }
            let traces: Vec<f64> = a.states.iter().map(|s| s.covariance.trace()).collect();
            prop_assert!(traces.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}
