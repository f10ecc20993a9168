//! Hold-out validation of forecasts and synthetic ground-truth series.
//!
//! The metric is the KL divergence from each forecast state marginal to the
//! marginal smoothed with the hold-out data included, averaged over forecast
//! steps and depths.

use chrono::{DateTime, TimeZone, Utc};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{BoreholeSeries, InstrumentKind, InstrumentSpec, Reading};
use crate::error::{Error, Result};
use crate::filter::EmConfig;
use crate::forecast::{
    build_lambda, forecast_states, forecast_steps, ForecastBundle, DEFAULT_HORIZON_DAYS,
};
use crate::grid::{days_to_duration, GriddedObservations};
use crate::linalg::{cholesky, log_det, quadratic_form};
use crate::model::{build_transition, regularized, Axis, StateLayout};
use crate::pipeline::{grid_series, smooth_grid, PipelineConfig};

/// Closed-form `KL(N(mu_p, S_p) || N(mu_q, S_q))` in nats.
pub fn kl_gaussian(
    p_mean: &DVector<f64>,
    p_cov: &DMatrix<f64>,
    q_mean: &DVector<f64>,
    q_cov: &DMatrix<f64>,
) -> Result<f64> {
    let dim = p_mean.len();
    if q_mean.len() != dim || p_cov.shape() != (dim, dim) || q_cov.shape() != (dim, dim) {
        return Err(Error::DimensionMismatch(
            "kl_gaussian operands disagree".into(),
        ));
    }
    let lp = cholesky(&regularized(p_cov)).ok_or(Error::SingularMetric)?;
    let lq = cholesky(&regularized(q_cov)).ok_or(Error::SingularMetric)?;
    // tr(S_q^-1 S_p) = ||L_q^-1 L_p||_F^2
    let trace = lq
        .l()
        .solve_lower_triangular(&lp.l())
        .ok_or(Error::SingularMetric)?
        .norm_squared();
    let maha = quadratic_form(&lq, &(q_mean - p_mean));
    let kl = 0.5 * (trace + maha - dim as f64 + log_det(&lq) - log_det(&lp));
    // rounding can leave a tiny negative value for identical inputs
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMarginal {
    /// `(q_A, q_B, p_A, p_B)` at each depth.
    #[default]
    Full4d,
    /// `(q_A, q_B)` at each depth.
    Position2d,
}

impl KlMarginal {
    fn indices(self, layout: &StateLayout, depth: usize) -> Vec<usize> {
        let block = layout.depth_block(depth);
        match self {
            KlMarginal::Full4d => block.to_vec(),
            KlMarginal::Position2d => block[..2].to_vec(),
        }
    }
}

/// Splits off the final `horizon` worth of grid steps as the hold-out set.
pub fn split_train_validation(
    grid: &GriddedObservations,
    horizon: f64,
) -> Result<(GriddedObservations, GriddedObservations)> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "validation horizon must be positive, got {horizon}"
        )));
    }
    let n_val = forecast_steps(grid.dt, horizon);
    if n_val >= grid.len() {
        return Err(Error::InsufficientData(format!(
            "grid of {} steps cannot hold a {horizon}-day hold-out ({n_val} steps)",
            grid.len()
        )));
    }
    let cut = grid.len() - n_val;
    Ok((grid.range(0, cut), grid.range(cut, grid.len())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationConfig {
    pub pipeline: PipelineConfig,
    pub horizon: f64,
    pub marginal: KlMarginal,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            horizon: DEFAULT_HORIZON_DAYS,
            marginal: KlMarginal::Full4d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub borehole_id: String,
    pub instrument_kind: InstrumentKind,
    /// Mean of `per_step_kl`, in nats.
    pub metric_value: f64,
    pub horizon: f64,
    pub dt: f64,
    pub n_forecast_steps: usize,
    pub n_depths: usize,
    pub marginal: KlMarginal,
    /// `per_step_kl[step][depth]`
    pub per_step_kl: Vec<Vec<f64>>,
    /// Rejections in the training smoothing pass.
    pub anomalies_removed: usize,
    /// Rejections in the smoothing pass over training and hold-out data.
    pub anomalies_removed_full: usize,
    pub sigma_alpha: f64,
    /// Hold-out observations inside the 1-sigma and 2-sigma predictive bands.
    pub band_coverage: BandCoverage,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandCoverage {
    pub total: usize,
    pub within_1sigma: usize,
    pub within_2sigma: usize,
}

/// Counts hold-out observations inside the forecast predictive bands.
/// `bundle.predictive_obs[j]` is matched to `holdout.slots[j]`.
pub fn band_coverage(bundle: &ForecastBundle, holdout: &GriddedObservations) -> BandCoverage {
    let mut c = BandCoverage::default();
    for (pred, slot) in bundle.predictive_obs.iter().zip(&holdout.slots) {
        let Some(slot) = slot else { continue };
        for row in slot.observation.observed_rows() {
            let z = (slot.observation.values()[row] - pred.mean[row]).abs() / pred.std_dev(row);
            c.total += 1;
            c.within_1sigma += usize::from(z <= 1.0);
            c.within_2sigma += usize::from(z <= 2.0);
        }
    }
    c
}

/// Mean of the per-depth KL terms.
pub fn average_metric(per_step_kl: &[Vec<f64>]) -> f64 {
    let count: usize = per_step_kl.iter().map(Vec::len).sum();
    if count == 0 {
        return 0.0;
    }
    per_step_kl.iter().flatten().sum::<f64>() / count as f64
}

pub fn validate_forecast(
    series: &BoreholeSeries,
    config: &ValidationConfig,
) -> Result<ValidationReport> {
    let gridded = grid_series(series, &config.pipeline)?;
    let layout = &gridded.layout;
    let (train, holdout) = split_train_validation(&gridded.grid, config.horizon)?;
    let n_val = holdout.len();
    let em = &config.pipeline.em;

    let trained = smooth_grid(layout, &train, gridded.eps_m, em)?;
    let dt = gridded.grid.dt;
    let bundle = forecast_states(
        trained.result.last_state(),
        layout,
        &trained.fit,
        dt,
        n_val as f64 * dt,
        &trained.model,
    )?;

    // the full pass covers the same training context plus the hold-out steps
    let full_em = EmConfig {
        window: em.window + n_val,
        ..em.clone()
    };
    let full = smooth_grid(layout, &gridded.grid, gridded.eps_m, &full_em)?;
    let first = full.result.grid.first_index;

    let mut per_step_kl = Vec::with_capacity(n_val);
    for (j, predicted) in bundle.states.iter().enumerate() {
        let index = holdout.first_index + j;
        let reference = &full.result.smoothed[index - first];
        let row = (0..layout.n_depths())
            .map(|d| {
                let idx = config.marginal.indices(layout, d);
                let (pm, pc) = predicted.marginal(&idx);
                let (qm, qc) = reference.marginal(&idx);
                kl_gaussian(&pm, &pc, &qm, &qc)
            })
            .collect::<Result<Vec<f64>>>()?;
        per_step_kl.push(row);
    }

    Ok(ValidationReport {
        borehole_id: series.borehole_id.clone(),
        instrument_kind: series.instrument_kind,
        metric_value: average_metric(&per_step_kl),
        horizon: config.horizon,
        dt,
        n_forecast_steps: n_val,
        n_depths: layout.n_depths(),
        marginal: config.marginal,
        per_step_kl,
        anomalies_removed: trained.result.trace.rejected_count(),
        anomalies_removed_full: full.result.trace.rejected_count(),
        sigma_alpha: trained.fit.sigma_alpha,
        band_coverage: band_coverage(&bundle, &holdout),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub borehole_id: String,
    pub kind: InstrumentKind,
    pub depths: Vec<f64>,
    /// White-noise intensity of the true process covariance `sigma * Lambda(dt)`.
    pub sigma_true: f64,
    /// Observation noise is `N(0, (eps_m * depth)^2)`; zero gives exact readings.
    pub eps_m: f64,
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    /// Initial A-axis velocity in mm/day; the B axis starts at half of it.
    pub initial_velocity: f64,
    pub start: DateTime<Utc>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            borehole_id: "SYN".into(),
            kind: InstrumentKind::InPlace,
            depths: vec![1.5, 3.0],
            sigma_true: 1e-3,
            eps_m: 0.1,
            dt: 1.0,
            steps: 365,
            seed: 0,
            initial_velocity: 0.02,
            start: Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(),
        }
    }
}

/// Latent states and readings sampled from the kinematic model.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    pub series: BoreholeSeries,
    pub states: Vec<DVector<f64>>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSeries> {
    if !(spec.sigma_true.is_finite() && spec.sigma_true >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma_true must be non-negative, got {}",
            spec.sigma_true
        )));
    }
    if !(spec.eps_m.is_finite() && spec.eps_m >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "eps_m must be non-negative, got {}",
            spec.eps_m
        )));
    }
    if spec.steps < 2 {
        return Err(Error::InvalidParameter(
            "synthetic series needs at least 2 steps".into(),
        ));
    }
    if !spec.initial_velocity.is_finite() {
        return Err(Error::InvalidParameter(
            "initial velocity must be finite".into(),
        ));
    }
    let layout = StateLayout::new(spec.depths.clone())?;
    let f = build_transition(&layout, spec.dt)?;
    let lambda = build_lambda(&layout, spec.dt)?;
    let noise_factor =
        cholesky(&lambda).ok_or(Error::DegenerateTemplate)?.l() * spec.sigma_true.sqrt();
    let obs_sd: Vec<f64> = layout.depths().iter().map(|d| spec.eps_m * d).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = layout.dim_state();
    let mut x = DVector::zeros(dim);
    for d in 0..layout.n_depths() {
        x[layout.velocity_index(d, Axis::A)] = spec.initial_velocity;
        x[layout.velocity_index(d, Axis::B)] = 0.5 * spec.initial_velocity;
    }

    let mut states = Vec::with_capacity(spec.steps);
    let mut readings = Vec::with_capacity(spec.steps * layout.n_depths());
    for k in 0..spec.steps {
        if k > 0 {
            let xi = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            x = &f * &x + &noise_factor * xi;
        }
        let timestamp = spec.start + days_to_duration(k as f64 * spec.dt);
        for (d, depth) in layout.depths().iter().enumerate() {
            let na: f64 = StandardNormal.sample(&mut rng);
            let nb: f64 = StandardNormal.sample(&mut rng);
            readings.push(Reading {
                timestamp,
                depth_m: *depth,
                a_mm: x[layout.position_index(d, Axis::A)] + obs_sd[d] * na,
                b_mm: x[layout.position_index(d, Axis::B)] + obs_sd[d] * nb,
            });
        }
        states.push(x.clone());
    }

    let series = BoreholeSeries::new(
        spec.borehole_id.clone(),
        InstrumentSpec {
            kind: spec.kind,
            eps_m: spec.eps_m,
        },
        readings,
    )?;
    Ok(SyntheticSeries { series, states })
}

/// Adds `delta` mm to one reading: epoch `epoch` (0-based), depth index `depth`.
pub fn inject_spike(
    series: &mut BoreholeSeries,
    epoch: usize,
    depth: usize,
    axis: Axis,
    delta: f64,
) -> Result<()> {
    let n = series.depths().len();
    let target_depth = *series
        .depths()
        .get(depth)
        .ok_or_else(|| Error::InvalidParameter(format!("no depth index {depth}")))?;
    let mut times: Vec<DateTime<Utc>> = series.readings.iter().map(|r| r.timestamp).collect();
    times.dedup();
    let t = *times
        .get(epoch)
        .ok_or_else(|| Error::InvalidParameter(format!("no epoch {epoch} (of {})", times.len())))?;
    let reading = series
        .readings
        .iter_mut()
        .find(|r| r.timestamp == t && r.depth_m == target_depth)
        .ok_or_else(|| {
            Error::InvalidParameter(format!(
                "epoch {epoch} has no reading at depth {depth} of {n}"
            ))
        })?;
    match axis {
        Axis::A => reading.a_mm += delta,
        Axis::B => reading.b_mm += delta,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{remap, Observation};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn d1(v: f64) -> DVector<f64> {
        DVector::from_vec(vec![v])
    }

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_vec(1, 1, vec![v])
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(
            kl_gaussian(&d1(0.3), &m1(2.0), &d1(0.3), &m1(2.0)).unwrap(),
            0.0
        );
        assert_relative_eq!(
            kl_gaussian(&d1(0.0), &m1(1.0), &d1(1.0), &m1(1.0)).unwrap(),
            0.5,
            max_relative = 1e-10
        );
        assert_relative_eq!(
            kl_gaussian(&d1(0.0), &m1(4.0), &d1(0.0), &m1(1.0)).unwrap(),
            0.5 * (4.0 - 1.0 + (0.25f64).ln()),
            max_relative = 1e-10
        );
    }

    #[test]
    fn kl_rejects_indefinite() {
        assert!(matches!(
            kl_gaussian(&d1(0.0), &m1(-1.0), &d1(0.0), &m1(1.0)),
            Err(Error::SingularMetric)
        ));
    }

    fn grid_with_gaps(len: usize, gaps: &[usize]) -> GriddedObservations {
        let readings: Vec<(f64, Observation)> = (0..len)
            .filter(|i| !gaps.contains(i))
            .map(|i| {
                (
                    i as f64,
                    Observation::full(DVector::from_vec(vec![i as f64, 0.0])),
                )
            })
            .collect();
        remap(
            Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(),
            &readings,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn split_ninety_days() {
        let g = grid_with_gaps(90, &[]);
        let (train, val) = split_train_validation(&g, 30.0).unwrap();
        assert_eq!(train.len(), 60);
        assert_eq!(val.len(), 30);
        assert_eq!(val.first_index, 60);
    }

    #[test]
    fn split_needs_span() {
        let g = grid_with_gaps(30, &[]);
        assert!(matches!(
            split_train_validation(&g, 30.0),
            Err(Error::InsufficientData(_))
        ));
        assert!(split_train_validation(&g, 45.0).is_err());
    }

    #[test]
    fn split_at_gap_slot() {
        let g = grid_with_gaps(10, &[5, 6]);
        let (train, val) = split_train_validation(&g, 4.0).unwrap();
        assert_eq!(train.len(), 6);
        assert!(train.slots[5].is_none());
        assert_eq!(val.first_index, 6);
        assert!(val.slots[0].is_none());
        assert!(val.slots[1].is_some());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            steps: 50,
            seed: 11,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.series.readings, c.series.readings);
    }

    #[test]
    fn noise_free_synthetic_on_kinematic_line() {
        let spec = SyntheticSpec {
            sigma_true: 0.0,
            eps_m: 0.0,
            steps: 40,
            dt: 0.5,
            initial_velocity: 0.3,
            ..SyntheticSpec::default()
        };
        let s = generate_synthetic(&spec).unwrap().series;
        let epochs = s.epochs();
        for (k, (_, obs)) in epochs.iter().enumerate() {
            let t = k as f64 * 0.5;
            for d in 0..2 {
                assert_relative_eq!(obs.values()[2 * d], 0.3 * t, epsilon = 1e-12);
                assert_relative_eq!(obs.values()[2 * d + 1], 0.15 * t, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn increment_covariance_matches_template() {
        // law of large numbers on w_k = x_k - F x_{k-1}
        let spec = SyntheticSpec {
            depths: vec![2.0],
            sigma_true: 0.5,
            steps: 10_001,
            dt: 1.0,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let out = generate_synthetic(&spec).unwrap();
        let layout = StateLayout::new(spec.depths.clone()).unwrap();
        let f = build_transition(&layout, spec.dt).unwrap();
        let mut acc = DMatrix::zeros(4, 4);
        for w in out.states.windows(2) {
            let inc = &w[1] - &f * &w[0];
            acc += &inc * inc.transpose();
        }
        acc /= (out.states.len() - 1) as f64;
        let expected = build_lambda(&layout, spec.dt).unwrap() * spec.sigma_true;
        for i in 0..4 {
            for j in 0..4 {
                let e = expected[(i, j)];
                if e != 0.0 {
                    assert!(
                        (acc[(i, j)] - e).abs() <= 0.05 * e.abs(),
                        "entry ({i},{j}): {} vs {e}",
                        acc[(i, j)]
                    );
                } else {
                    // uncorrelated axes: off-block entries near zero relative to the diagonal
                    let scale = (expected[(i, i)] * expected[(j, j)]).sqrt();
                    assert!(acc[(i, j)].abs() <= 0.05 * scale);
                }
            }
        }
    }

    #[test]
    fn spike_injection_targets_one_reading() {
        let mut s = generate_synthetic(&SyntheticSpec {
            steps: 5,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .series;
        let before = s.clone();
        inject_spike(&mut s, 2, 1, Axis::B, 10.0).unwrap();
        let changed: Vec<usize> = (0..s.readings.len())
            .filter(|&i| s.readings[i] != before.readings[i])
            .collect();
        assert_eq!(changed, vec![2 * 2 + 1]);
        assert_eq!(s.readings[5].b_mm, before.readings[5].b_mm + 10.0);
        assert!(inject_spike(&mut s, 9, 0, Axis::A, 1.0).is_err());
    }

    #[test]
    fn average_metric_is_mean() {
        assert_eq!(average_metric(&[vec![1.0, 2.0], vec![3.0, 6.0]]), 3.0);
        assert_eq!(average_metric(&[]), 0.0);
    }

    fn spd(seed: &[f64], dim: usize) -> DMatrix<f64> {
        let a = DMatrix::from_row_slice(dim, dim, &seed[..dim * dim]);
        &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
    }

    proptest! {
        #[test]
        fn kl_non_negative_and_zero_on_self(
            a in proptest::collection::vec(-1.0f64..1.0, 16),
            b in proptest::collection::vec(-1.0f64..1.0, 16),
            m in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let sp = spd(&a, 4);
            let sq = spd(&b, 4);
            let mp = DVector::from_vec(m.clone());
            let mq = DVector::from_vec(m.iter().map(|v| v * 0.5).collect());
            prop_assert!(kl_gaussian(&mp, &sp, &mq, &sq).unwrap() >= 0.0);
            prop_assert!(kl_gaussian(&mp, &sp, &mp, &sp).unwrap() <= 1e-10);
        }
    }
}
