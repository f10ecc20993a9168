//! Per-borehole processing chain: grid, gated EM smoothing, kinematic fit
//! and forecasting.

use crate::dataset::BoreholeSeries;
use crate::error::Result;
use crate::filter::{
    diffuse_prior, em_learn_q, initial_process_covariance, EmConfig, SmootherResult,
};
use crate::forecast::{
    build_lambda, fit_sigma_alpha, forecast_states, ForecastBundle, KinematicNoiseFit,
};
use crate::grid::{remap, select_dt, DtBounds, GriddedObservations};
use crate::model::{ModelMatrices, StateLayout};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    /// Fixed grid spacing in days; chosen from the data when `None`.
    pub dt_override: Option<f64>,
    pub dt_bounds: DtBounds,
    pub em: EmConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GriddedSeries {
    pub layout: StateLayout,
    pub grid: GriddedObservations,
    pub eps_m: f64,
}

pub fn grid_series(series: &BoreholeSeries, config: &PipelineConfig) -> Result<GriddedSeries> {
    let readings = series.epoch_offsets();
    let times: Vec<f64> = readings.iter().map(|(t, _)| *t).collect();
    let dt = match config.dt_override {
        Some(dt) => dt,
        None => select_dt(&times, config.dt_bounds)?,
    };
    let grid = remap(series.first_timestamp(), &readings, dt)?;
    Ok(GriddedSeries {
        layout: series.layout(),
        grid,
        eps_m: series.eps_m,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothOutcome {
    pub layout: StateLayout,
    pub eps_m: f64,
    /// Model with the learned `Q`.
    pub model: ModelMatrices,
    pub result: SmootherResult,
    pub fit: KinematicNoiseFit,
}

impl SmoothOutcome {
    pub fn forecast(&self, dt_forecast: Option<f64>, horizon: f64) -> Result<ForecastBundle> {
        forecast_states(
            self.result.last_state(),
            &self.layout,
            &self.fit,
            dt_forecast.unwrap_or(self.model.dt),
            horizon,
            &self.model,
        )
    }
}

/// EM smoothing of the last `em.window` steps of `grid`.
pub fn smooth_grid(
    layout: &StateLayout,
    grid: &GriddedObservations,
    eps_m: f64,
    em: &EmConfig,
) -> Result<SmoothOutcome> {
    em.validate()?;
    let start_model = ModelMatrices::kinematic(
        layout,
        grid.dt,
        eps_m,
        nalgebra::DMatrix::zeros(layout.dim_state(), layout.dim_state()),
    )?;
    let q0 = initial_process_covariance(layout, grid.dt, &start_model.r)?;
    let start_model = start_model.with_q(q0);
    let prior = diffuse_prior(layout, &grid.tail(em.window), eps_m)?;
    let result = em_learn_q(grid, &start_model, &prior, em)?;
    let fit = fit_sigma_alpha(&result.q, &build_lambda(layout, grid.dt)?, grid.dt)?;
    Ok(SmoothOutcome {
        layout: layout.clone(),
        eps_m,
        model: start_model.with_q(result.q.clone()),
        result,
        fit,
    })
}

pub fn smooth_series(series: &BoreholeSeries, config: &PipelineConfig) -> Result<SmoothOutcome> {
    let g = grid_series(series, config)?;
    smooth_grid(&g.layout, &g.grid, g.eps_m, &config.em)
}
