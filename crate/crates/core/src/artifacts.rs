//! JSON and CSV artifacts written per borehole as `{borehole_id}.{artifact}.{ext}`.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::anomaly::{GateConfig, GateDecision, GateMode};
use crate::dataset::{format_timestamp, InstrumentKind};
use crate::error::{Error, Result};
use crate::forecast::{ForecastBundle, PredictiveObservation};
use crate::grid::{days_to_duration, Observation};
use crate::model::{Axis, StateGaussian, StateLayout};
use crate::pipeline::SmoothOutcome;
use crate::validation::ValidationReport;

/// Row-major lower triangle of a symmetric matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedCovariance {
    pub dim: usize,
    pub lower: Vec<f64>,
}

impl PackedCovariance {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let dim = m.nrows();
        let mut lower = Vec::with_capacity(dim * (dim + 1) / 2);
        for i in 0..dim {
            for j in 0..=i {
                lower.push(m[(i, j)]);
            }
        }
        Self { dim, lower }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.lower.len() != self.dim * (self.dim + 1) / 2 {
            return Err(Error::Serialization(format!(
                "packed covariance of dimension {} has {} entries",
                self.dim,
                self.lower.len()
            )));
        }
        let mut m = DMatrix::zeros(self.dim, self.dim);
        let mut it = self.lower.iter();
        for i in 0..self.dim {
            for j in 0..=i {
                let v = *it.next().unwrap();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub grid_index: usize,
    pub time: String,
    pub mean: Vec<f64>,
    pub covariance: PackedCovariance,
}

impl StateRecord {
    fn new(state: &StateGaussian, time: DateTime<Utc>) -> Self {
        Self {
            grid_index: state.grid_index,
            time: format_timestamp(time),
            mean: state.mean.as_slice().to_vec(),
            covariance: PackedCovariance::from_matrix(&state.covariance),
        }
    }

    pub fn to_state(&self) -> Result<StateGaussian> {
        StateGaussian::new(
            DVector::from_vec(self.mean.clone()),
            self.covariance.to_matrix()?,
            self.grid_index,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedArtifact {
    pub borehole_id: String,
    pub instrument_kind: InstrumentKind,
    pub eps_m: f64,
    pub depths: Vec<f64>,
    pub dt: f64,
    pub origin_time: String,
    pub em_iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
    pub log_likelihood_history: Vec<f64>,
    pub q: PackedCovariance,
    pub sigma_alpha: f64,
    pub raw_sigma_alpha: f64,
    pub template_residual: f64,
    pub n_rejected: usize,
    pub states: Vec<StateRecord>,
}

impl SmoothedArtifact {
    pub fn new(borehole_id: &str, kind: InstrumentKind, outcome: &SmoothOutcome) -> Self {
        let grid = &outcome.result.grid;
        Self {
            borehole_id: borehole_id.to_owned(),
            instrument_kind: kind,
            eps_m: outcome.eps_m,
            depths: outcome.layout.depths().to_vec(),
            dt: grid.dt,
            origin_time: format_timestamp(grid.origin_time),
            em_iterations: outcome.result.em_iterations,
            converged: outcome.result.converged,
            log_likelihood: outcome.result.log_likelihood,
            log_likelihood_history: outcome
                .result
                .history
                .iter()
                .map(|h| h.log_likelihood)
                .collect(),
            q: PackedCovariance::from_matrix(&outcome.result.q),
            sigma_alpha: outcome.fit.sigma_alpha,
            raw_sigma_alpha: outcome.fit.raw_sigma_alpha,
            template_residual: outcome.fit.residual_norm,
            n_rejected: outcome.result.trace.rejected_count(),
            states: outcome
                .result
                .smoothed
                .iter()
                .map(|s| StateRecord::new(s, grid.time_of_index(s.grid_index as f64)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastStepRecord {
    pub step: usize,
    pub lead_days: f64,
    pub time: String,
    pub mean: Vec<f64>,
    pub covariance: PackedCovariance,
    pub observation_mean: Vec<f64>,
    pub observation_covariance: PackedCovariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastArtifact {
    pub borehole_id: String,
    pub depths: Vec<f64>,
    pub start_index: usize,
    pub start_offset_days: f64,
    pub start_time: String,
    pub horizon: f64,
    pub dt_forecast: f64,
    pub sigma_alpha: f64,
    pub steps: Vec<ForecastStepRecord>,
}

impl ForecastArtifact {
    pub fn new(
        borehole_id: &str,
        layout: &StateLayout,
        origin: DateTime<Utc>,
        bundle: &ForecastBundle,
    ) -> Self {
        let start = origin + days_to_duration(bundle.start_offset_days);
        let steps = bundle
            .states
            .iter()
            .zip(&bundle.predictive_obs)
            .enumerate()
            .map(|(j, (state, obs))| {
                let lead = bundle.lead_days(j);
                ForecastStepRecord {
                    step: state.grid_index,
                    lead_days: lead,
                    time: format_timestamp(start + days_to_duration(lead)),
                    mean: state.mean.as_slice().to_vec(),
                    covariance: PackedCovariance::from_matrix(&state.covariance),
                    observation_mean: obs.mean.as_slice().to_vec(),
                    observation_covariance: PackedCovariance::from_matrix(&obs.covariance),
                }
            })
            .collect();
        Self {
            borehole_id: borehole_id.to_owned(),
            depths: layout.depths().to_vec(),
            start_index: bundle.start_index,
            start_offset_days: bundle.start_offset_days,
            start_time: format_timestamp(start),
            horizon: bundle.horizon,
            dt_forecast: bundle.dt_forecast,
            sigma_alpha: bundle.sigma_alpha,
            steps,
        }
    }

    pub fn to_bundle(&self) -> Result<ForecastBundle> {
        let mut states = Vec::with_capacity(self.steps.len());
        let mut predictive_obs = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            states.push(StateGaussian::new(
                DVector::from_vec(s.mean.clone()),
                s.covariance.to_matrix()?,
                s.step,
            )?);
            predictive_obs.push(PredictiveObservation {
                mean: DVector::from_vec(s.observation_mean.clone()),
                covariance: s.observation_covariance.to_matrix()?,
            });
        }
        Ok(ForecastBundle {
            start_index: self.start_index,
            start_offset_days: self.start_offset_days,
            states,
            predictive_obs,
            horizon: self.horizon,
            dt_forecast: self.dt_forecast,
            sigma_alpha: self.sigma_alpha,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub grid_index: usize,
    pub time: String,
    pub depth: Option<usize>,
    pub distance: f64,
    pub threshold: f64,
    pub accepted: bool,
    pub tail_probability: f64,
    pub rows: Vec<usize>,
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl DecisionRecord {
    pub fn to_decision(&self) -> Result<GateDecision> {
        Ok(GateDecision {
            grid_index: self.grid_index,
            depth: self.depth,
            distance: self.distance,
            threshold: self.threshold,
            accepted: self.accepted,
            tail_probability: self.tail_probability,
            rows: self.rows.clone(),
            observation: Observation::masked(
                DVector::from_vec(self.values.clone()),
                self.observed.clone(),
            )?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub borehole_id: String,
    pub gating_enabled: bool,
    pub gamma: Option<f64>,
    pub mode: Option<GateMode>,
    pub n_decisions: usize,
    pub n_rejected: usize,
    pub decisions: Vec<DecisionRecord>,
}

impl AnomalyReport {
    pub fn new(borehole_id: &str, gate: Option<&GateConfig>, outcome: &SmoothOutcome) -> Self {
        let grid = &outcome.result.grid;
        let decisions: Vec<DecisionRecord> = outcome
            .result
            .decisions()
            .map(|d| DecisionRecord {
                grid_index: d.grid_index,
                time: format_timestamp(grid.time_of_index(d.grid_index as f64)),
                depth: d.depth,
                distance: d.distance,
                threshold: d.threshold,
                accepted: d.accepted,
                tail_probability: d.tail_probability,
                rows: d.rows.clone(),
                values: d.observation.values().as_slice().to_vec(),
                observed: d.observation.observed().to_vec(),
            })
            .collect();
        Self {
            borehole_id: borehole_id.to_owned(),
            gating_enabled: gate.is_some(),
            gamma: gate.map(|g| g.gamma),
            mode: gate.map(|g| g.mode),
            n_decisions: decisions.len(),
            n_rejected: decisions.iter().filter(|d| !d.accepted).count(),
            decisions,
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn from_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_json(&bytes)
}

pub fn artifact_name(borehole_id: &str, artifact: &str, ext: &str) -> String {
    format!("{borehole_id}.{artifact}.{ext}")
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(ser)?;
    for row in rows {
        w.write_record(row).map_err(ser)?;
    }
    w.into_inner()
        .map_err(|e| Error::Serialization(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per grid step and depth: smoothed positions with 1-sigma widths
/// and the raw readings (blank at gaps).
pub fn smoothed_csv(outcome: &SmoothOutcome) -> Result<Vec<u8>> {
    let layout = &outcome.layout;
    let grid = &outcome.result.grid;
    let mut rows = Vec::new();
    for (pos, state) in outcome.result.smoothed.iter().enumerate() {
        let obs = grid.slot_observation(pos);
        let time = format_timestamp(grid.time_of_index(state.grid_index as f64));
        for (d, depth) in layout.depths().iter().enumerate() {
            let mut row = vec![
                state.grid_index.to_string(),
                time.clone(),
                depth.to_string(),
            ];
            for axis in [Axis::A, Axis::B] {
                let i = layout.position_index(d, axis);
                let v = layout.velocity_index(d, axis);
                let raw = obs.filter(|o| o.observed()[i]).map(|o| o.values()[i]);
                row.extend([
                    state.mean[i].to_string(),
                    state.covariance[(i, i)].max(0.0).sqrt().to_string(),
                    state.mean[v].to_string(),
                    opt(raw),
                ]);
            }
            rows.push(row);
        }
    }
    csv_bytes(
        &[
            "grid_index",
            "time",
            "depth_m",
            "a_mm",
            "a_sd_mm",
            "a_velocity_mm_per_day",
            "a_observed_mm",
            "b_mm",
            "b_sd_mm",
            "b_velocity_mm_per_day",
            "b_observed_mm",
        ],
        rows,
    )
}

/// One row per forecast step and depth with 1-sigma and 2-sigma predictive bands.
pub fn forecast_csv(artifact: &ForecastArtifact, bundle: &ForecastBundle) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for (j, (step, pred)) in artifact
        .steps
        .iter()
        .zip(&bundle.predictive_obs)
        .enumerate()
    {
        for (d, depth) in artifact.depths.iter().enumerate() {
            let mut row = vec![
                (j + 1).to_string(),
                step.lead_days.to_string(),
                step.time.clone(),
                depth.to_string(),
            ];
            for r in [2 * d, 2 * d + 1] {
                let m = pred.mean[r];
                let s = pred.std_dev(r);
                row.extend(
                    [m, s, m - s, m + s, m - 2.0 * s, m + 2.0 * s]
                        .iter()
                        .map(f64::to_string),
                );
            }
            rows.push(row);
        }
    }
    csv_bytes(
        &[
            "step",
            "lead_days",
            "time",
            "depth_m",
            "a_mean_mm",
            "a_sd_mm",
            "a_lo1_mm",
            "a_hi1_mm",
            "a_lo2_mm",
            "a_hi2_mm",
            "b_mean_mm",
            "b_sd_mm",
            "b_lo1_mm",
            "b_hi1_mm",
            "b_lo2_mm",
            "b_hi2_mm",
        ],
        rows,
    )
}

/// Rejected decisions only, as plot markers.
pub fn anomalies_csv(report: &AnomalyReport) -> Result<Vec<u8>> {
    let rows = report.decisions.iter().filter(|d| !d.accepted).map(|d| {
        vec![
            d.grid_index.to_string(),
            d.time.clone(),
            d.depth
                .map(|v| v.to_string())
                .unwrap_or_else(|| "all".into()),
            d.distance.to_string(),
            d.threshold.to_string(),
            d.tail_probability.to_string(),
        ]
    });
    csv_bytes(
        &[
            "grid_index",
            "time",
            "depth_index",
            "distance",
            "threshold",
            "tail_probability",
        ],
        rows,
    )
}

pub fn validation_summary_csv(reports: &[ValidationReport]) -> Result<Vec<u8>> {
    let rows = reports.iter().map(|r| {
        vec![
            r.borehole_id.clone(),
            r.instrument_kind.as_str().to_owned(),
            r.metric_value.to_string(),
            r.anomalies_removed.to_string(),
            r.anomalies_removed_full.to_string(),
            r.n_forecast_steps.to_string(),
            r.sigma_alpha.to_string(),
        ]
    });
    csv_bytes(
        &[
            "borehole_id",
            "instrument_kind",
            "metric",
            "anomalies_removed",
            "anomalies_removed_full",
            "forecast_steps",
            "sigma_alpha",
        ],
        rows,
    )
}

/// A file ready to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingFile {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl PendingFile {
    pub fn new(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            bytes,
        }
    }
}

/// Writes through a temporary file in `dir` and renames on success.
pub fn write_atomic(dir: &Path, file: &PendingFile) -> Result<PathBuf> {
    let path = dir.join(&file.name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&file.bytes)
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
    Ok(path)
}

pub fn write_all(dir: &Path, files: &[PendingFile]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    files.iter().map(|f| write_atomic(dir, f)).collect()
}
