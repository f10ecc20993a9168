//! Remapping of irregularly sampled readings onto a regular time grid.
//!
//! Each reading is moved to the nearest grid index; its values are never
//! interpolated or altered. Indices with no reading become gaps.

use chrono::{DateTime, Duration, Utc};
use log::warn;
use nalgebra::DVector;

use crate::error::{Error, Result};

/// One observation vector with a per-row presence mask.
///
/// Rows are ordered like the position block of the state (A,B per depth).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    values: DVector<f64>,
    observed: Vec<bool>,
}

impl Observation {
    pub fn full(values: DVector<f64>) -> Self {
        let observed = vec![true; values.len()];
        Self { values, observed }
    }

    /// Rows with `observed[i] == false` are ignored; their value is kept as given.
    pub fn masked(values: DVector<f64>, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} rows, values have {}",
                observed.len(),
                values.len()
            )));
        }
        Ok(Self { values, observed })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    pub fn observed_rows(&self) -> Vec<usize> {
        self.observed
            .iter()
            .enumerate()
            .filter_map(|(i, &o)| o.then_some(i))
            .collect()
    }

    pub fn any_observed(&self) -> bool {
        self.observed.iter().any(|&o| o)
    }

    /// Copy with the listed rows marked unobserved.
    pub fn without_rows(&self, rows: &[usize]) -> Self {
        let mut out = self.clone();
        for &r in rows {
            out.observed[r] = false;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSlot {
    pub observation: Observation,
    /// Original reading time in days after the grid origin.
    pub source_offset_days: f64,
}

/// Two readings landed on the same index; the later one was kept.
#[derive(Debug, Clone, PartialEq)]
pub struct Collision {
    pub grid_index: usize,
    pub kept_offset_days: f64,
    pub dropped_offset_days: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GriddedObservations {
    pub dt: f64,
    /// Timestamp of grid index 0.
    pub origin_time: DateTime<Utc>,
    /// Grid index of `slots[0]`.
    pub first_index: usize,
    /// `None` marks a gap.
    pub slots: Vec<Option<GridSlot>>,
    pub collisions: Vec<Collision>,
}

impl GriddedObservations {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Grid index of the last slot.
    pub fn last_index(&self) -> usize {
        self.first_index + self.slots.len().saturating_sub(1)
    }

    pub fn filled_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn slot_observation(&self, position: usize) -> Option<&Observation> {
        self.slots[position].as_ref().map(|s| &s.observation)
    }

    /// Days after the origin at grid index `index`.
    pub fn offset_days(&self, index: usize) -> f64 {
        index as f64 * self.dt
    }

    pub fn time_of_index(&self, index: f64) -> DateTime<Utc> {
        self.origin_time + days_to_duration(index * self.dt)
    }

    /// Sub-grid of slot positions `start..end`, keeping absolute indices.
    pub fn range(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.slots.len());
        let start = start.min(end);
        let lo = self.first_index + start;
        let hi = self.first_index + end;
        Self {
            dt: self.dt,
            origin_time: self.origin_time,
            first_index: lo,
            slots: self.slots[start..end].to_vec(),
            collisions: self
                .collisions
                .iter()
                .filter(|c| c.grid_index >= lo && c.grid_index < hi)
                .cloned()
                .collect(),
        }
    }

    /// The last `window` slots.
    pub fn tail(&self, window: usize) -> Self {
        let start = self.slots.len().saturating_sub(window);
        self.range(start, self.slots.len())
    }
}

/// Clamp range applied to the automatically chosen grid spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtBounds {
    pub floor: f64,
    pub ceiling: f64,
}

impl Default for DtBounds {
    fn default() -> Self {
        Self {
            floor: 1.0 / 24.0,
            ceiling: 7.0,
        }
    }
}

/// Smallest positive consecutive gap, clamped to `bounds`.
pub fn select_dt(times_days: &[f64], bounds: DtBounds) -> Result<f64> {
    if !(bounds.floor > 0.0 && bounds.floor <= bounds.ceiling && bounds.ceiling.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "invalid grid spacing bounds [{}, {}]",
            bounds.floor, bounds.ceiling
        )));
    }
    let min_gap = times_days
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|g| *g > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !min_gap.is_finite() {
        return Err(Error::InsufficientData(
            "grid spacing needs at least two distinct timestamps".into(),
        ));
    }
    Ok(min_gap.clamp(bounds.floor, bounds.ceiling))
}

/// Assigns each reading (days after `origin_time`) to its nearest grid index.
pub fn remap(
    origin_time: DateTime<Utc>,
    readings: &[(f64, Observation)],
    dt: f64,
) -> Result<GriddedObservations> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "grid spacing must be positive, got {dt}"
        )));
    }
    if readings.is_empty() {
        return Err(Error::InsufficientData("no readings to grid".into()));
    }
    if readings.iter().any(|(t, _)| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidParameter(
            "reading offsets must be finite and not before the origin".into(),
        ));
    }
    if readings.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::InvalidParameter(
            "readings must be sorted by time".into(),
        ));
    }

    let nearest = |t: f64| (t / dt).round() as usize;
    let last = nearest(readings[readings.len() - 1].0);
    let mut slots: Vec<Option<GridSlot>> = vec![None; last + 1];
    let mut collisions = Vec::new();
    for (t, obs) in readings {
        let j = nearest(*t);
        let slot = GridSlot {
            observation: obs.clone(),
            source_offset_days: *t,
        };
        if let Some(previous) = slots[j].replace(slot) {
            warn!(
                "grid index {j}: reading at day {t} replaces reading at day {}",
                previous.source_offset_days
            );
            collisions.push(Collision {
                grid_index: j,
                kept_offset_days: *t,
                dropped_offset_days: previous.source_offset_days,
            });
        }
    }

    Ok(GriddedObservations {
        dt,
        origin_time,
        first_index: 0,
        slots,
        collisions,
    })
}

pub fn days_between(from: DateTime<Utc>, to: DateTime<Utc>) -> f64 {
    let d = to - from;
    match d.num_microseconds() {
        Some(us) => us as f64 / 86_400_000_000.0,
        None => d.num_seconds() as f64 / 86_400.0,
    }
}

pub fn days_to_duration(days: f64) -> Duration {
    Duration::microseconds((days * 86_400_000_000.0).round() as i64)
}
