//! Latent state layout and the kinematic linear-Gaussian model matrices.
//!
//! The state for a borehole with `n` depths has `4n` entries: all positions
//! first, then all velocities, each interleaved A,B per depth:
//!
//! ```text
//! [q1_A, q1_B, ..., qn_A, qn_B, p1_A, p1_B, ..., pn_A, pn_B]
//! ```
//!
//! Positions are in millimetres, velocities in millimetres per day and time
//! in fractional days.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Measurement axis of an inclinometer reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    A,
    B,
}

impl Axis {
    pub const BOTH: [Axis; 2] = [Axis::A, Axis::B];

    pub fn offset(self) -> usize {
        match self {
            Axis::A => 0,
            Axis::B => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    depths: Vec<f64>,
}

impl StateLayout {
    /// Depths in metres; must be non-empty, positive and strictly increasing.
    pub fn new(depths: Vec<f64>) -> Result<Self> {
        if depths.is_empty() {
            return Err(Error::InvalidParameter(
                "layout needs at least one depth".into(),
            ));
        }
        if depths.iter().any(|d| !d.is_finite() || *d <= 0.0) {
            return Err(Error::InvalidParameter(
                "depths must be finite and positive".into(),
            ));
        }
        if depths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "depths must be strictly increasing".into(),
            ));
        }
        Ok(Self { depths })
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn n_depths(&self) -> usize {
        self.depths.len()
    }

    pub fn dim_state(&self) -> usize {
        4 * self.depths.len()
    }

    pub fn dim_obs(&self) -> usize {
        2 * self.depths.len()
    }

    pub fn position_index(&self, depth: usize, axis: Axis) -> usize {
        2 * depth + axis.offset()
    }

    pub fn velocity_index(&self, depth: usize, axis: Axis) -> usize {
        self.dim_obs() + 2 * depth + axis.offset()
    }

    /// State indices `(q_A, q_B, p_A, p_B)` belonging to one depth.
    pub fn depth_block(&self, depth: usize) -> [usize; 4] {
        [
            self.position_index(depth, Axis::A),
            self.position_index(depth, Axis::B),
            self.velocity_index(depth, Axis::A),
            self.velocity_index(depth, Axis::B),
        ]
    }
}

/// Mean and covariance of the latent state at one grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub grid_index: usize,
}

impl StateGaussian {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, grid_index: usize) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean has {} entries but covariance is {}x{}",
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        Ok(Self {
            mean,
            covariance,
            grid_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal over the given state indices.
    pub fn marginal(&self, indices: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
        let mean = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.mean[i]));
        let cov = DMatrix::from_fn(indices.len(), indices.len(), |r, c| {
            self.covariance[(indices[r], indices[c])]
        });
        (mean, cov)
    }
}

/// Transition, observation and noise matrices for one grid spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrices {
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub dt: f64,
}

impl ModelMatrices {
    /// Kinematic model for `layout` at spacing `dt` with instrument error
    /// `eps_m` (mm per metre of depth) and process covariance `q`.
    pub fn kinematic(layout: &StateLayout, dt: f64, eps_m: f64, q: DMatrix<f64>) -> Result<Self> {
        let dim = layout.dim_state();
        if q.nrows() != dim || q.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "process covariance must be {dim}x{dim}, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        Ok(Self {
            f: build_transition(layout, dt)?,
            h: build_observation(layout),
            r: build_observation_covariance(layout, eps_m)?,
            q,
            dt,
        })
    }

    pub fn with_q(&self, q: DMatrix<f64>) -> Self {
        Self { q, ..self.clone() }
    }

    pub fn dim_state(&self) -> usize {
        self.f.nrows()
    }

    pub fn dim_obs(&self) -> usize {
        self.h.nrows()
    }
}

/// `F = [[I, dt*I], [0, I]]` over the position/velocity partition.
pub fn build_transition(layout: &StateLayout, dt: f64) -> Result<DMatrix<f64>> {
    if !dt.is_finite() || dt < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "transition timestep must be finite and non-negative, got {dt}"
        )));
    }
    let half = layout.dim_obs();
    let mut f = DMatrix::identity(layout.dim_state(), layout.dim_state());
    for i in 0..half {
        f[(i, i + half)] = dt;
    }
    Ok(f)
}

/// `H = [I | 0]`: observations are the positions.
pub fn build_observation(layout: &StateLayout) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(layout.dim_obs(), layout.dim_state());
    for i in 0..layout.dim_obs() {
        h[(i, i)] = 1.0;
    }
    h
}

/// Diagonal `R` with `(eps_m * depth)^2` on both axes of each depth.
pub fn build_observation_covariance(layout: &StateLayout, eps_m: f64) -> Result<DMatrix<f64>> {
    if !eps_m.is_finite() || eps_m <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "instrument error eps_m must be positive, got {eps_m}"
        )));
    }
    let diag = DVector::from_iterator(
        layout.dim_obs(),
        layout.depths().iter().flat_map(|d| {
            let v = (eps_m * d).powi(2);
            [v, v]
        }),
    );
    Ok(DMatrix::from_diagonal(&diag))
}

/// `(m + m^T) / 2`
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric to `1e-10` relative and smallest eigenvalue `>= -1e-9 * trace`.
pub fn is_symmetric_psd(m: &DMatrix<f64>) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return false;
    }
    let trace = m.trace().abs();
    let eig = symmetrize(m).symmetric_eigenvalues();
    eig.iter().all(|&l| l >= -1e-9 * trace.max(scale))
}

/// Adds `1e-12 * trace / dim` to the diagonal.
pub(crate) fn regularized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = m.nrows().max(1) as f64;
    let jitter = 1e-12 * m.trace().abs() / dim;
    let mut out = symmetrize(m);
    for i in 0..out.nrows() {
        out[(i, i)] += jitter;
    }
    out
}
