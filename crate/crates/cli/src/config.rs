//! Run configuration: a TOML file, then command-line overrides, validated
//! before any input is read.

use std::collections::BTreeMap;
use std::path::Path;

use inclino_core::anomaly::DEFAULT_GAMMA;
use inclino_core::dataset::InstrumentOverride;
use inclino_core::filter::{
    DEFAULT_EM_MAX_ITERS, DEFAULT_EM_TOL, DEFAULT_WINDOW, MIN_WINDOW_OBSERVATIONS,
};
use inclino_core::forecast::DEFAULT_HORIZON_DAYS;
use inclino_core::grid::DtBounds;
use inclino_core::validation::SyntheticSpec;
use inclino_core::{
    EmConfig, GateConfig, GateMode, InstrumentCatalog, InstrumentKind, KlMarginal, PipelineConfig,
    ValidationConfig,
};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoreholeConfig {
    pub eps_m: Option<f64>,
    pub instrument_kind: Option<InstrumentKind>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub boreholes: usize,
    pub id_prefix: String,
    pub depths: Vec<f64>,
    pub steps: usize,
    pub dt: f64,
    pub sigma_true: f64,
    /// Observation noise coefficient; zero gives exact readings.
    pub eps_m: f64,
    pub initial_velocity: f64,
    pub start: String,
    pub instrument_kind: InstrumentKind,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            boreholes: 1,
            id_prefix: "SYN".into(),
            depths: s.depths,
            steps: s.steps,
            dt: s.dt,
            sigma_true: s.sigma_true,
            eps_m: s.eps_m,
            initial_velocity: s.initial_velocity,
            start: "2020-01-01T00:00:00Z".into(),
            instrument_kind: s.kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Grid spacing in days; chosen from the data when absent.
    pub dt_override: Option<f64>,
    pub gamma: f64,
    pub gating_enabled: bool,
    pub gate_mode: GateMode,
    pub window: usize,
    pub forecast_horizon: f64,
    pub forecast_dt: Option<f64>,
    pub em_tol: f64,
    pub em_max_iters: usize,
    pub kl_marginal: KlMarginal,
    pub instrument_kind: InstrumentKind,
    /// Default instrument error coefficient (mm/m).
    pub eps_m: Option<f64>,
    pub seed: u64,
    pub boreholes: BTreeMap<String, BoreholeConfig>,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dt_override: None,
            gamma: DEFAULT_GAMMA,
            gating_enabled: true,
            gate_mode: GateMode::Joint,
            window: DEFAULT_WINDOW,
            forecast_horizon: DEFAULT_HORIZON_DAYS,
            forecast_dt: None,
            em_tol: DEFAULT_EM_TOL,
            em_max_iters: DEFAULT_EM_MAX_ITERS,
            kl_marginal: KlMarginal::Full4d,
            instrument_kind: InstrumentKind::default(),
            eps_m: None,
            seed: 0,
            boreholes: BTreeMap::new(),
            simulate: SimulateConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

fn non_negative(name: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{name} must be non-negative, got {v}"
        )))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(dt) = self.dt_override {
            positive("dt_override", dt)?;
        }
        positive("gamma", self.gamma)?;
        if self.window < MIN_WINDOW_OBSERVATIONS {
            return Err(CliError::Config(format!(
                "window must be at least {MIN_WINDOW_OBSERVATIONS}, got {}",
                self.window
            )));
        }
        positive("forecast_horizon", self.forecast_horizon)?;
        if let Some(dt) = self.forecast_dt {
            positive("forecast_dt", dt)?;
        }
        positive("em_tol", self.em_tol)?;
        if self.em_max_iters == 0 {
            return Err(CliError::Config("em_max_iters must be at least 1".into()));
        }
        if let Some(eps) = self.eps_m {
            positive("eps_m", eps)?;
        }
        for (id, b) in &self.boreholes {
            if let Some(eps) = b.eps_m {
                positive(&format!("boreholes.{id}.eps_m"), eps)?;
            }
        }
        let s = &self.simulate;
        if s.boreholes == 0 {
            return Err(CliError::Config(
                "simulate.boreholes must be at least 1".into(),
            ));
        }
        if s.steps < 2 {
            return Err(CliError::Config("simulate.steps must be at least 2".into()));
        }
        if s.depths.is_empty() {
            return Err(CliError::Config("simulate.depths is empty".into()));
        }
        for d in &s.depths {
            positive("simulate.depths", *d)?;
        }
        positive("simulate.dt", s.dt)?;
        non_negative("simulate.sigma_true", s.sigma_true)?;
        non_negative("simulate.eps_m", s.eps_m)?;
        if !s.initial_velocity.is_finite() {
            return Err(CliError::Config(
                "simulate.initial_velocity must be finite".into(),
            ));
        }
        chrono::DateTime::parse_from_rfc3339(&s.start)
            .map_err(|e| CliError::Config(format!("simulate.start {:?}: {e}", s.start)))?;
        Ok(())
    }

    pub fn gate(&self) -> Option<GateConfig> {
        self.gating_enabled.then_some(GateConfig {
            gamma: self.gamma,
            mode: self.gate_mode,
        })
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            dt_override: self.dt_override,
            dt_bounds: DtBounds::default(),
            em: EmConfig {
                window: self.window,
                tol: self.em_tol,
                max_iters: self.em_max_iters,
                gate: self.gate(),
            },
        }
    }

    pub fn validation(&self) -> ValidationConfig {
        ValidationConfig {
            pipeline: self.pipeline(),
            horizon: self.forecast_horizon,
            marginal: self.kl_marginal,
        }
    }

    pub fn catalog(&self) -> InstrumentCatalog {
        InstrumentCatalog {
            default_kind: self.instrument_kind,
            default_eps_m: self.eps_m,
            boreholes: self
                .boreholes
                .iter()
                .map(|(id, b)| {
                    (
                        id.clone(),
                        InstrumentOverride {
                            kind: b.instrument_kind,
                            eps_m: b.eps_m,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Generator settings for the `index`-th simulated borehole.
    pub fn synthetic_spec(&self, index: usize) -> SyntheticSpec {
        let s = &self.simulate;
        SyntheticSpec {
            borehole_id: format!("{}{:02}", s.id_prefix, index + 1),
            kind: s.instrument_kind,
            depths: s.depths.clone(),
            sigma_true: s.sigma_true,
            eps_m: s.eps_m,
            dt: s.dt,
            steps: s.steps,
            seed: self.seed.wrapping_add(index as u64),
            initial_velocity: s.initial_velocity,
            start: chrono::DateTime::parse_from_rfc3339(&s.start)
                .map(|t| t.with_timezone(&chrono::Utc))
                .unwrap_or(SyntheticSpec::default().start),
        }
    }
}
