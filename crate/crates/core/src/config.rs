//! Run configuration: a flat `key = value` text format plus per-scenario
//! defaults, resolved into a fully validated run setup.
//!
//! Example file:
//!
//! ```text
//! # which case study and filter
//! scenario = double-integrator
//! controller = ue-bcbf
//! omega = 0.2
//!
//! estimator.lambda = 1.0
//! flow.horizon = 2.0
//! flow.delta = 0.1
//! bounds.kind = gronwall
//! filter.alpha = 5.0
//! ```
//!
//! Unset keys fall back to the scenario defaults listed in
//! [`SimConfig::resolve`]. Unknown keys are rejected rather than ignored so
//! typos cannot silently weaken a safety margin.

use crate::bounds::{estimate_rate_constant, BoundKind, BoundParams};
use crate::error::Error;
use crate::estimator::{ErrorBoundModel, EstimatorKind, ObserverParams};
use crate::filter::ControllerKind;
use crate::flow::FlowGrid;
use crate::systems::{
    make_double_integrator, make_planar_quadrotor_with_floor, ClassKappa, Scenario,
};
use crate::Result;
use nalgebra::DVector;
use std::path::Path;
use std::str::FromStr;

/// Samples drawn when the deviation rate constant is not overridden.
const RATE_SAMPLES: usize = 512;

/// Raw, partially specified run description.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub scenario: String,
    pub controller: ControllerKind,
    /// Disturbance frequency for the double integrator.
    pub omega: f64,
    /// Altitude floor for the quadrotor.
    pub z_min: f64,
    pub seed: u64,
    pub x0: Option<Vec<f64>>,
    pub t_final: Option<f64>,
    pub control_dt: Option<f64>,
    pub sim_substeps: Option<usize>,
    pub estimator_kind: Option<EstimatorKind>,
    pub lambda: Option<Vec<f64>>,
    pub flow_horizon: Option<f64>,
    pub flow_delta: Option<f64>,
    pub flow_substeps: Option<usize>,
    pub bounds_kind: Option<BoundKind>,
    pub rate_override: Option<f64>,
    pub alpha: Option<f64>,
    pub alpha_b: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            scenario: "double-integrator".into(),
            controller: ControllerKind::UeBcbf,
            omega: 0.2,
            z_min: 0.5,
            seed: 0,
            x0: None,
            t_final: None,
            control_dt: None,
            sim_substeps: None,
            estimator_kind: None,
            lambda: None,
            flow_horizon: None,
            flow_delta: None,
            flow_substeps: None,
            bounds_kind: None,
            rate_override: None,
            alpha: None,
            alpha_b: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
        })
        .collect()
}

impl SimConfig {
    /// Applies one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "scenario" => self.scenario = value.to_string(),
            "controller" => self.controller = ControllerKind::from_str(value)?,
            "omega" => self.omega = parse_num(key, value)?,
            "z_min" => self.z_min = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "x0" => self.x0 = Some(parse_list(key, value)?),
            "t_final" => self.t_final = Some(parse_num(key, value)?),
            "control_dt" => self.control_dt = Some(parse_num(key, value)?),
            "sim_substeps" => self.sim_substeps = Some(parse_num(key, value)?),
            "estimator.kind" => self.estimator_kind = Some(EstimatorKind::from_str(value)?),
            "estimator.lambda" => self.lambda = Some(parse_list(key, value)?),
            "flow.horizon" => self.flow_horizon = Some(parse_num(key, value)?),
            "flow.delta" => self.flow_delta = Some(parse_num(key, value)?),
            "flow.substeps" => self.flow_substeps = Some(parse_num(key, value)?),
            "bounds.kind" => self.bounds_kind = Some(BoundKind::from_str(value)?),
            "bounds.rate_override" => self.rate_override = Some(parse_num(key, value)?),
            "filter.alpha" => self.alpha = Some(parse_num(key, value)?),
            "filter.alpha_b" => self.alpha_b = Some(parse_num(key, value)?),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Validates everything and fills scenario defaults.
    pub fn resolve(&self) -> Result<RunSetup> {
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::Config(format!("omega must be nonnegative, got {}", self.omega)));
        }
        let (scenario, defaults) = match self.scenario.as_str() {
            "double-integrator" => (
                make_double_integrator(self.omega),
                Defaults {
                    flow_horizon: 2.0,
                    flow_delta: 0.1,
                    flow_substeps: 4,
                    lambda: 1.0,
                    bounds_kind: BoundKind::Gronwall,
                    alpha: 5.0,
                    alpha_b: 5.0,
                    t_final: 12.0,
                    control_dt: 0.01,
                    sim_substeps: 10,
                    x0: vec![-2.0, 0.0],
                },
            ),
            "quadrotor" => {
                if !(self.z_min.is_finite()) {
                    return Err(Error::Config(format!("z_min must be finite, got {}", self.z_min)));
                }
                (
                    make_planar_quadrotor_with_floor(self.z_min),
                    Defaults {
                        flow_horizon: 0.3,
                        flow_delta: 0.05,
                        flow_substeps: 4,
                        lambda: 10.0,
                        bounds_kind: BoundKind::LogNorm,
                        alpha: 5.0,
                        alpha_b: 5.0,
                        t_final: 10.0,
                        control_dt: 0.01,
                        sim_substeps: 10,
                        x0: vec![0.0, 3.0, 0.0, 0.0, 0.0, 0.0],
                    },
                )
            }
            other => return Err(Error::Config(format!("unknown scenario '{other}'"))),
        };
        let n = scenario.model.n;

        let controller = self.controller;
        let estimator_kind = self.estimator_kind.unwrap_or_else(|| controller.default_estimator());

        let lambda = match &self.lambda {
            Some(v) if v.len() == 1 => DVector::from_element(n, v[0]),
            Some(v) if v.len() == n => DVector::from_vec(v.clone()),
            Some(v) => {
                return Err(Error::Config(format!(
                    "estimator.lambda needs 1 or {n} entries, got {}",
                    v.len()
                )))
            }
            None => DVector::from_element(n, defaults.lambda),
        };
        let observer = ObserverParams::new(lambda.clone())?;

        let grid = FlowGrid::new(
            self.flow_horizon.unwrap_or(defaults.flow_horizon),
            self.flow_delta.unwrap_or(defaults.flow_delta),
        )?;
        let flow_substeps = self.flow_substeps.unwrap_or(defaults.flow_substeps);
        if flow_substeps == 0 {
            return Err(Error::Config("flow.substeps must be at least 1".into()));
        }

        let bounds_kind = self.bounds_kind.unwrap_or(defaults.bounds_kind);
        let rate = match self.rate_override {
            Some(r) if r.is_finite() => r,
            Some(r) => return Err(Error::Config(format!("bounds.rate_override not finite: {r}"))),
            None => estimate_rate_constant(
                &scenario.model,
                &scenario.backup,
                bounds_kind,
                RATE_SAMPLES,
            )?,
        };

        // An estimator that denies the disturbance also denies its drift;
        // the tightening collapses to zero and the filter degrades to the
        // nominal backup-flow method.
        let delta_v_eff = match estimator_kind {
            EstimatorKind::None => 0.0,
            _ => scenario.truth.delta_v,
        };
        let bound_params = BoundParams::new(
            bounds_kind,
            rate,
            delta_v_eff,
            scenario.barriers.lipschitz_h,
            scenario.barriers.lipschitz_hb,
        )?;

        let error_model = ErrorBoundModel::new(
            estimator_kind,
            observer.lambda_min,
            scenario.truth.delta_d,
            scenario.truth.delta_v,
        )?;

        let alpha = ClassKappa::new(self.alpha.unwrap_or(defaults.alpha))?;
        let alpha_b = ClassKappa::new(self.alpha_b.unwrap_or(defaults.alpha_b))?;

        let x0_vec = self.x0.clone().unwrap_or(defaults.x0);
        if x0_vec.len() != n {
            return Err(Error::Config(format!("x0 needs {n} entries, got {}", x0_vec.len())));
        }
        let x0 = DVector::from_vec(x0_vec);
        scenario.model.check_domain(&x0)?;

        let t_final = self.t_final.unwrap_or(defaults.t_final);
        let control_dt = self.control_dt.unwrap_or(defaults.control_dt);
        let sim_substeps = self.sim_substeps.unwrap_or(defaults.sim_substeps);
        if !(t_final > 0.0) || !t_final.is_finite() {
            return Err(Error::Config(format!("t_final must be positive, got {t_final}")));
        }
        if !(control_dt > 0.0) || control_dt > t_final {
            return Err(Error::Config(format!(
                "control_dt must be in (0, t_final], got {control_dt}"
            )));
        }
        if sim_substeps == 0 {
            return Err(Error::Config("sim_substeps must be at least 1".into()));
        }

        Ok(RunSetup {
            scenario,
            controller,
            estimator_kind,
            lambda,
            error_model,
            bound_params,
            grid,
            flow_substeps,
            alpha,
            alpha_b,
            x0,
            t_final,
            control_dt,
            sim_substeps,
            seed: self.seed,
        })
    }
}

struct Defaults {
    flow_horizon: f64,
    flow_delta: f64,
    flow_substeps: usize,
    lambda: f64,
    bounds_kind: BoundKind,
    alpha: f64,
    alpha_b: f64,
    t_final: f64,
    control_dt: f64,
    sim_substeps: usize,
    x0: Vec<f64>,
}

/// Parses the flat `key = value` format. `#` starts a comment, blank lines
/// are skipped, later assignments win.
pub fn parse_config(text: &str) -> Result<SimConfig> {
    let mut cfg = SimConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
        })?;
        cfg.apply(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<SimConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text)
}

/// Fully validated, ready-to-run description.
pub struct RunSetup {
    pub scenario: Scenario,
    pub controller: ControllerKind,
    pub estimator_kind: EstimatorKind,
    pub lambda: DVector<f64>,
    pub error_model: ErrorBoundModel,
    pub bound_params: BoundParams,
    pub grid: FlowGrid,
    pub flow_substeps: usize,
    pub alpha: ClassKappa,
    pub alpha_b: ClassKappa,
    pub x0: DVector<f64>,
    pub t_final: f64,
    pub control_dt: f64,
    pub sim_substeps: usize,
    pub seed: u64,
}

impl RunSetup {
    /// Filter settings implied by this setup.
    pub fn filter_settings(&self) -> crate::filter::FilterSettings {
        crate::filter::FilterSettings {
            controller: self.controller,
            estimator_kind: self.estimator_kind,
            lambda: self.lambda.clone(),
            bound_params: self.bound_params,
            grid: self.grid.clone(),
            flow_substeps: self.flow_substeps,
            alpha: self.alpha,
            alpha_b: self.alpha_b,
        }
    }
}
