//! The safety filter: assembles tightened constraints along the predicted
//! backup flow and projects the performance input onto them.
//!
//! Each grid node `tau_k` contributes one row enforcing
//!
//! ```text
//! grad_h(phi_k) Phi_k (f(x) + g(x) u + d_hat)
//!     >= -alpha(h(phi_k) - eps_k) + eps_k' + rho_k
//! ```
//!
//! plus a terminal row on the backup-set barrier `h_b`. The margin `eps_k`
//! absorbs the worst-case gap between predicted and true flow; `rho_k`
//! absorbs the unknown estimation error acting through both the flow
//! sensitivity and the moving estimate. If the program is infeasible or the
//! solver stalls, the filter hands control to the backup policy.

pub mod qp;

pub use qp::{
    qp_brute_oracle, solve_qp, solve_qp_warm, ConstraintRow, Infeasibility, OracleResult,
    QpProblem, QpSolution, QpStatus, RowLabel,
};

use crate::bounds::{build_tightening, BoundParams, TighteningSchedule};
use crate::error::Error;
use crate::estimator::EstimatorKind;
use crate::flow::{integrate_flow_bundle, integrate_nominal_flow, FlowBundle, FlowGrid};
use crate::systems::{BarrierSpec, ClassKappa, Scenario, SystemModel};
use crate::Result;
use nalgebra::{DMatrix, DVector, RowDVector};

/// Which filtering strategy runs in the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    /// Backup-flow filter with a live disturbance observer.
    UeBcbf,
    /// Backup-flow filter holding the estimate at zero with the static
    /// worst-case envelope.
    DrBcbf,
    /// Backup-flow filter that ignores disturbances entirely.
    Bcbf,
    /// Single-constraint filter on the instantaneous barrier, no backup
    /// flow. Kept as a baseline; on relative-degree-two plants its row is
    /// input-independent and the filter passes the input through.
    CbfQp,
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ue-bcbf" => Ok(ControllerKind::UeBcbf),
            "dr-bcbf" => Ok(ControllerKind::DrBcbf),
            "bcbf" => Ok(ControllerKind::Bcbf),
            "cbf-qp" => Ok(ControllerKind::CbfQp),
            other => Err(Error::Config(format!("unknown controller '{other}'"))),
        }
    }
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::UeBcbf => "ue-bcbf",
            ControllerKind::DrBcbf => "dr-bcbf",
            ControllerKind::Bcbf => "bcbf",
            ControllerKind::CbfQp => "cbf-qp",
        }
    }

    /// Estimator the controller runs unless overridden.
    pub fn default_estimator(&self) -> EstimatorKind {
        match self {
            ControllerKind::UeBcbf => EstimatorKind::Observer,
            ControllerKind::DrBcbf => EstimatorKind::WorstCase,
            ControllerKind::Bcbf | ControllerKind::CbfQp => EstimatorKind::None,
        }
    }
}

/// Who produced the applied input this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Qp,
    Backup,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Qp => "qp",
            Mode::Backup => "backup",
        }
    }
}

/// Outcome of the per-step program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Optimal,
    Infeasible,
    Stalled,
}

impl StepStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepStatus::Optimal => "optimal",
            StepStatus::Infeasible => "infeasible",
            StepStatus::Stalled => "stalled",
        }
    }
}

/// Margin absorbing the estimation error at one node: the error acts on the
/// barrier through the flow sensitivity directly and, for a live observer,
/// through the estimate rate `d_hat' = Lambda e` via the estimate
/// sensitivity.
pub fn robustness_term(
    grad_at_node: &RowDVector<f64>,
    state_sens: &DMatrix<f64>,
    estimate_sens: &DMatrix<f64>,
    lambda: &DVector<f64>,
    e_bar: f64,
    kind: EstimatorKind,
) -> f64 {
    match kind {
        EstimatorKind::Observer => {
            let mut coupled = estimate_sens.clone();
            for j in 0..coupled.ncols() {
                let mut col = coupled.column_mut(j);
                col *= lambda[j];
            }
            coupled += state_sens;
            e_bar * (grad_at_node * coupled).norm()
        }
        EstimatorKind::WorstCase => e_bar * (grad_at_node * state_sens).norm(),
        EstimatorKind::None => 0.0,
    }
}

/// Constraint rows plus the diagnostics the simulator records.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub rows: Vec<ConstraintRow>,
    /// Min over grid nodes of `h(phi_k) - eps_k`.
    pub min_h_margin: f64,
    /// Terminal barrier value `h_b(phi_N)`.
    pub hb_terminal: f64,
}

/// Builds the full row set (one per node plus the terminal row) for the
/// current state, estimate, and tightening schedule.
#[allow(clippy::too_many_arguments)]
pub fn build_constraints(
    model: &SystemModel,
    barriers: &BarrierSpec,
    bundle: &FlowBundle,
    schedule: &TighteningSchedule,
    x: &DVector<f64>,
    alpha: ClassKappa,
    alpha_b: ClassKappa,
    kind: EstimatorKind,
    lambda: &DVector<f64>,
    e_bar: f64,
) -> Result<ConstraintSet> {
    let nodes = bundle.states.len();
    if schedule.eps.len() != nodes {
        return Err(Error::Config(format!(
            "tightening schedule has {} nodes, flow bundle {}",
            schedule.eps.len(),
            nodes
        )));
    }
    let g = (model.g)(x);
    let drift = (model.f)(x) + &bundle.d_hat;
    let mut rows = Vec::with_capacity(nodes + 1);
    let mut min_h_margin = f64::INFINITY;

    for k in 0..nodes {
        let phi = &bundle.states[k];
        let grad = (barriers.grad_h)(phi);
        let along = &grad * &bundle.state_sens[k];
        let h = (barriers.h)(phi);
        let rho = robustness_term(
            &grad,
            &bundle.state_sens[k],
            &bundle.estimate_sens[k],
            lambda,
            e_bar,
            kind,
        );
        let margin = h - schedule.eps[k];
        min_h_margin = min_h_margin.min(margin);
        let certain: f64 = along.iter().zip(drift.iter()).map(|(a, b)| a * b).sum();
        let b = -certain - alpha.eval(margin) + schedule.eps_dot[k] + rho;
        rows.push(ConstraintRow::new(&along * &g, b, RowLabel::Node(k)));
    }

    let phi = &bundle.states[nodes - 1];
    let grad = (barriers.grad_h_b)(phi);
    let along = &grad * &bundle.state_sens[nodes - 1];
    let hb_terminal = (barriers.h_b)(phi);
    let rho = robustness_term(
        &grad,
        &bundle.state_sens[nodes - 1],
        &bundle.estimate_sens[nodes - 1],
        lambda,
        e_bar,
        kind,
    );
    let certain: f64 = along.iter().zip(drift.iter()).map(|(a, b)| a * b).sum();
    let b = -certain - alpha_b.eval(hb_terminal - schedule.eps_b) + schedule.eps_b_dot + rho;
    rows.push(ConstraintRow::new(&along * &g, b, RowLabel::Terminal));

    Ok(ConstraintSet { rows, min_h_margin, hb_terminal })
}

/// Everything the filter needs beyond the scenario itself.
#[derive(Debug, Clone)]
pub struct FilterSettings {
    pub controller: ControllerKind,
    pub estimator_kind: EstimatorKind,
    pub lambda: DVector<f64>,
    pub bound_params: BoundParams,
    pub grid: FlowGrid,
    pub flow_substeps: usize,
    pub alpha: ClassKappa,
    pub alpha_b: ClassKappa,
}

/// Applied input plus diagnostics for one control step.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub u: DVector<f64>,
    pub mode: Mode,
    pub status: StepStatus,
    /// `h_b` at the end of the predicted flow; `NaN` for the flowless
    /// baseline.
    pub hb_terminal: f64,
    /// Min over the grid of `h(phi_k) - eps_k`; `NaN` for the flowless
    /// baseline.
    pub min_h_margin: f64,
    pub kkt_residual: Option<f64>,
    pub rows: Vec<ConstraintRow>,
}

/// Stateful per-run filter; carries the QP warm start between steps.
pub struct SafetyFilter<'a> {
    scenario: &'a Scenario,
    settings: FilterSettings,
    warm: Option<QpSolution>,
}

impl<'a> SafetyFilter<'a> {
    pub fn new(scenario: &'a Scenario, settings: FilterSettings) -> Result<Self> {
        if settings.lambda.len() != scenario.model.n {
            return Err(Error::Config(format!(
                "observer gain has length {}, state has {}",
                settings.lambda.len(),
                scenario.model.n
            )));
        }
        if settings.flow_substeps == 0 {
            return Err(Error::Config("flow substeps must be at least 1".into()));
        }
        Ok(SafetyFilter { scenario, settings, warm: None })
    }

    pub fn settings(&self) -> &FilterSettings {
        &self.settings
    }

    /// Computes the input for the current state. `e_bar` and `e_bar_dot`
    /// are the envelope value and slope at the current time; the flowless
    /// baseline ignores them.
    pub fn step(
        &mut self,
        x: &DVector<f64>,
        d_hat: &DVector<f64>,
        e_bar: f64,
        e_bar_dot: f64,
    ) -> Result<FilterStep> {
        let sc = self.scenario;
        let u_des = (sc.primary)(x);

        if self.settings.controller == ControllerKind::CbfQp {
            return vanilla_cbf_qp_step(&sc.model, &sc.barriers, self.settings.alpha, x, &u_des);
        }

        let bundle = match self.settings.controller {
            ControllerKind::Bcbf => integrate_nominal_flow(
                &sc.model,
                &sc.backup,
                x,
                &self.settings.grid,
                self.settings.flow_substeps,
            )?,
            _ => integrate_flow_bundle(
                &sc.model,
                &sc.backup,
                x,
                d_hat,
                &self.settings.grid,
                self.settings.flow_substeps,
            )?,
        };
        let schedule =
            build_tightening(&self.settings.bound_params, &self.settings.grid, e_bar, e_bar_dot)?;
        let cs = build_constraints(
            &sc.model,
            &sc.barriers,
            &bundle,
            &schedule,
            x,
            self.settings.alpha,
            self.settings.alpha_b,
            self.settings.estimator_kind,
            &self.settings.lambda,
            e_bar,
        )?;

        let problem = QpProblem {
            u_des,
            lower: sc.model.input_lower.clone(),
            upper: sc.model.input_upper.clone(),
            rows: cs.rows.clone(),
        };
        match solve_qp_warm(&problem, self.warm.as_ref()) {
            Ok(sol) if sol.status == QpStatus::Optimal => {
                let kkt = sol.kkt_residual;
                let u = sol.u.clone();
                self.warm = Some(sol);
                Ok(FilterStep {
                    u,
                    mode: Mode::Qp,
                    status: StepStatus::Optimal,
                    hb_terminal: cs.hb_terminal,
                    min_h_margin: cs.min_h_margin,
                    kkt_residual: Some(kkt),
                    rows: cs.rows,
                })
            }
            Ok(_) => {
                self.warm = None;
                Ok(FilterStep {
                    u: (sc.backup.k_b)(x),
                    mode: Mode::Backup,
                    status: StepStatus::Infeasible,
                    hb_terminal: cs.hb_terminal,
                    min_h_margin: cs.min_h_margin,
                    kkt_residual: None,
                    rows: cs.rows,
                })
            }
            Err(Error::SolverStalled(_)) => {
                self.warm = None;
                Ok(FilterStep {
                    u: (sc.backup.k_b)(x),
                    mode: Mode::Backup,
                    status: StepStatus::Stalled,
                    hb_terminal: cs.hb_terminal,
                    min_h_margin: cs.min_h_margin,
                    kkt_residual: None,
                    rows: cs.rows,
                })
            }
            Err(e) => Err(e),
        }
    }
}

/// One-row filter on the instantaneous barrier, nominal model only. On an
/// infeasible or input-independent row it falls back to the clamped
/// performance input; there is no backup policy to engage.
pub fn vanilla_cbf_qp_step(
    model: &SystemModel,
    barriers: &BarrierSpec,
    alpha: ClassKappa,
    x: &DVector<f64>,
    u_des: &DVector<f64>,
) -> Result<FilterStep> {
    model.check_domain(x)?;
    let grad = (barriers.grad_h)(x);
    let h = (barriers.h)(x);
    let a = &grad * (model.g)(x);
    let fx = (model.f)(x);
    let certain: f64 = grad.iter().zip(fx.iter()).map(|(a, b)| a * b).sum();
    let b = -certain - alpha.eval(h);
    let rows = vec![ConstraintRow::new(a, b, RowLabel::Node(0))];
    let problem = QpProblem {
        u_des: u_des.clone(),
        lower: model.input_lower.clone(),
        upper: model.input_upper.clone(),
        rows: rows.clone(),
    };
    let sol = solve_qp(&problem)?;
    let clamped = DVector::from_fn(u_des.len(), |i, _| {
        u_des[i].clamp(model.input_lower[i], model.input_upper[i])
    });
    Ok(match sol.status {
        QpStatus::Optimal => FilterStep {
            u: sol.u.clone(),
            mode: Mode::Qp,
            status: StepStatus::Optimal,
            hb_terminal: f64::NAN,
            min_h_margin: f64::NAN,
            kkt_residual: Some(sol.kkt_residual),
            rows,
        },
        QpStatus::Infeasible => FilterStep {
            u: clamped,
            mode: Mode::Qp,
            status: StepStatus::Infeasible,
            hb_terminal: f64::NAN,
            min_h_margin: f64::NAN,
            kkt_residual: None,
            rows,
        },
    })
}
