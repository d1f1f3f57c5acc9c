//! Backup-flow integration with first-order sensitivities.
//!
//! The filter predicts where the backup policy would take the plant from the
//! current state under the estimated disturbance, by integrating
//!
//! ```text
//! phi'      = f_cl(phi) + d_hat                (predicted flow)
//! Phi'      = J_cl(phi) Phi,    Phi(0)   = I   (sensitivity to x)
//! Theta'    = J_cl(phi) Theta + I, Theta(0) = 0 (sensitivity to d_hat)
//! ```
//!
//! jointly with fixed-step RK4 on a uniform grid. The stacked system has
//! `n + 2 n^2` scalar states. `Theta` is the variational response to a
//! constant shift of the disturbance estimate; it feeds the robustness
//! margin that accounts for the estimate moving while the plant flows.

use crate::error::Error;
use crate::systems::{closed_loop_jacobian_raw, closed_loop_rate, BackupPolicy, SystemModel};
use crate::Result;
use nalgebra::{DMatrix, DVector};

/// Inflation applied to the state domain before declaring a flow escaped.
/// Predictions may legitimately poke past the operating box; escaping the
/// inflated box means the model is being evaluated far outside its remit.
const ESCAPE_INFLATION: f64 = 1.5;

/// Uniform time grid `{0, delta, ..., horizon}`.
#[derive(Debug, Clone)]
pub struct FlowGrid {
    horizon: f64,
    delta: f64,
    taus: Vec<f64>,
}

impl FlowGrid {
    pub fn new(horizon: f64, delta: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Config(format!("flow horizon must be positive, got {horizon}")));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Config(format!("flow step must be positive, got {delta}")));
        }
        let steps = (horizon / delta).round();
        if steps < 1.0 || (steps * delta - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::Config(format!(
                "flow step {delta} does not divide horizon {horizon}"
            )));
        }
        let steps = steps as usize;
        let mut taus: Vec<f64> = (0..=steps).map(|k| k as f64 * delta).collect();
        taus[steps] = horizon;
        Ok(FlowGrid { horizon, delta, taus })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Grid nodes including both endpoints.
    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn node_count(&self) -> usize {
        self.taus.len()
    }
}

/// Number of scalar ODE states integrated per flow: the state itself plus
/// two n-by-n sensitivity matrices.
pub fn ode_dimension(n: usize) -> usize {
    n + 2 * n * n
}

/// Flow prediction with sensitivities at every grid node.
#[derive(Debug, Clone)]
pub struct FlowBundle {
    pub d_hat: DVector<f64>,
    /// Predicted states `phi(tau_k)`.
    pub states: Vec<DVector<f64>>,
    /// `d phi(tau_k) / d x`.
    pub state_sens: Vec<DMatrix<f64>>,
    /// `d phi(tau_k) / d d_hat`.
    pub estimate_sens: Vec<DMatrix<f64>>,
}

struct Stacked {
    x: DVector<f64>,
    sx: DMatrix<f64>,
    sd: DMatrix<f64>,
}

impl Stacked {
    fn saxpy(&self, k: &Stacked, scale: f64) -> Stacked {
        Stacked {
            x: &self.x + &k.x * scale,
            sx: &self.sx + &k.sx * scale,
            sd: &self.sd + &k.sd * scale,
        }
    }

    fn combine(&self, k1: &Stacked, k2: &Stacked, k3: &Stacked, k4: &Stacked, h: f64) -> Stacked {
        let w = h / 6.0;
        Stacked {
            x: &self.x + (&k1.x + &k2.x * 2.0 + &k3.x * 2.0 + &k4.x) * w,
            sx: &self.sx + (&k1.sx + &k2.sx * 2.0 + &k3.sx * 2.0 + &k4.sx) * w,
            sd: &self.sd + (&k1.sd + &k2.sd * 2.0 + &k3.sd * 2.0 + &k4.sd) * w,
        }
    }
}

/// Integrates the predicted backup flow together with both sensitivity
/// matrices from `x` under constant disturbance estimate `d_hat`.
pub fn integrate_flow_bundle(
    model: &SystemModel,
    policy: &BackupPolicy,
    x: &DVector<f64>,
    d_hat: &DVector<f64>,
    grid: &FlowGrid,
    substeps: usize,
) -> Result<FlowBundle> {
    model.check_domain(x)?;
    if d_hat.len() != model.n {
        return Err(Error::Config(format!(
            "disturbance estimate has length {}, expected {}",
            d_hat.len(),
            model.n
        )));
    }
    if substeps == 0 {
        return Err(Error::Config("flow substeps must be at least 1".into()));
    }
    let n = model.n;
    let escape = model.state_domain.inflate(ESCAPE_INFLATION);
    let deriv = |s: &Stacked| -> Stacked {
        let j = closed_loop_jacobian_raw(model, policy, &s.x);
        let mut sd = &j * &s.sd;
        for i in 0..n {
            sd[(i, i)] += 1.0;
        }
        Stacked { x: closed_loop_rate(model, policy, &s.x) + d_hat, sx: &j * &s.sx, sd }
    };

    let mut cur = Stacked { x: x.clone(), sx: DMatrix::identity(n, n), sd: DMatrix::zeros(n, n) };
    let mut states = Vec::with_capacity(grid.node_count());
    let mut state_sens = Vec::with_capacity(grid.node_count());
    let mut estimate_sens = Vec::with_capacity(grid.node_count());
    states.push(cur.x.clone());
    state_sens.push(cur.sx.clone());
    estimate_sens.push(cur.sd.clone());

    let h = grid.delta() / substeps as f64;
    for node in 1..grid.node_count() {
        for sub in 0..substeps {
            let k1 = deriv(&cur);
            let k2 = deriv(&cur.saxpy(&k1, h / 2.0));
            let k3 = deriv(&cur.saxpy(&k2, h / 2.0));
            let k4 = deriv(&cur.saxpy(&k3, h));
            cur = cur.combine(&k1, &k2, &k3, &k4, h);
            let tau = grid.taus()[node - 1] + (sub + 1) as f64 * h;
            if cur.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("backup flow at tau = {tau:.6}")));
            }
            if !escape.contains(&cur.x) {
                return Err(Error::FlowEscape { tau });
            }
        }
        if cur.sx.iter().any(|v| !v.is_finite()) || cur.sd.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow sensitivity".into()));
        }
        states.push(cur.x.clone());
        state_sens.push(cur.sx.clone());
        estimate_sens.push(cur.sd.clone());
    }

    Ok(FlowBundle { d_hat: d_hat.clone(), states, state_sens, estimate_sens })
}

/// Predicted flow and state sensitivity with the disturbance estimate pinned
/// to zero. This is the plain backup-flow prediction used by the baseline
/// filter that ignores disturbances altogether.
pub fn integrate_nominal_flow(
    model: &SystemModel,
    policy: &BackupPolicy,
    x: &DVector<f64>,
    grid: &FlowGrid,
    substeps: usize,
) -> Result<FlowBundle> {
    integrate_flow_bundle(model, policy, x, &DVector::zeros(model.n), grid, substeps)
}

/// Integrates only the predicted state under a constant estimate; used by
/// the finite-difference oracle and the statistical verifiers where the
/// sensitivity blocks would be wasted work.
pub(crate) fn integrate_states(
    model: &SystemModel,
    policy: &BackupPolicy,
    x: &DVector<f64>,
    d_hat: &DVector<f64>,
    grid: &FlowGrid,
    substeps: usize,
) -> Result<Vec<DVector<f64>>> {
    integrate_signal_flow(model, policy, x, &|_| d_hat.clone(), grid, substeps)
}

/// Integrates the closed-loop flow under a time-varying disturbance signal
/// `d(tau)` (time measured from the start of the flow). Verification only:
/// the filter itself never sees the true disturbance.
pub fn integrate_signal_flow(
    model: &SystemModel,
    policy: &BackupPolicy,
    x: &DVector<f64>,
    d: &(dyn Fn(f64) -> DVector<f64> + Sync),
    grid: &FlowGrid,
    substeps: usize,
) -> Result<Vec<DVector<f64>>> {
    model.check_domain(x)?;
    if substeps == 0 {
        return Err(Error::Config("flow substeps must be at least 1".into()));
    }
    let escape = model.state_domain.inflate(ESCAPE_INFLATION);
    let deriv = |x: &DVector<f64>, tau: f64| closed_loop_rate(model, policy, x) + d(tau);
    let mut cur = x.clone();
    let mut out = Vec::with_capacity(grid.node_count());
    out.push(cur.clone());
    let h = grid.delta() / substeps as f64;
    for node in 1..grid.node_count() {
        let base = grid.taus()[node - 1];
        for sub in 0..substeps {
            let t0 = base + sub as f64 * h;
            let k1 = deriv(&cur, t0);
            let k2 = deriv(&(&cur + &k1 * (h / 2.0)), t0 + h / 2.0);
            let k3 = deriv(&(&cur + &k2 * (h / 2.0)), t0 + h / 2.0);
            let k4 = deriv(&(&cur + &k3 * h), t0 + h);
            cur += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            let tau = t0 + h;
            if cur.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("disturbed flow at tau = {tau:.6}")));
            }
            if !escape.contains(&cur) {
                return Err(Error::FlowEscape { tau });
            }
        }
        out.push(cur.clone());
    }
    Ok(out)
}

/// Central finite-difference approximation of both horizon sensitivities,
/// built purely from state integrations. Oracle for testing the variational
/// integration; `bump` is the one-sided perturbation size.
pub fn finite_difference_flow_sensitivity(
    model: &SystemModel,
    policy: &BackupPolicy,
    x: &DVector<f64>,
    d_hat: &DVector<f64>,
    grid: &FlowGrid,
    substeps: usize,
    bump: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(bump > 0.0) {
        return Err(Error::Config("finite-difference bump must be positive".into()));
    }
    let n = model.n;
    let last = grid.node_count() - 1;
    let mut wrt_state = DMatrix::zeros(n, n);
    let mut wrt_estimate = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += bump;
        xm[i] -= bump;
        let fp = integrate_states(model, policy, &xp, d_hat, grid, substeps)?;
        let fm = integrate_states(model, policy, &xm, d_hat, grid, substeps)?;
        wrt_state.set_column(i, &((&fp[last] - &fm[last]) / (2.0 * bump)));

        let mut dp = d_hat.clone();
        let mut dm = d_hat.clone();
        dp[i] += bump;
        dm[i] -= bump;
        let fp = integrate_states(model, policy, x, &dp, grid, substeps)?;
        let fm = integrate_states(model, policy, x, &dm, grid, substeps)?;
        wrt_estimate.set_column(i, &((&fp[last] - &fm[last]) / (2.0 * bump)));
    }
    Ok((wrt_state, wrt_estimate))
}
