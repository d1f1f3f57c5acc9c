//! First-order disturbance observer and its estimation error bound.
//!
//! The observer integrates an auxiliary state `xi` alongside the plant,
//!
//! ```text
//! d_hat = Lambda (x - xi),      xi' = f(x) + g(x) u + d_hat,
//! ```
//!
//! with diagonal positive gain `Lambda`. Initializing `xi(0) = x(0)` makes
//! `d_hat(0) = 0`, and the estimation error `e = d - d_hat` then obeys
//! `e' = d' - Lambda e`, which yields the computable envelope
//!
//! ```text
//! e_bar(t) = exp(-lambda_min t) delta_d + (delta_v / lambda_min)(1 - exp(-lambda_min t)).
//! ```
//!
//! Two degenerate estimator kinds reuse the same interface: `worst_case`
//! pins `d_hat = 0` with the static envelope `delta_d` (no adaptation), and
//! `none` pretends there is no disturbance at all, which deliberately
//! reproduces an unsound nominal controller for comparison runs.

use crate::error::Error;
use crate::systems::SystemModel;
use crate::Result;
use nalgebra::DVector;

/// Which error model drives the constraint tightening.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    /// Live observer with a decaying error envelope.
    Observer,
    /// No estimate, constant worst-case envelope `delta_d`.
    WorstCase,
    /// No estimate and no envelope. Unsound under real disturbances.
    None,
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observer" => Ok(EstimatorKind::Observer),
            "worst_case" => Ok(EstimatorKind::WorstCase),
            "none" => Ok(EstimatorKind::None),
            other => Err(Error::Config(format!("unknown estimator kind '{other}'"))),
        }
    }
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Observer => "observer",
            EstimatorKind::WorstCase => "worst_case",
            EstimatorKind::None => "none",
        }
    }
}

/// Diagonal observer gain.
#[derive(Debug, Clone)]
pub struct ObserverParams {
    pub lambda: DVector<f64>,
    pub lambda_min: f64,
}

impl ObserverParams {
    pub fn new(lambda: DVector<f64>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(Error::Config("observer gain must be non-empty".into()));
        }
        if lambda.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::Config("observer gain entries must be positive".into()));
        }
        let lambda_min = lambda.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(ObserverParams { lambda, lambda_min })
    }

    pub fn from_scalar(n: usize, gain: f64) -> Result<Self> {
        ObserverParams::new(DVector::from_element(n, gain))
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Observer integration state.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub xi: DVector<f64>,
    pub d_hat: DVector<f64>,
    pub t: f64,
}

impl EstimatorState {
    /// Starts the observer on the current measurement, so the initial
    /// estimate is exactly zero and the initial error is `d(0)` itself.
    pub fn init(x0: &DVector<f64>, t0: f64) -> Self {
        EstimatorState { xi: x0.clone(), d_hat: DVector::zeros(x0.len()), t: t0 }
    }
}

/// Parameters of the error envelope `e_bar`.
#[derive(Debug, Clone, Copy)]
pub struct ErrorBoundModel {
    pub kind: EstimatorKind,
    pub lambda_min: f64,
    pub delta_d: f64,
    pub delta_v: f64,
}

impl ErrorBoundModel {
    pub fn new(kind: EstimatorKind, lambda_min: f64, delta_d: f64, delta_v: f64) -> Result<Self> {
        if !(lambda_min > 0.0) {
            return Err(Error::Config("lambda_min must be positive".into()));
        }
        if delta_d < 0.0 || delta_v < 0.0 {
            return Err(Error::Config("disturbance bounds must be nonnegative".into()));
        }
        Ok(ErrorBoundModel { kind, lambda_min, delta_d, delta_v })
    }
}

/// Envelope on `||d(t) - d_hat(t)||` at time `t` since observer start.
pub fn error_bound(model: &ErrorBoundModel, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Config(format!("error bound needs t >= 0, got {t}")));
    }
    Ok(match model.kind {
        EstimatorKind::Observer => {
            let decay = (-model.lambda_min * t).exp();
            decay * model.delta_d + model.delta_v / model.lambda_min * (1.0 - decay)
        }
        EstimatorKind::WorstCase => model.delta_d,
        EstimatorKind::None => 0.0,
    })
}

/// Time derivative of [`error_bound`].
pub fn error_bound_derivative(model: &ErrorBoundModel, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Config(format!("error bound needs t >= 0, got {t}")));
    }
    Ok(match model.kind {
        EstimatorKind::Observer => {
            (model.delta_v - model.lambda_min * model.delta_d) * (-model.lambda_min * t).exp()
        }
        EstimatorKind::WorstCase | EstimatorKind::None => 0.0,
    })
}

/// Bound on the estimate rate: `||d_hat'|| = ||Lambda e|| <= lambda_max e_bar`.
pub fn estimate_rate_bound(params: &ObserverParams, e_bar: f64) -> f64 {
    params.lambda_max() * e_bar
}

/// Advances the observer one step of size `dt` with the measurement `x` and
/// input `u` held fixed, then refreshes the estimate against `x`. Classic
/// zero-order-hold discretization; the simulation harness instead integrates
/// the observer jointly with the plant for full continuous-time fidelity.
pub fn observer_step(
    params: &ObserverParams,
    state: &EstimatorState,
    model: &SystemModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<EstimatorState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("observer step needs dt > 0, got {dt}")));
    }
    let drift = (model.f)(x) + (model.g)(x) * u;
    let deriv =
        |xi: &DVector<f64>| -> DVector<f64> { &drift + params.lambda.component_mul(&(x - xi)) };
    let h = dt;
    let k1 = deriv(&state.xi);
    let k2 = deriv(&(&state.xi + &k1 * (h / 2.0)));
    let k3 = deriv(&(&state.xi + &k2 * (h / 2.0)));
    let k4 = deriv(&(&state.xi + &k3 * h));
    let xi = &state.xi + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observer state".into()));
    }
    let d_hat = params.lambda.component_mul(&(x - &xi));
    Ok(EstimatorState { xi, d_hat, t: state.t + dt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::make_double_integrator;
    use approx::assert_relative_eq;

    fn observer_model() -> ErrorBoundModel {
        ErrorBoundModel::new(EstimatorKind::Observer, 10.0, 0.08, 0.016).unwrap()
    }

    #[test]
    fn envelope_starts_at_delta_d_and_settles_at_ratio() {
        let m = observer_model();
        assert_relative_eq!(error_bound(&m, 0.0).unwrap(), 0.08, epsilon = 1e-15);
        assert_relative_eq!(error_bound(&m, 1e6).unwrap(), 0.016 / 10.0, epsilon = 1e-15);
    }

    #[test]
    fn envelope_hand_value_pure_decay() {
        let m = ErrorBoundModel::new(EstimatorKind::Observer, 10.0, 0.08, 0.0).unwrap();
        assert_relative_eq!(
            error_bound(&m, 0.5).unwrap(),
            5.390357599268374e-4,
            max_relative = 1e-14
        );
    }

    #[test]
    fn envelope_is_monotone_when_settling_down() {
        let m = observer_model();
        let mut prev = f64::INFINITY;
        for k in 0..500 {
            let v = error_bound(&m, k as f64 * 0.01).unwrap();
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn envelope_derivative_matches_finite_difference() {
        let m = observer_model();
        let eps = 1e-6;
        for k in 1..40 {
            let t = 0.05 * k as f64;
            let fd = (error_bound(&m, t + eps).unwrap() - error_bound(&m, t - eps).unwrap())
                / (2.0 * eps);
            // Late in the decay the derivative shrinks to ~1e-9 while the
            // difference quotient keeps ~1e-13 of cancellation noise, so an
            // absolute floor backs up the relative check.
            assert_relative_eq!(
                error_bound_derivative(&m, t).unwrap(),
                fd,
                epsilon = 1e-11,
                max_relative = 1e-7
            );
        }
        assert_relative_eq!(
            error_bound_derivative(&m, 0.0).unwrap(),
            0.016 - 10.0 * 0.08,
            epsilon = 1e-15
        );
    }

    #[test]
    fn degenerate_kinds_have_flat_envelopes() {
        let wc = ErrorBoundModel::new(EstimatorKind::WorstCase, 10.0, 0.08, 0.016).unwrap();
        assert_eq!(error_bound(&wc, 3.7).unwrap(), 0.08);
        assert_eq!(error_bound_derivative(&wc, 3.7).unwrap(), 0.0);
        let none = ErrorBoundModel::new(EstimatorKind::None, 10.0, 0.08, 0.016).unwrap();
        assert_eq!(error_bound(&none, 3.7).unwrap(), 0.0);
    }

    #[test]
    fn rate_bound_hand_value() {
        let p = ObserverParams::from_scalar(2, 10.0).unwrap();
        assert_relative_eq!(estimate_rate_bound(&p, 0.08), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn init_zeroes_the_estimate() {
        let x0 = DVector::from_vec(vec![-2.0, 0.0]);
        let s = EstimatorState::init(&x0, 0.0);
        assert_eq!(s.d_hat.as_slice(), &[0.0, 0.0]);
        assert_eq!(s.xi, x0);
    }

    #[test]
    fn stationary_plant_is_a_fixed_point() {
        // At an equilibrium with zero input and zero disturbance the
        // auxiliary state never moves, so the estimate stays exactly zero.
        let sc = make_double_integrator(0.0);
        let p = ObserverParams::from_scalar(2, 1.0).unwrap();
        let x = DVector::zeros(2);
        let u = DVector::zeros(1);
        let mut s = EstimatorState::init(&x, 0.0);
        for _ in 0..100 {
            s = observer_step(&p, &s, &sc.model, &x, &u, 0.01).unwrap();
        }
        assert_eq!(s.d_hat.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn step_matches_exact_linear_response() {
        // With x and u frozen the auxiliary dynamics are linear diagonal;
        // one RK4 step must match the matrix exponential to O(dt^5).
        let sc = make_double_integrator(0.0);
        let p = ObserverParams::new(DVector::from_vec(vec![10.0, 4.0])).unwrap();
        let x = DVector::from_vec(vec![0.5, -0.25]);
        let u = DVector::from_vec(vec![0.3]);
        let s0 = EstimatorState {
            xi: DVector::from_vec(vec![0.2, 0.1]),
            d_hat: DVector::zeros(2),
            t: 0.0,
        };
        let dt = 0.001;
        let s1 = observer_step(&p, &s0, &sc.model, &x, &u, dt).unwrap();
        let drift = (sc.model.f)(&x) + (sc.model.g)(&x) * &u;
        for i in 0..2 {
            let fixed = x[i] + drift[i] / p.lambda[i];
            let exact = fixed + (-p.lambda[i] * dt).exp() * (s0.xi[i] - fixed);
            assert_relative_eq!(s1.xi[i], exact, epsilon = 1e-12);
        }
        assert_relative_eq!(s1.t, dt, epsilon = 1e-15);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(ObserverParams::from_scalar(2, 0.0).is_err());
        assert!(ObserverParams::from_scalar(2, -1.0).is_err());
        assert!(ErrorBoundModel::new(EstimatorKind::Observer, 1.0, -0.1, 0.0).is_err());
        let m = observer_model();
        assert!(error_bound(&m, -0.1).is_err());
    }
}
