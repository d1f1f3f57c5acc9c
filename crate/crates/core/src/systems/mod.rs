//! Control-affine plant models, backup policies, barrier functions, and the
//! two built-in scenarios (a disturbed double integrator and a planar
//! quadrotor descending toward an altitude floor).
//!
//! Dynamics are `x' = f(x) + g(x) u + d(t)` with the disturbance `d` bounded
//! in norm by `delta_d` and in rate by `delta_v`. The closed loop under the
//! backup policy, `f_cl(x) = f(x) + g(x) k_b(x)`, is what the flow module
//! integrates forward.

mod double_integrator;
mod quadrotor;

pub use double_integrator::make_double_integrator;
pub use quadrotor::{make_planar_quadrotor, make_planar_quadrotor_with_floor};

use crate::error::Error;
use crate::Result;
use nalgebra::{DMatrix, DVector, RowDVector};

pub type StateFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type ScalarFn = Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type GradFn = Box<dyn Fn(&DVector<f64>) -> RowDVector<f64> + Send + Sync>;
pub type MatrixFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// Maps `(x, u)` to the state derivative contribution `d(g(x) u)/dx`.
pub type InputJacFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type SignalFn = Box<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Axis-aligned compact box of states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl StateBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Config("state box bounds differ in length".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l < u)) {
            return Err(Error::Config("state box requires lower < upper per axis".into()));
        }
        Ok(StateBox { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(xi, (l, u))| *xi >= *l && *xi <= *u)
    }

    /// Scales every half-width by `factor` about the box center.
    pub fn inflate(&self, factor: f64) -> StateBox {
        let center = (&self.lower + &self.upper) * 0.5;
        let half = (&self.upper - &self.lower) * (0.5 * factor);
        StateBox { lower: &center - &half, upper: &center + &half }
    }

    /// Uniform sample, axis by axis.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower.iter().zip(self.upper.iter()).map(|(l, u)| rng.random_range(*l..=*u)),
        )
    }
}

/// Control-affine plant with analytic Jacobians and an admissible input box.
pub struct SystemModel {
    pub n: usize,
    pub m: usize,
    pub f: StateFn,
    pub g: MatrixFn,
    /// `df/dx`.
    pub f_jacobian: MatrixFn,
    /// `d(g(x) u)/dx` for a fixed input `u`.
    pub g_jacobian_apply: InputJacFn,
    pub input_lower: DVector<f64>,
    pub input_upper: DVector<f64>,
    pub state_domain: StateBox,
}

impl SystemModel {
    pub(crate) fn check_domain(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Domain {
                what: format!("state has length {}, expected {}", x.len(), self.n),
            });
        }
        if !self.state_domain.contains(x) {
            return Err(Error::Domain {
                what: format!("state {:?} outside state domain", x.as_slice()),
            });
        }
        Ok(())
    }
}

/// True disturbance signal, visible only to the simulator and verifiers.
pub struct DisturbanceTruth {
    pub d: SignalFn,
    pub d_dot: SignalFn,
    /// Bound on `||d(t)||`.
    pub delta_d: f64,
    /// Bound on `||d'(t)||`.
    pub delta_v: f64,
}

/// Backup controller driving the system into its invariant backup set.
pub struct BackupPolicy {
    pub k_b: StateFn,
    /// `dk_b/dx`, shape m x n.
    pub k_b_jacobian: MatrixFn,
    /// Asserts `k_b(x)` lies in the input box on the operating domain.
    pub admissible: bool,
}

/// Safety constraint `h >= 0` plus the backup-set barrier `h_b >= 0`, with
/// Lipschitz constants used to translate flow deviation into margin.
pub struct BarrierSpec {
    pub h: ScalarFn,
    pub grad_h: GradFn,
    pub h_b: ScalarFn,
    pub grad_h_b: GradFn,
    pub lipschitz_h: f64,
    pub lipschitz_hb: f64,
}

/// Linear extended class-K function `s -> slope * s`.
#[derive(Debug, Clone, Copy)]
pub struct ClassKappa {
    pub slope: f64,
}

impl ClassKappa {
    pub fn new(slope: f64) -> Result<Self> {
        if !(slope > 0.0) || !slope.is_finite() {
            return Err(Error::Config(format!("class-K slope must be positive, got {slope}")));
        }
        Ok(ClassKappa { slope })
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.slope * s
    }
}

/// One ready-to-run case study: plant, truth, backup, barriers, and the
/// performance controller the filter projects onto the safe set.
pub struct Scenario {
    pub name: String,
    pub model: SystemModel,
    pub truth: DisturbanceTruth,
    pub backup: BackupPolicy,
    pub barriers: BarrierSpec,
    /// Primary (performance) controller `k_p`.
    pub primary: StateFn,
}

/// Closed-loop rate under the backup policy, no domain check. The flow
/// integrator calls this off the grid where intermediate states may leave
/// the nominal domain.
pub(crate) fn closed_loop_rate(
    model: &SystemModel,
    policy: &BackupPolicy,
    x: &DVector<f64>,
) -> DVector<f64> {
    (model.f)(x) + (model.g)(x) * (policy.k_b)(x)
}

pub(crate) fn closed_loop_jacobian_raw(
    model: &SystemModel,
    policy: &BackupPolicy,
    x: &DVector<f64>,
) -> DMatrix<f64> {
    let u = (policy.k_b)(x);
    (model.f_jacobian)(x)
        + (model.g_jacobian_apply)(x, &u)
        + (model.g)(x) * (policy.k_b_jacobian)(x)
}

/// Evaluates `f_cl(x) = f(x) + g(x) k_b(x)` for a state inside the domain.
pub fn eval_closed_loop(
    model: &SystemModel,
    policy: &BackupPolicy,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    model.check_domain(x)?;
    let rate = closed_loop_rate(model, policy, x);
    if rate.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("closed-loop rate".into()));
    }
    Ok(rate)
}

/// Evaluates the closed-loop Jacobian `df_cl/dx` from the analytic parts:
/// `df/dx + d(g(x) k_b(x))/dx` with the product rule split between the
/// input-Jacobian term and `g(x) dk_b/dx`.
pub fn eval_closed_loop_jacobian(
    model: &SystemModel,
    policy: &BackupPolicy,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    model.check_domain(x)?;
    let j = closed_loop_jacobian_raw(model, policy, x);
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("closed-loop Jacobian".into()));
    }
    Ok(j)
}

/// Smooth under-approximation of `min(values)`:
/// `softmin(v) = -(1/kappa) ln(sum_i exp(-kappa v_i))`.
///
/// Always `<= min(v)`, and within `ln(k)/kappa` of it for `k` values. The
/// sum is shifted by the minimum before exponentiating so large spreads do
/// not overflow.
pub fn softmin_barrier(values: &[f64], kappa: f64) -> f64 {
    assert!(!values.is_empty(), "softmin of no values");
    assert!(kappa > 0.0, "softmin sharpness must be positive");
    let vmin = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let sum: f64 = values.iter().map(|v| (-kappa * (v - vmin)).exp()).sum();
    vmin - sum.ln() / kappa
}

/// Softmin plus its convex-combination weights `w_i`, which assemble the
/// gradient as `sum_i w_i grad v_i`.
pub fn softmin_with_weights(values: &[f64], kappa: f64) -> (f64, Vec<f64>) {
    let vmin = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = values.iter().map(|v| (-kappa * (v - vmin)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    (vmin - sum.ln() / kappa, raw.into_iter().map(|w| w / sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn fd_jacobian(
        model: &SystemModel,
        policy: &BackupPolicy,
        x: &DVector<f64>,
        eps: f64,
    ) -> DMatrix<f64> {
        let n = model.n;
        let mut j = DMatrix::zeros(n, n);
        for col in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += eps;
            xm[col] -= eps;
            let dp = closed_loop_rate(model, policy, &xp);
            let dm = closed_loop_rate(model, policy, &xm);
            j.set_column(col, &((dp - dm) / (2.0 * eps)));
        }
        j
    }

    fn fd_gradient(h: &ScalarFn, x: &DVector<f64>, eps: f64) -> RowDVector<f64> {
        let mut g = RowDVector::zeros(x.len());
        for col in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += eps;
            xm[col] -= eps;
            g[col] = (h(&xp) - h(&xm)) / (2.0 * eps);
        }
        g
    }

    #[test]
    fn double_integrator_closed_loop_hand_values() {
        let sc = make_double_integrator(0.2);
        let r =
            eval_closed_loop(&sc.model, &sc.backup, &DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert_eq!(r.as_slice(), &[1.0, -1.0]);
        let r =
            eval_closed_loop(&sc.model, &sc.backup, &DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_eq!(r.as_slice(), &[0.0, -1.0]);
    }

    #[test]
    fn double_integrator_jacobian_is_shift_matrix() {
        let sc = make_double_integrator(0.2);
        let j =
            eval_closed_loop_jacobian(&sc.model, &sc.backup, &DVector::from_vec(vec![-1.0, 0.5]))
                .unwrap();
        assert_eq!(j[(0, 0)], 0.0);
        assert_eq!(j[(0, 1)], 1.0);
        assert_eq!(j[(1, 0)], 0.0);
        assert_eq!(j[(1, 1)], 0.0);
    }

    #[test]
    fn quadrotor_hover_rate_hand_value() {
        let sc = make_planar_quadrotor();
        let r = eval_closed_loop(&sc.model, &sc.backup, &DVector::zeros(6)).unwrap();
        let expected = [0.0, 0.0, 0.0, 0.0, 20.0 - 9.81, 0.0];
        for (a, b) in r.iter().zip(expected.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
    }

    #[test]
    fn quadrotor_jacobian_theta_coupling() {
        let sc = make_planar_quadrotor();
        let j = eval_closed_loop_jacobian(&sc.model, &sc.backup, &DVector::zeros(6)).unwrap();
        // Thrust tilts horizontal acceleration at 20 * cos(0) / m.
        assert_relative_eq!(j[(3, 2)], 20.0, max_relative = 1e-15);
        assert_relative_eq!(j[(5, 2)], -4.0, max_relative = 1e-15);
        assert_relative_eq!(j[(5, 5)], -1.01 / 0.25, max_relative = 1e-15);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for sc in [make_double_integrator(0.2), make_planar_quadrotor()] {
            for _ in 0..20 {
                let x = sc.model.state_domain.sample(&mut rng);
                let analytic = eval_closed_loop_jacobian(&sc.model, &sc.backup, &x).unwrap();
                let fd = fd_jacobian(&sc.model, &sc.backup, &x, 1e-6);
                let denom = analytic.norm().max(1.0);
                assert!(
                    (&analytic - &fd).norm() / denom < 1e-5,
                    "Jacobian mismatch at {:?}",
                    x.as_slice()
                );
            }
        }
    }

    #[test]
    fn barrier_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for sc in [make_double_integrator(0.2), make_planar_quadrotor()] {
            for _ in 0..20 {
                let x = sc.model.state_domain.sample(&mut rng);
                for (grad, val) in [
                    (&sc.barriers.grad_h, &sc.barriers.h),
                    (&sc.barriers.grad_h_b, &sc.barriers.h_b),
                ] {
                    let analytic = grad(&x);
                    let fd = fd_gradient(val, &x, 1e-6);
                    let denom = analytic.norm().max(1.0);
                    assert!((&analytic - &fd).norm() / denom < 1e-5);
                }
            }
        }
    }

    #[test]
    fn barrier_gradient_norms_within_lipschitz_constants() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for sc in [make_double_integrator(0.2), make_planar_quadrotor()] {
            for _ in 0..2000 {
                let x = sc.model.state_domain.sample(&mut rng);
                assert!((sc.barriers.grad_h)(&x).norm() <= sc.barriers.lipschitz_h * (1.0 + 1e-12));
                assert!(
                    (sc.barriers.grad_h_b)(&x).norm() <= sc.barriers.lipschitz_hb * (1.0 + 1e-12)
                );
            }
        }
    }

    #[test]
    fn softmin_three_zeros_hand_value() {
        let v = softmin_barrier(&[0.0, 0.0, 0.0], 5.0);
        assert_relative_eq!(v, -(3.0f64.ln()) / 5.0, epsilon = 1e-15);
        assert_relative_eq!(v, -0.21972245773362195, epsilon = 1e-15);
    }

    #[test]
    fn softmin_weights_sum_to_one() {
        let (v, w) = softmin_with_weights(&[1.0, -2.0, 0.3], 5.0);
        assert!(v <= -2.0);
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn softmin_under_approximates_min(
            vals in proptest::collection::vec(-50.0f64..50.0, 1..6),
            kappa in 0.5f64..20.0,
        ) {
            let s = softmin_barrier(&vals, kappa);
            let vmin = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(s <= vmin + 1e-12);
            prop_assert!(vmin - s <= (vals.len() as f64).ln() / kappa + 1e-12);
        }
    }

    #[test]
    fn disturbance_bounds_hold_on_dense_grid() {
        for sc in
            [make_double_integrator(0.0), make_double_integrator(0.2), make_planar_quadrotor()]
        {
            for k in 0..10_000 {
                let t = 40.0 * (k as f64) / 10_000.0;
                let d = (sc.truth.d)(t);
                let dd = (sc.truth.d_dot)(t);
                assert!(d.norm() <= sc.truth.delta_d * (1.0 + 1e-12), "{} t={t}", sc.name);
                assert!(dd.norm() <= sc.truth.delta_v * (1.0 + 1e-12), "{} t={t}", sc.name);
            }
        }
    }

    #[test]
    fn disturbance_rate_matches_finite_difference() {
        let sc = make_planar_quadrotor();
        let eps = 1e-6;
        for k in 0..100 {
            let t = 0.4 * k as f64;
            let fd = ((sc.truth.d)(t + eps) - (sc.truth.d)(t - eps)) / (2.0 * eps);
            assert!(((sc.truth.d_dot)(t) - fd).norm() < 1e-7);
        }
    }

    #[test]
    fn backup_policies_stay_admissible_on_domain() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        for sc in [make_double_integrator(0.2), make_planar_quadrotor()] {
            assert!(sc.backup.admissible);
            for _ in 0..10_000 {
                let x = sc.model.state_domain.sample(&mut rng);
                let u = (sc.backup.k_b)(&x);
                for i in 0..sc.model.m {
                    assert!(u[i] >= sc.model.input_lower[i] && u[i] <= sc.model.input_upper[i]);
                }
            }
        }
    }

    #[test]
    fn quadrotor_recovery_parameters_are_consistent() {
        let sc = make_planar_quadrotor();
        // Enough thrust to hold altitude against gravity plus the worst
        // disturbance at the steepest allowed tilt.
        let theta_max = 55.0f64.to_radians();
        assert!(20.0 >= (9.81 + sc.truth.delta_d) / theta_max.cos());
        // Overdamped attitude loop: K_d^2 > 4 J K_p.
        assert!(1.01f64.powi(2) > 4.0 * 0.25 * 1.0);
        // Torque authority covers the backup law on the backup set.
        assert!(20.0 >= 1.0 * theta_max + 1.01 * 3.0);
        assert_relative_eq!(sc.truth.delta_d, 1.25f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(sc.truth.delta_v, 0.15, epsilon = 1e-15);
    }

    #[test]
    fn state_box_contains_and_inflate() {
        let b =
            StateBox::new(DVector::from_vec(vec![-1.0, 0.0]), DVector::from_vec(vec![1.0, 4.0]))
                .unwrap();
        assert!(b.contains(&DVector::from_vec(vec![0.0, 2.0])));
        assert!(!b.contains(&DVector::from_vec(vec![0.0, 4.1])));
        let infl = b.inflate(1.5);
        assert_eq!(infl.lower.as_slice(), &[-1.5, -1.0]);
        assert_eq!(infl.upper.as_slice(), &[1.5, 5.0]);
        assert!(StateBox::new(DVector::from_vec(vec![1.0]), DVector::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn domain_violations_are_reported() {
        let sc = make_double_integrator(0.2);
        let far = DVector::from_vec(vec![100.0, 0.0]);
        assert!(matches!(eval_closed_loop(&sc.model, &sc.backup, &far), Err(Error::Domain { .. })));
    }
}
