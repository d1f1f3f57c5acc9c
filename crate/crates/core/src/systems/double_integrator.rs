//! Double integrator pushed toward a position wall by a slowly rotating
//! disturbance. Safety is staying left of the wall, `h = -x1 >= 0`, and the
//! backup brakes at full authority toward the quadrant where both position
//! and velocity are nonpositive.

use super::{
    softmin_with_weights, BackupPolicy, BarrierSpec, DisturbanceTruth, Scenario, StateBox,
    SystemModel,
};
use nalgebra::{DMatrix, DVector, RowDVector};
use std::f64::consts::FRAC_PI_4;

const DELTA_D: f64 = 0.08;
const KAPPA: f64 = 10.0;

/// Builds the double-integrator scenario. `omega` is the angular rate of the
/// rotating disturbance; `omega = 0` freezes it at a constant vector of norm
/// `delta_d`, which also zeroes the rate bound `delta_v`.
pub fn make_double_integrator(omega: f64) -> Scenario {
    let n = 2;
    let m = 1;

    let model = SystemModel {
        n,
        m,
        f: Box::new(|x: &DVector<f64>| DVector::from_vec(vec![x[1], 0.0])),
        g: Box::new(|_: &DVector<f64>| DMatrix::from_column_slice(2, 1, &[0.0, 1.0])),
        f_jacobian: Box::new(|_: &DVector<f64>| {
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
        }),
        g_jacobian_apply: Box::new(|_: &DVector<f64>, _: &DVector<f64>| DMatrix::zeros(2, 2)),
        input_lower: DVector::from_vec(vec![-1.0]),
        input_upper: DVector::from_vec(vec![1.0]),
        state_domain: StateBox::new(
            DVector::from_vec(vec![-5.0, -5.0]),
            DVector::from_vec(vec![5.0, 5.0]),
        )
        .expect("static box"),
    };

    let truth = DisturbanceTruth {
        d: Box::new(move |t: f64| {
            let phase = omega * t + FRAC_PI_4;
            DVector::from_vec(vec![DELTA_D * phase.sin(), DELTA_D * phase.cos()])
        }),
        d_dot: Box::new(move |t: f64| {
            let phase = omega * t + FRAC_PI_4;
            DVector::from_vec(vec![DELTA_D * omega * phase.cos(), -DELTA_D * omega * phase.sin()])
        }),
        delta_d: DELTA_D,
        delta_v: DELTA_D * omega.abs(),
    };

    let backup = BackupPolicy {
        k_b: Box::new(|_: &DVector<f64>| DVector::from_vec(vec![-1.0])),
        k_b_jacobian: Box::new(|_: &DVector<f64>| DMatrix::zeros(1, 2)),
        admissible: true,
    };

    let barriers = BarrierSpec {
        h: Box::new(|x: &DVector<f64>| -x[0]),
        grad_h: Box::new(|_: &DVector<f64>| RowDVector::from_vec(vec![-1.0, 0.0])),
        // Backup set: both position and velocity nonpositive, blended so the
        // barrier stays differentiable where the two constraints meet.
        h_b: Box::new(|x: &DVector<f64>| softmin_with_weights(&[-x[0], -x[1]], KAPPA).0),
        grad_h_b: Box::new(|x: &DVector<f64>| {
            let (_, w) = softmin_with_weights(&[-x[0], -x[1]], KAPPA);
            RowDVector::from_vec(vec![-w[0], -w[1]])
        }),
        lipschitz_h: 1.0,
        // Convex combinations of unit-norm gradients never exceed norm one.
        lipschitz_hb: 1.0,
    };

    Scenario {
        name: "double-integrator".into(),
        model,
        truth,
        backup,
        barriers,
        primary: Box::new(|_: &DVector<f64>| DVector::from_vec(vec![1.0])),
    }
}
