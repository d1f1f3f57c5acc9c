//! Planar quadrotor holding altitude above a floor while a steady wind plus a
//! slow vertical gust act on the translational dynamics. State is
//! `(x, z, theta, vx, vz, omega)`; inputs are total thrust `F` and pitch
//! torque `M`. The backup policy commands full thrust while an overdamped PD
//! loop levels the vehicle, driving it into the climbing backup set
//! `{vz >= 0, |theta| <= theta_max, |omega| <= omega_max}`.

use super::{
    softmin_with_weights, BackupPolicy, BarrierSpec, DisturbanceTruth, Scenario, StateBox,
    SystemModel,
};
use nalgebra::{DMatrix, DVector, RowDVector};
use std::f64::consts::{FRAC_PI_3, PI};

const GRAVITY: f64 = 9.81;
const MASS: f64 = 1.0;
const INERTIA: f64 = 0.25;
const F_MAX: f64 = 20.0;
const M_MAX: f64 = 20.0;
const K_P: f64 = 1.0;
const K_D: f64 = 1.01;
const THETA_DOT_MAX: f64 = 3.0;
const KAPPA: f64 = 5.0;
const DEFAULT_Z_MIN: f64 = 0.5;

fn theta_max() -> f64 {
    55.0f64.to_radians()
}

/// Quadrotor scenario with the default altitude floor of 0.5 m.
pub fn make_planar_quadrotor() -> Scenario {
    make_planar_quadrotor_with_floor(DEFAULT_Z_MIN)
}

/// Quadrotor scenario with a caller-chosen altitude floor `z_min`.
pub fn make_planar_quadrotor_with_floor(z_min: f64) -> Scenario {
    let n = 6;
    let m = 2;

    let model = SystemModel {
        n,
        m,
        f: Box::new(|x: &DVector<f64>| {
            DVector::from_vec(vec![x[3], x[4], x[5], 0.0, -GRAVITY, 0.0])
        }),
        g: Box::new(|x: &DVector<f64>| {
            let th = x[2];
            let mut g = DMatrix::zeros(6, 2);
            g[(3, 0)] = th.sin() / MASS;
            g[(4, 0)] = th.cos() / MASS;
            g[(5, 1)] = -1.0 / INERTIA;
            g
        }),
        f_jacobian: Box::new(|_: &DVector<f64>| {
            let mut j = DMatrix::zeros(6, 6);
            j[(0, 3)] = 1.0;
            j[(1, 4)] = 1.0;
            j[(2, 5)] = 1.0;
            j
        }),
        g_jacobian_apply: Box::new(|x: &DVector<f64>, u: &DVector<f64>| {
            // Only the thrust direction depends on the state, through theta.
            let th = x[2];
            let mut j = DMatrix::zeros(6, 6);
            j[(3, 2)] = th.cos() / MASS * u[0];
            j[(4, 2)] = -th.sin() / MASS * u[0];
            j
        }),
        input_lower: DVector::from_vec(vec![0.0, -M_MAX]),
        input_upper: DVector::from_vec(vec![F_MAX, M_MAX]),
        state_domain: StateBox::new(
            DVector::from_vec(vec![-100.0, -5.0, -PI, -15.0, -15.0, -4.0]),
            DVector::from_vec(vec![100.0, 50.0, PI, 15.0, 15.0, 4.0]),
        )
        .expect("static box"),
    };

    let truth = DisturbanceTruth {
        // Steady 1 m/s^2 horizontal push plus a slow vertical gust.
        d: Box::new(|t: f64| {
            let mut d = DVector::zeros(6);
            d[3] = 1.0;
            d[4] = 0.5 * (0.3 * t - FRAC_PI_3).sin();
            d
        }),
        d_dot: Box::new(|t: f64| {
            let mut d = DVector::zeros(6);
            d[4] = 0.15 * (0.3 * t - FRAC_PI_3).cos();
            d
        }),
        delta_d: 1.25f64.sqrt(),
        delta_v: 0.15,
    };

    let backup = BackupPolicy {
        k_b: Box::new(|x: &DVector<f64>| DVector::from_vec(vec![F_MAX, K_P * x[2] + K_D * x[5]])),
        k_b_jacobian: Box::new(|_: &DVector<f64>| {
            let mut j = DMatrix::zeros(2, 6);
            j[(1, 2)] = K_P;
            j[(1, 5)] = K_D;
            j
        }),
        admissible: true,
    };

    let backup_members = |x: &DVector<f64>| {
        [x[4], theta_max().powi(2) - x[2] * x[2], THETA_DOT_MAX.powi(2) - x[5] * x[5]]
    };

    let lipschitz_hb = numeric_backup_lipschitz();

    let barriers = BarrierSpec {
        h: Box::new(move |x: &DVector<f64>| x[1] - z_min),
        grad_h: Box::new(|_: &DVector<f64>| {
            RowDVector::from_vec(vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
        }),
        h_b: Box::new(move |x: &DVector<f64>| softmin_with_weights(&backup_members(x), KAPPA).0),
        grad_h_b: Box::new(move |x: &DVector<f64>| {
            let (_, w) = softmin_with_weights(&backup_members(x), KAPPA);
            let mut g = RowDVector::zeros(6);
            g[2] = w[1] * (-2.0 * x[2]);
            g[4] = w[0];
            g[5] = w[2] * (-2.0 * x[5]);
            g
        }),
        lipschitz_h: 1.0,
        lipschitz_hb,
    };

    Scenario {
        name: "quadrotor".into(),
        model,
        truth,
        backup,
        barriers,
        primary: Box::new(|_: &DVector<f64>| DVector::zeros(2)),
    }
}

/// Upper bound on `||grad h_b||` over the state domain, found by sweeping the
/// three coordinates the gradient depends on and inflating the grid maximum
/// to cover resolution error.
fn numeric_backup_lipschitz() -> f64 {
    let tmax = theta_max();
    let mut worst: f64 = 0.0;
    let steps = 60;
    for iv in 0..=steps {
        let vz = -15.0 + 30.0 * iv as f64 / steps as f64;
        for it in 0..=steps {
            let th = -PI + 2.0 * PI * it as f64 / steps as f64;
            for iw in 0..=steps {
                let om = -4.0 + 8.0 * iw as f64 / steps as f64;
                let members = [vz, tmax * tmax - th * th, THETA_DOT_MAX.powi(2) - om * om];
                let (_, w) = softmin_with_weights(&members, KAPPA);
                let norm =
                    (w[0] * w[0] + (2.0 * th * w[1]).powi(2) + (2.0 * om * w[2]).powi(2)).sqrt();
                worst = worst.max(norm);
            }
        }
    }
    worst * 1.05
}
