//! Deviation bounds between the predicted and the true backup flow.
//!
//! The prediction integrates `f_cl + d_hat` while the plant follows
//! `f_cl + d(t)`. With `||d(t) - d_hat|| <= delta_v tau + e_bar` along the
//! prediction window (estimate drift plus estimation error), a comparison
//! argument gives
//!
//! ```text
//! ||phi_true(tau) - phi_hat(tau)|| <= integral_0^tau e^{r (tau - s)} (delta_v s + e_bar) ds
//! ```
//!
//! where `r` is either a Lipschitz constant of `f_cl` (Gronwall) or an upper
//! bound on its 2-norm log-norm (tighter for contractive directions). The
//! integral has the closed form evaluated by [`delta_max`]; multiplying by
//! the barrier Lipschitz constants turns it into the constraint tightening.

use crate::error::Error;
use crate::flow::FlowGrid;
use crate::systems::{closed_loop_jacobian_raw, BackupPolicy, SystemModel};
use crate::Result;
use nalgebra::DMatrix;

/// Below this magnitude of the rate constant the closed form of
/// [`delta_max`] loses digits to cancellation and a series expansion in `r`
/// takes over.
const SERIES_SWITCH: f64 = 1e-8;

/// Safety factor applied on top of the sampled rate constant.
const RATE_INFLATION: f64 = 1.05;

/// How the flow-deviation rate constant is derived from the closed-loop
/// Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    /// Lipschitz constant, `max ||J||_2`. Always valid, often loose.
    Gronwall,
    /// Log-norm bound, `max lambda_max((J + J^T)/2)`. Never looser.
    LogNorm,
}

impl std::str::FromStr for BoundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gronwall" => Ok(BoundKind::Gronwall),
            "lognorm" => Ok(BoundKind::LogNorm),
            other => Err(Error::Config(format!("unknown bound kind '{other}'"))),
        }
    }
}

impl BoundKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundKind::Gronwall => "gronwall",
            BoundKind::LogNorm => "lognorm",
        }
    }
}

/// Everything needed to turn an estimation error envelope into margins.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub kind: BoundKind,
    /// Rate constant of the chosen kind, already inflated.
    pub rate: f64,
    /// Bound on the disturbance rate `||d'(t)||`.
    pub delta_v: f64,
    pub lipschitz_h: f64,
    pub lipschitz_hb: f64,
}

impl BoundParams {
    pub fn new(
        kind: BoundKind,
        rate: f64,
        delta_v: f64,
        lipschitz_h: f64,
        lipschitz_hb: f64,
    ) -> Result<Self> {
        if !rate.is_finite() {
            return Err(Error::Config(format!("rate constant must be finite, got {rate}")));
        }
        if !(delta_v >= 0.0) {
            return Err(Error::Config(format!("delta_v must be nonnegative, got {delta_v}")));
        }
        if !(lipschitz_h >= 0.0) || !(lipschitz_hb >= 0.0) {
            return Err(Error::Config("Lipschitz constants must be nonnegative".into()));
        }
        Ok(BoundParams { kind, rate, delta_v, lipschitz_h, lipschitz_hb })
    }
}

/// Instantaneous gap between true and assumed disturbance a time `tau` into
/// the prediction window: estimate drift plus the estimation error envelope.
pub fn deviation_bound(delta_v: f64, e_bar: f64, tau: f64) -> Result<f64> {
    if !(tau >= 0.0) || !(e_bar >= 0.0) || !(delta_v >= 0.0) {
        return Err(Error::Config(format!(
            "deviation bound needs nonnegative arguments, got delta_v={delta_v}, e_bar={e_bar}, tau={tau}"
        )));
    }
    Ok(delta_v * tau + e_bar)
}

/// Worst-case flow deviation `tau` into the window, for estimation error
/// envelope value `e_bar` at window start.
pub fn delta_max(params: &BoundParams, e_bar: f64, tau: f64) -> Result<f64> {
    if !(tau >= 0.0) || !(e_bar >= 0.0) {
        return Err(Error::Config(format!(
            "delta_max needs nonnegative e_bar and tau, got e_bar={e_bar}, tau={tau}"
        )));
    }
    let r = params.rate;
    let dv = params.delta_v;
    if r.abs() < SERIES_SWITCH {
        // Expansion of the integral in powers of r; truncation error is
        // O((r tau)^3) relative, far below rounding at the switch point.
        let t2 = tau * tau;
        let t3 = t2 * tau;
        let t4 = t3 * tau;
        Ok(e_bar * tau
            + dv * t2 / 2.0
            + r * (e_bar * t2 / 2.0 + dv * t3 / 6.0)
            + r * r * (e_bar * t3 / 6.0 + dv * t4 / 24.0))
    } else {
        let em1 = (r * tau).exp_m1();
        Ok((dv / (r * r) + e_bar / r) * em1 - dv * tau / r)
    }
}

/// Partial derivative of [`delta_max`] with respect to wall-clock time,
/// which enters only through the envelope: `d delta_max / dt = e_bar'(t)
/// (e^{r tau} - 1) / r`.
pub fn delta_max_time_derivative(params: &BoundParams, e_bar_dot: f64, tau: f64) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("delta_max derivative needs tau >= 0, got {tau}")));
    }
    let r = params.rate;
    if r.abs() < SERIES_SWITCH {
        Ok(e_bar_dot * (tau + r * tau * tau / 2.0 + r * r * tau * tau * tau / 6.0))
    } else {
        Ok(e_bar_dot * (r * tau).exp_m1() / r)
    }
}

/// 2-norm log-norm `lambda_max((A + A^T) / 2)`.
pub fn log_norm_2(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Spectral norm, the largest singular value.
pub fn spectral_norm_2(a: &DMatrix<f64>) -> f64 {
    a.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Samples the closed-loop Jacobian over the operating domain with a Halton
/// sequence and returns the inflated maximum of the requested matrix
/// measure. Deterministic for a given sample count.
pub fn estimate_rate_constant(
    model: &SystemModel,
    policy: &BackupPolicy,
    kind: BoundKind,
    samples: usize,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Config("rate estimation needs at least one sample".into()));
    }
    if model.n > HALTON_BASES.len() {
        return Err(Error::Unsupported(format!(
            "rate estimation supports up to {} state dimensions",
            HALTON_BASES.len()
        )));
    }
    let lo = &model.state_domain.lower;
    let hi = &model.state_domain.upper;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..samples {
        let mut x = lo.clone();
        for dim in 0..model.n {
            let u = halton(i + HALTON_SKIP, HALTON_BASES[dim]);
            x[dim] = lo[dim] + (hi[dim] - lo[dim]) * u;
        }
        let j = closed_loop_jacobian_raw(model, policy, &x);
        if j.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("closed-loop Jacobian during rate sampling".into()));
        }
        let measure = match kind {
            BoundKind::Gronwall => spectral_norm_2(&j),
            BoundKind::LogNorm => log_norm_2(&j),
        };
        worst = worst.max(measure);
    }
    Ok(worst * RATE_INFLATION)
}

const HALTON_BASES: [u64; 6] = [2, 3, 5, 7, 11, 13];
const HALTON_SKIP: usize = 32;

fn halton(index: usize, base: u64) -> f64 {
    let mut i = index as u64 + 1;
    let mut f = 1.0;
    let mut out = 0.0;
    while i > 0 {
        f /= base as f64;
        out += f * (i % base) as f64;
        i /= base;
    }
    out
}

/// Margins subtracted from the barriers at every grid node.
#[derive(Debug, Clone)]
pub struct TighteningSchedule {
    /// `eps_k = L_h delta_max(tau_k)` for every node.
    pub eps: Vec<f64>,
    /// Time derivative of `eps_k` through the envelope.
    pub eps_dot: Vec<f64>,
    /// Terminal margin `L_hb delta_max(horizon)`.
    pub eps_b: f64,
    pub eps_b_dot: f64,
}

/// Evaluates the tightening for the whole grid from the envelope value and
/// slope at the current time.
pub fn build_tightening(
    params: &BoundParams,
    grid: &FlowGrid,
    e_bar: f64,
    e_bar_dot: f64,
) -> Result<TighteningSchedule> {
    let mut eps = Vec::with_capacity(grid.node_count());
    let mut eps_dot = Vec::with_capacity(grid.node_count());
    for &tau in grid.taus() {
        eps.push(params.lipschitz_h * delta_max(params, e_bar, tau)?);
        eps_dot.push(params.lipschitz_h * delta_max_time_derivative(params, e_bar_dot, tau)?);
    }
    let horizon = grid.horizon();
    let eps_b = params.lipschitz_hb * delta_max(params, e_bar, horizon)?;
    let eps_b_dot = params.lipschitz_hb * delta_max_time_derivative(params, e_bar_dot, horizon)?;
    Ok(TighteningSchedule { eps, eps_dot, eps_b, eps_b_dot })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{error_bound, error_bound_derivative, ErrorBoundModel};
    use crate::systems::{make_double_integrator, make_planar_quadrotor};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(kind: BoundKind, rate: f64, delta_v: f64) -> BoundParams {
        BoundParams::new(kind, rate, delta_v, 1.0, 1.0).unwrap()
    }

    #[test]
    fn deviation_bound_hand_value() {
        assert_relative_eq!(deviation_bound(0.016, 0.02, 2.0).unwrap(), 0.052, epsilon = 1e-15);
        assert!(deviation_bound(0.1, -0.1, 1.0).is_err());
    }

    #[test]
    fn delta_max_vanishes_at_zero_window() {
        for r in [-2.0, -1e-9, 0.0, 1e-9, 2.0] {
            let p = params(BoundKind::Gronwall, r, 0.3);
            assert_eq!(delta_max(&p, 0.5, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn delta_max_hand_values() {
        // Pure envelope, unit rate: e_bar (e^tau - 1).
        let p = params(BoundKind::Gronwall, 1.0, 0.0);
        assert_relative_eq!(
            delta_max(&p, 0.08, 1.0).unwrap(),
            0.1374625462767236,
            max_relative = 1e-14
        );
        // Mixed drift and envelope.
        let p = params(BoundKind::Gronwall, 0.5, 0.1);
        assert_relative_eq!(
            delta_max(&p, 0.05, 2.0).unwrap(),
            0.4591409142295226,
            max_relative = 1e-13
        );
        // Zero rate reduces to the double integral of the deviation.
        let p = params(BoundKind::Gronwall, 0.0, 0.1);
        assert_relative_eq!(
            delta_max(&p, 0.05, 2.0).unwrap(),
            0.05 * 2.0 + 0.1 * 2.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn delta_max_is_monotone_in_the_rate_across_the_series_switch() {
        let rates = [
            -1e-2, -1e-5, -3e-8, -1.2e-8, -9e-9, -1e-12, 0.0, 1e-12, 9e-9, 1.2e-8, 3e-8, 1e-5,
            1e-2, 0.5, 2.0,
        ];
        // Just outside the series switch the closed form cancels two terms
        // of size delta_v tau / |r|, leaving absolute noise near 3e-9; the
        // monotonicity margin must absorb that.
        let mut prev = f64::NEG_INFINITY;
        for r in rates {
            let p = params(BoundKind::Gronwall, r, 0.08);
            let v = delta_max(&p, 0.03, 1.7).unwrap();
            assert!(v >= prev - 5e-9, "delta_max not monotone at r={r}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn delta_max_series_agrees_with_closed_form_at_the_switch() {
        for sign in [-1.0, 1.0] {
            let below = params(BoundKind::Gronwall, sign * 0.99e-8, 0.08);
            let above = params(BoundKind::Gronwall, sign * 1.01e-8, 0.08);
            let a = delta_max(&below, 0.05, 2.0).unwrap();
            let b = delta_max(&above, 0.05, 2.0).unwrap();
            assert_relative_eq!(a, b, max_relative = 1e-7);
        }
    }

    #[test]
    fn delta_max_is_monotone_in_the_window() {
        let p = params(BoundKind::LogNorm, -0.8, 0.05);
        let mut prev = -1.0;
        for k in 0..=40 {
            let v = delta_max(&p, 0.02, 0.05 * k as f64).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn time_derivative_matches_finite_difference_through_the_envelope() {
        let em = ErrorBoundModel::new(crate::estimator::EstimatorKind::Observer, 2.0, 0.08, 0.016)
            .unwrap();
        for r in [-0.7, 0.0, 1e-10, 0.9] {
            let p = params(BoundKind::Gronwall, r, 0.016);
            for t in [0.1, 0.6, 2.5] {
                for tau in [0.3, 1.0, 2.0] {
                    let eps = 1e-6;
                    let up = delta_max(&p, error_bound(&em, t + eps).unwrap(), tau).unwrap();
                    let dn = delta_max(&p, error_bound(&em, t - eps).unwrap(), tau).unwrap();
                    let fd = (up - dn) / (2.0 * eps);
                    let an =
                        delta_max_time_derivative(&p, error_bound_derivative(&em, t).unwrap(), tau)
                            .unwrap();
                    assert_relative_eq!(an, fd, max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn log_norm_hand_values() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_relative_eq!(log_norm_2(&a), 0.5, epsilon = 1e-12);
        assert_relative_eq!(spectral_norm_2(&a), 1.0, epsilon = 1e-12);
        let id: DMatrix<f64> = DMatrix::identity(3, 3);
        assert_relative_eq!(log_norm_2(&(-1.0 * &id)), -1.0, epsilon = 1e-12);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, -7.0]));
        assert_relative_eq!(log_norm_2(&d), 3.0, epsilon = 1e-12);
        assert_relative_eq!(spectral_norm_2(&d), 7.0, epsilon = 1e-12);
    }

    /// Dense Taylor evaluation of `exp(A)` with scaling and squaring; test
    /// oracle only.
    fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let norm = spectral_norm_2(a);
        let s = (norm.log2().ceil().max(0.0) as i32 + 4) as u32;
        let b = a / 2f64.powi(s as i32);
        let n = a.nrows();
        let mut term: DMatrix<f64> = DMatrix::identity(n, n);
        let mut sum = term.clone();
        for k in 1..=20 {
            term = &term * &b / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn log_norm_dominates_transition_matrix_growth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.5..=1.5));
            let mu = log_norm_2(&a);
            let lip = spectral_norm_2(&a);
            assert!(mu <= lip + 1e-12);
            for tau in [0.3, 1.0, 2.2] {
                let growth = spectral_norm_2(&expm(&(&a * tau)));
                assert!(
                    growth <= (mu * tau).exp() * (1.0 + 1e-9),
                    "||e^(A tau)|| = {growth} exceeds e^(mu tau) = {}",
                    (mu * tau).exp()
                );
            }
        }
    }

    #[test]
    fn rate_constants_for_the_double_integrator_are_exact() {
        // The closed-loop Jacobian is the constant [[0,1],[0,0]]; its
        // spectral norm is 1 and its log-norm 1/2, each inflated by 5%.
        let sc = make_double_integrator(0.0);
        let g = estimate_rate_constant(&sc.model, &sc.backup, BoundKind::Gronwall, 64).unwrap();
        let l = estimate_rate_constant(&sc.model, &sc.backup, BoundKind::LogNorm, 64).unwrap();
        assert_relative_eq!(g, 1.05, epsilon = 1e-12);
        assert_relative_eq!(l, 0.525, epsilon = 1e-12);
    }

    #[test]
    fn quadrotor_rate_constants_are_ordered_and_stable() {
        let sc = make_planar_quadrotor();
        let g = estimate_rate_constant(&sc.model, &sc.backup, BoundKind::Gronwall, 512).unwrap();
        let l = estimate_rate_constant(&sc.model, &sc.backup, BoundKind::LogNorm, 512).unwrap();
        assert!(l <= g + 1e-12, "log-norm rate {l} above Lipschitz rate {g}");
        assert!((9.0..14.0).contains(&l), "log-norm rate {l} outside expected band");
        // Deterministic sampling: same inputs, same constant.
        let l2 = estimate_rate_constant(&sc.model, &sc.backup, BoundKind::LogNorm, 512).unwrap();
        assert_eq!(l, l2);
    }

    #[test]
    fn lognorm_bound_never_exceeds_gronwall_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let rate_l: f64 = rng.random_range(-2.0..=2.0);
            let rate_g: f64 = rate_l.abs() + rng.random_range(0.0..=1.0);
            let dv = rng.random_range(0.0..=0.2);
            let eb = rng.random_range(0.0..=0.2);
            let tau = rng.random_range(0.0..=2.0);
            let pl = params(BoundKind::LogNorm, rate_l, dv);
            let pg = params(BoundKind::Gronwall, rate_g, dv);
            let dl = delta_max(&pl, eb, tau).unwrap();
            let dg = delta_max(&pg, eb, tau).unwrap();
            assert!(dl <= dg * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn tightening_schedule_scales_deviation_by_lipschitz_constants() {
        let grid = FlowGrid::new(2.0, 0.1).unwrap();
        let p = BoundParams::new(BoundKind::Gronwall, 1.05, 0.016, 1.0, 2.5).unwrap();
        let s = build_tightening(&p, &grid, 0.05, -0.03).unwrap();
        assert_eq!(s.eps.len(), grid.node_count());
        assert_eq!(s.eps[0], 0.0);
        for k in 1..s.eps.len() {
            assert!(s.eps[k] > s.eps[k - 1]);
        }
        let horizon_dev = delta_max(&p, 0.05, 2.0).unwrap();
        assert_relative_eq!(s.eps_b, 2.5 * horizon_dev, epsilon = 1e-14);
        assert_relative_eq!(*s.eps.last().unwrap(), horizon_dev, epsilon = 1e-14);
        assert!(s.eps_b_dot < 0.0, "shrinking envelope must relax the margin");
    }
}
