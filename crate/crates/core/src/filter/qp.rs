//! Dense min-norm quadratic program over box-bounded inputs.
//!
//! Solves `min ||u - u_des||^2` subject to `a_i u >= b_i` and
//! `lower <= u <= upper` with a primal active-set method. The box is folded
//! into the constraint list, so the working set is a plain index set over an
//! extended row list: user rows first, then `m` lower bounds, then `m` upper
//! bounds.
//!
//! Multipliers follow the convention `u - u_des = (1/2) sum_i mu_i a_i`,
//! `mu_i >= 0`, which makes the stationarity residual directly comparable
//! across problems.
//!
//! Infeasibility is decided by a derivative-free phase-1 search that
//! minimizes the worst constraint violation over the box (multiscale grid
//! plus alternating projections). It is deliberately conservative: a
//! borderline feasible set can be reported infeasible, which the safety
//! filter answers by engaging the backup policy.

use crate::error::Error;
use crate::Result;
use nalgebra::{DMatrix, DVector, RowDVector};

const MAX_ITERS: usize = 500;
const FEAS_TOL: f64 = 1e-9;
const STEP_TOL: f64 = 1e-11;
const MULT_TOL: f64 = 1e-11;
/// Rows with a smaller gradient are treated as state-only facts: satisfied
/// if `b <= 0`, otherwise an immediate infeasibility certificate.
const VACUOUS_NORM: f64 = 1e-12;

/// Where a constraint row came from, for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowLabel {
    /// Safety constraint at flow grid node `k`.
    Node(usize),
    /// Terminal backup-set constraint.
    Terminal,
    /// Anything else (tests, ad hoc problems).
    Generic,
}

/// One linear inequality `a u >= b`.
#[derive(Debug, Clone)]
pub struct ConstraintRow {
    pub a: RowDVector<f64>,
    pub b: f64,
    pub label: RowLabel,
}

impl ConstraintRow {
    pub fn new(a: RowDVector<f64>, b: f64, label: RowLabel) -> Self {
        ConstraintRow { a, b, label }
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub u_des: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub rows: Vec<ConstraintRow>,
}

impl QpProblem {
    /// Total rows in the extended system: user rows plus both box faces.
    pub fn extended_row_count(&self) -> usize {
        self.rows.len() + 2 * self.u_des.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

/// Certificate for an infeasible problem: the extended row with the largest
/// violation at the least-infeasible point found.
#[derive(Debug, Clone, Copy)]
pub struct Infeasibility {
    pub row: usize,
    pub violation: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub u: DVector<f64>,
    /// Extended row indices active at the solution.
    pub active_set: Vec<usize>,
    /// One multiplier per extended row; zero off the active set.
    pub multipliers: Vec<f64>,
    /// Worst violation among stationarity, primal feasibility, dual
    /// feasibility, and complementary slackness. `NaN` when infeasible.
    pub kkt_residual: f64,
    pub certificate: Option<Infeasibility>,
    pub iterations: usize,
}

struct ExtRow {
    a: RowDVector<f64>,
    b: f64,
    vacuous: bool,
}

fn dot(a: &RowDVector<f64>, u: &DVector<f64>) -> f64 {
    a.iter().zip(u.iter()).map(|(x, y)| x * y).sum()
}

fn clamp_to_box(u: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(u.len(), |i, _| u[i].clamp(lower[i], upper[i]))
}

fn validate(p: &QpProblem) -> Result<usize> {
    let m = p.u_des.len();
    if m == 0 {
        return Err(Error::Config("QP needs at least one input".into()));
    }
    if p.lower.len() != m || p.upper.len() != m {
        return Err(Error::Config("QP box dimensions disagree with the input".into()));
    }
    for i in 0..m {
        if !(p.lower[i] < p.upper[i]) {
            return Err(Error::Config(format!("QP box is empty or degenerate on component {i}")));
        }
    }
    if p.u_des.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("QP target input".into()));
    }
    for (i, row) in p.rows.iter().enumerate() {
        if row.a.len() != m {
            return Err(Error::Config(format!("constraint row {i} has wrong width")));
        }
        if row.a.iter().any(|v| !v.is_finite()) || !row.b.is_finite() {
            return Err(Error::NonFinite(format!("constraint row {i}")));
        }
    }
    Ok(m)
}

fn build_extended(p: &QpProblem, m: usize) -> Vec<ExtRow> {
    let mut out = Vec::with_capacity(p.rows.len() + 2 * m);
    for row in &p.rows {
        let vacuous = row.a.norm() < VACUOUS_NORM;
        out.push(ExtRow { a: row.a.clone(), b: row.b, vacuous });
    }
    for i in 0..m {
        let mut a = RowDVector::zeros(m);
        a[i] = 1.0;
        out.push(ExtRow { a, b: p.lower[i], vacuous: false });
    }
    for i in 0..m {
        let mut a = RowDVector::zeros(m);
        a[i] = -1.0;
        out.push(ExtRow { a, b: -p.upper[i], vacuous: false });
    }
    out
}

fn max_violation(ext: &[ExtRow], u: &DVector<f64>) -> (usize, f64) {
    let mut worst = (0usize, f64::NEG_INFINITY);
    for (i, row) in ext.iter().enumerate() {
        let v = if row.vacuous { row.b } else { row.b - dot(&row.a, u) };
        if v > worst.1 {
            worst = (i, v);
        }
    }
    worst
}

/// Solves the QP cold.
pub fn solve_qp(p: &QpProblem) -> Result<QpSolution> {
    solve_qp_warm(p, None)
}

/// Solves the QP, optionally warm-starting from a previous solution of a
/// structurally identical problem (same row count and meaning).
pub fn solve_qp_warm(p: &QpProblem, warm: Option<&QpSolution>) -> Result<QpSolution> {
    let m = validate(p)?;
    let ext = build_extended(p, m);

    // A gradient-free row constrains nothing; positive demand is a
    // ready-made infeasibility certificate.
    for (i, row) in ext.iter().enumerate() {
        if row.vacuous && row.b > 0.0 {
            return Ok(infeasible_solution(
                &ext,
                clamp_to_box(&p.u_des, &p.lower, &p.upper),
                i,
                row.b,
            ));
        }
    }

    let feasible_at = |u: &DVector<f64>| -> bool {
        ext.iter().all(|r| r.vacuous || dot(&r.a, u) - r.b >= -FEAS_TOL)
    };

    let mut working: Vec<usize> = Vec::new();
    let mut u = match warm {
        Some(w)
            if w.status == QpStatus::Optimal
                && w.u.len() == m
                && w.u.iter().all(|v| v.is_finite())
                && feasible_at(&w.u) =>
        {
            // Re-verify the inherited active set against the new data.
            for &i in &w.active_set {
                if i < ext.len()
                    && !ext[i].vacuous
                    && (dot(&ext[i].a, &w.u) - ext[i].b).abs() <= 1e-7
                    && working.len() < m
                {
                    working.push(i);
                }
            }
            w.u.clone()
        }
        _ => {
            let clamped = clamp_to_box(&p.u_des, &p.lower, &p.upper);
            if feasible_at(&clamped) {
                clamped
            } else {
                let (u0, viol, worst_row) = phase1(&ext, &p.lower, &p.upper, m)?;
                if viol > FEAS_TOL {
                    return Ok(infeasible_solution(&ext, u0, worst_row, viol));
                }
                u0
            }
        }
    };

    let mut iterations = 0usize;
    loop {
        iterations += 1;
        if iterations > MAX_ITERS {
            return Err(Error::SolverStalled(MAX_ITERS));
        }

        // Minimizer on the affine set fixed by the working rows:
        // u_eq = u_des + A^T lam, (A A^T) lam = b_W - A u_des.
        let (u_eq, lam) = if working.is_empty() {
            (p.u_des.clone(), DVector::zeros(0))
        } else {
            let rows: Vec<RowDVector<f64>> = working.iter().map(|&i| ext[i].a.clone()).collect();
            let a_mat = DMatrix::from_rows(&rows);
            let rhs = DVector::from_fn(working.len(), |k, _| ext[working[k]].b) - &a_mat * &p.u_des;
            let gram = &a_mat * a_mat.transpose();
            match gram.lu().solve(&rhs) {
                Some(lam) => (&p.u_des + a_mat.transpose() * &lam, lam),
                None => {
                    // Numerically dependent set; retire the newest row.
                    working.pop();
                    continue;
                }
            }
        };

        let step = &u_eq - &u;
        if step.norm() <= STEP_TOL * (1.0 + u_eq.norm()) {
            // Converged on this face; check multiplier signs.
            let mut drop = None;
            let mut most_negative = -MULT_TOL;
            for (k, &l) in lam.iter().enumerate() {
                if l < most_negative {
                    most_negative = l;
                    drop = Some(k);
                }
            }
            match drop {
                Some(k) => {
                    working.remove(k);
                }
                None => return Ok(optimal_solution(p, &ext, u_eq, &working, &lam, iterations)),
            }
            continue;
        }

        // Step toward u_eq, stopping at the first blocking row.
        let mut alpha = 1.0f64;
        let mut blocker = None;
        let step_norm = step.norm();
        for (i, row) in ext.iter().enumerate() {
            if row.vacuous || working.contains(&i) {
                continue;
            }
            let s = dot(&row.a, &step);
            if s < -1e-13 * (1.0 + row.a.norm() * step_norm) {
                let resid = dot(&row.a, &u) - row.b;
                let cut = (resid / -s).max(0.0);
                if cut < alpha {
                    alpha = cut;
                    blocker = Some(i);
                }
            }
        }
        u += step * alpha;
        if let Some(i) = blocker {
            if alpha < 1.0 {
                if working.len() == m {
                    // A full working set admits no motion, so a blocking
                    // row can only appear through rounding; make room.
                    working.remove(0);
                }
                working.push(i);
            }
        }
    }
}

fn infeasible_solution(ext: &[ExtRow], u: DVector<f64>, row: usize, violation: f64) -> QpSolution {
    QpSolution {
        status: QpStatus::Infeasible,
        u,
        active_set: Vec::new(),
        multipliers: vec![0.0; ext.len()],
        kkt_residual: f64::NAN,
        certificate: Some(Infeasibility { row, violation }),
        iterations: 0,
    }
}

fn optimal_solution(
    p: &QpProblem,
    ext: &[ExtRow],
    u: DVector<f64>,
    working: &[usize],
    lam: &DVector<f64>,
    iterations: usize,
) -> QpSolution {
    let mut multipliers = vec![0.0; ext.len()];
    for (k, &i) in working.iter().enumerate() {
        multipliers[i] = (2.0 * lam[k]).max(0.0);
    }

    // Stationarity residual under u - u_des = (1/2) sum mu_i a_i.
    let mut stat = &u - &p.u_des;
    for (i, row) in ext.iter().enumerate() {
        if multipliers[i] != 0.0 {
            stat -= row.a.transpose() * (0.5 * multipliers[i]);
        }
    }
    let mut kkt = stat.amax();
    for (i, row) in ext.iter().enumerate() {
        let resid = if row.vacuous { -row.b } else { dot(&row.a, &u) - row.b };
        kkt = kkt.max(-resid.min(0.0)); // primal violation
        kkt = kkt.max((multipliers[i] * resid).abs()); // complementary slackness
    }

    QpSolution {
        status: QpStatus::Optimal,
        u,
        active_set: working.to_vec(),
        multipliers,
        kkt_residual: kkt,
        certificate: None,
        iterations,
    }
}

/// Derivative-free search for a feasible point: minimize the worst row
/// violation over the box. Returns the best point, its worst violation, and
/// the extended index of the worst row there.
fn phase1(
    ext: &[ExtRow],
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    m: usize,
) -> Result<(DVector<f64>, f64, usize)> {
    let violation = |u: &DVector<f64>| -> f64 {
        ext.iter()
            .map(|r| if r.vacuous { r.b } else { r.b - dot(&r.a, u) })
            .fold(f64::NEG_INFINITY, f64::max)
    };

    let mut best = DVector::from_fn(m, |i, _| 0.5 * (lower[i] + upper[i]));
    let mut best_v = violation(&best);

    match m {
        1 => {
            let mut center = best[0];
            let mut hw = 0.5 * (upper[0] - lower[0]);
            for _ in 0..18 {
                let pts = 65;
                for k in 0..=pts {
                    let x =
                        (center - hw + 2.0 * hw * k as f64 / pts as f64).clamp(lower[0], upper[0]);
                    let u = DVector::from_element(1, x);
                    let v = violation(&u);
                    if v < best_v {
                        best_v = v;
                        best = u;
                    }
                }
                center = best[0];
                hw *= 0.35;
            }
        }
        2 => {
            let mut center = best.clone();
            let mut hw = DVector::from_fn(2, |i, _| 0.5 * (upper[i] - lower[i]));
            for _ in 0..22 {
                let pts = 16;
                for kx in 0..=pts {
                    for ky in 0..=pts {
                        let x = (center[0] - hw[0] + 2.0 * hw[0] * kx as f64 / pts as f64)
                            .clamp(lower[0], upper[0]);
                        let y = (center[1] - hw[1] + 2.0 * hw[1] * ky as f64 / pts as f64)
                            .clamp(lower[1], upper[1]);
                        let u = DVector::from_vec(vec![x, y]);
                        let v = violation(&u);
                        if v < best_v {
                            best_v = v;
                            best = u;
                        }
                    }
                }
                center = best.clone();
                hw *= 0.45;
            }
        }
        _ => {
            // Cyclic coordinate descent on the minimax objective.
            for _ in 0..40 {
                for dim in 0..m {
                    let mut center = best[dim];
                    let mut hw = 0.5 * (upper[dim] - lower[dim]);
                    for _ in 0..12 {
                        let pts = 32;
                        for k in 0..=pts {
                            let x = (center - hw + 2.0 * hw * k as f64 / pts as f64)
                                .clamp(lower[dim], upper[dim]);
                            let mut u = best.clone();
                            u[dim] = x;
                            let v = violation(&u);
                            if v < best_v {
                                best_v = v;
                                best = u;
                            }
                        }
                        center = best[dim];
                        hw *= 0.4;
                    }
                }
            }
        }
    }

    // Alternating projections polish: grids resolve coarse geometry, this
    // closes the last few orders of magnitude when the set is nonempty.
    if best_v > 0.0 {
        let mut u = best.clone();
        for _ in 0..400 {
            let (row, v) = max_violation(ext, &u);
            if v <= 0.0 {
                break;
            }
            let a = &ext[row].a;
            let nn = a.norm_squared();
            if nn < VACUOUS_NORM {
                break;
            }
            u += a.transpose() * (v / nn);
            u = clamp_to_box(&u, lower, upper);
            let vu = violation(&u);
            if vu < best_v {
                best_v = vu;
                best = u.clone();
            }
        }
    }

    let (worst_row, v) = max_violation(ext, &best);
    Ok((best, v, worst_row))
}

/// Result of the sampling oracle.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub feasible: bool,
    pub u: DVector<f64>,
    pub objective: f64,
    /// Cell size of the final refinement round, per axis maximum.
    pub resolution: f64,
}

/// Brute-force reference: multiscale grid search over the box keeping the
/// best feasible sample. Only pure sampling, no solver machinery, so it can
/// arbitrate disagreements. Supports one- and two-input problems.
pub fn qp_brute_oracle(p: &QpProblem, pts_per_axis: usize, rounds: usize) -> Result<OracleResult> {
    let m = validate(p)?;
    if m > 2 {
        return Err(Error::Unsupported("oracle handles at most two inputs".into()));
    }
    if pts_per_axis < 3 || rounds == 0 {
        return Err(Error::Config("oracle needs at least 3 points and 1 round".into()));
    }
    let feasible = |u: &DVector<f64>| -> bool {
        p.rows.iter().all(|r| {
            if r.a.norm() < VACUOUS_NORM {
                r.b <= 0.0
            } else {
                dot(&r.a, u) - r.b >= -1e-12
            }
        })
    };

    let mut center = DVector::from_fn(m, |i, _| 0.5 * (p.lower[i] + p.upper[i]));
    let mut hw = DVector::from_fn(m, |i, _| 0.5 * (p.upper[i] - p.lower[i]));
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut resolution = f64::INFINITY;

    for round in 0..rounds {
        resolution = (0..m).map(|i| 2.0 * hw[i] / (pts_per_axis - 1) as f64).fold(0.0, f64::max);
        let axis_pts = |i: usize, k: usize| -> f64 {
            (center[i] - hw[i] + 2.0 * hw[i] * k as f64 / (pts_per_axis - 1) as f64)
                .clamp(p.lower[i], p.upper[i])
        };
        let mut consider = |u: DVector<f64>| {
            if feasible(&u) {
                let obj = (&u - &p.u_des).norm_squared();
                if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                    best = Some((u, obj));
                }
            }
        };
        if m == 1 {
            for k in 0..pts_per_axis {
                consider(DVector::from_element(1, axis_pts(0, k)));
            }
        } else {
            for kx in 0..pts_per_axis {
                for ky in 0..pts_per_axis {
                    consider(DVector::from_vec(vec![axis_pts(0, kx), axis_pts(1, ky)]));
                }
            }
        }
        match &best {
            Some((u, _)) => {
                center = u.clone();
                hw *= 0.5;
            }
            None if round == 0 => {
                // Full-box sweep found nothing; no point refining.
                break;
            }
            None => unreachable!("best cannot disappear between rounds"),
        }
    }

    Ok(match best {
        Some((u, objective)) => OracleResult { feasible: true, u, objective, resolution },
        None => OracleResult {
            feasible: false,
            u: clamp_to_box(&p.u_des, &p.lower, &p.upper),
            objective: f64::INFINITY,
            resolution,
        },
    })
}
