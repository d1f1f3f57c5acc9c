//! Safety filtering for disturbed control-affine systems via backup control
//! barrier functions, with an online disturbance observer that shrinks the
//! constraint tightening as its estimation error bound decays.
//!
//! The crate is organized around one pipeline, executed once per control step:
//!
//! 1. [`flow::integrate_flow_bundle`] rolls the closed-loop backup dynamics
//!    forward from the current state under the frozen disturbance estimate,
//!    carrying first-order sensitivities to the initial state and to the
//!    estimate itself.
//! 2. [`bounds::build_tightening`] converts the observer's error bound into a
//!    margin schedule over the backup horizon (Gronwall or log-norm flavored).
//! 3. [`filter::build_constraints`] turns flow, sensitivities, and margins
//!    into linear input constraints, and [`filter::solve_qp`] projects the
//!    primary controller onto them.
//! 4. If the program is infeasible the backup policy is applied verbatim, so
//!    the loop always produces an admissible input.
//!
//! [`sim`] closes the loop against simulated truth, [`verify`] runs the Monte
//! Carlo suites that check the implemented bounds against independently
//! integrated flows, and [`io`] writes the run records as CSV and SVG.

// Guards are written as negated comparisons on purpose: `!(x > 0.0)` also
// rejects NaN, which the suggested `partial_cmp` rewrite would quietly pass.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod bounds;
pub mod config;
pub mod error;
pub mod estimator;
pub mod filter;
pub mod flow;
pub mod io;
pub mod sim;
pub mod systems;
pub mod verify;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
