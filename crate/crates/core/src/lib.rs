//! Compositional safety for networked linear systems: robust control
//! invariant sets, assume-guarantee contracts between them, barrier-function
//! supervision and a contingency tube MPC, with a swing-equation grid model
//! to run them on.

// NaN-aware comparisons are written as negated orderings.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cbf;
pub mod contract;
pub mod grid;
pub mod optim;
pub mod polytope;
pub mod rci;
pub mod scenario;
pub mod stl;
pub mod tube_mpc;

mod serde_util;
