//! Dense linear and convex quadratic programming.
//!
//! Both solvers are pure functions over immutable problem values and carry no
//! global state, so they can be called from many threads at once.

mod lp;
mod qp;

pub use lp::solve_lp;
pub use qp::solve_qp;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Primal feasibility tolerance.
pub const FEAS_TOL: f64 = 1e-8;
/// Reduced-cost / stationarity tolerance.
pub const OPT_TOL: f64 = 1e-8;
/// Pivot elements below this magnitude are treated as zero.
pub const PIVOT_TOL: f64 = 1e-11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("simplex failed to terminate after {0} pivots")]
    Degenerate(usize),
    #[error("quadratic term is not positive semidefinite (min pivot {0:e})")]
    NotPsd(f64),
    #[error("quadratic program is infeasible (constraint {constraint})")]
    Infeasible { constraint: usize },
    #[error("quadratic term is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Lagrange multipliers in the convention
/// `c + A_ubᵀ·ineq + A_eqᵀ·eq − lower + upper = 0` (LP) or
/// `H·x + g + A_ubᵀ·ineq + A_eqᵀ·eq = 0` (QP), with `ineq, lower, upper ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub ineq: DVector<f64>,
    pub eq: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Duals {
    fn zeros(n_ub: usize, n_eq: usize, n: usize) -> Self {
        Self {
            ineq: DVector::zeros(n_ub),
            eq: DVector::zeros(n_eq),
            lower: DVector::zeros(n),
            upper: DVector::zeros(n),
        }
    }
}

/// Proof that an LP has no optimum.
#[derive(Debug, Clone, PartialEq)]
pub enum Certificate {
    /// Multipliers with `A_ubᵀλ + A_eqᵀν − z_l + z_u = 0` and
    /// `b_ubᵀλ + b_eqᵀν − lᵀz_l + uᵀz_u < 0`.
    Farkas(Duals),
    /// Direction `d` that keeps every feasible point feasible with `cᵀd < 0`.
    Ray(DVector<f64>),
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub status: Status,
    pub point: DVector<f64>,
    pub value: f64,
    pub duals: Duals,
    pub certificate: Option<Certificate>,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }
}

/// `min cᵀx  s.t.  A_ub·x ≤ b_ub,  A_eq·x = b_eq,  lower ≤ x ≤ upper`.
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub objective: DVector<f64>,
    pub a_ub: DMatrix<f64>,
    pub b_ub: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl LpProblem {
    /// Unconstrained problem with free variables.
    pub fn new(objective: DVector<f64>) -> Self {
        let n = objective.len();
        Self {
            objective,
            a_ub: DMatrix::zeros(0, n),
            b_ub: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_ub(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_ub = a;
        self.b_ub = b;
        self
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    fn validate(&self) -> Result<(), OptimError> {
        let n = self.num_vars();
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(OptimError::DimensionMismatch(what.to_string()))
            }
        };
        check(self.a_ub.ncols() == n, "A_ub columns")?;
        check(self.a_ub.nrows() == self.b_ub.len(), "A_ub rows vs b_ub")?;
        check(self.a_eq.ncols() == n, "A_eq columns")?;
        check(self.a_eq.nrows() == self.b_eq.len(), "A_eq rows vs b_eq")?;
        check(self.lower.len() == n && self.upper.len() == n, "bounds length")?;
        check(
            self.b_ub.iter().chain(self.b_eq.iter()).all(|v| v.is_finite()),
            "non-finite right-hand side",
        )?;
        check(self.objective.iter().all(|v| v.is_finite()), "non-finite objective")
    }
}

/// `min ½xᵀHx + gᵀx  s.t.  A_ub·x ≤ b_ub,  A_eq·x = b_eq`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub a_ub: DMatrix<f64>,
    pub b_ub: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl QpProblem {
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            a_ub: DMatrix::zeros(0, n),
            b_ub: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
        }
    }

    pub fn with_ub(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_ub = a;
        self.b_ub = b;
        self
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    fn validate(&self) -> Result<(), OptimError> {
        let n = self.num_vars();
        let dim = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(OptimError::DimensionMismatch(what.to_string()))
            }
        };
        dim(self.hessian.nrows() == n && self.hessian.ncols() == n, "hessian shape")?;
        dim(self.a_ub.ncols() == n, "A_ub columns")?;
        dim(self.a_ub.nrows() == self.b_ub.len(), "A_ub rows vs b_ub")?;
        dim(self.a_eq.ncols() == n, "A_eq columns")?;
        dim(self.a_eq.nrows() == self.b_eq.len(), "A_eq rows vs b_eq")?;
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-10 {
            return Err(OptimError::NotSymmetric(asym));
        }
        Ok(())
    }
}

/// Largest violation of `A_ub·x ≤ b_ub` and `A_eq·x = b_eq`.
pub fn primal_residual(
    a_ub: &DMatrix<f64>,
    b_ub: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    x: &DVector<f64>,
) -> f64 {
    let ub = (a_ub * x - b_ub).iter().fold(0.0_f64, |m, v| m.max(*v));
    let eq = (a_eq * x - b_eq).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    ub.max(eq)
}
