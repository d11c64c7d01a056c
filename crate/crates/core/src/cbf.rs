//! Polytopic discrete-time barrier functions and the minimally invasive
//! supervisor built on them.
//!
//! For `C = {x | P x ≤ q}` with `q > 0`, `h(x) = min_k (q_k − P_k x)/q_k`.
//! The supervisor keeps `h(x⁺) ≥ α h(x)` for every admissible unmeasured
//! disturbance while staying as close as possible to a legacy input.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{solve_qp, OptimError, QpProblem};
use crate::polytope::{Polytope, PolytopeError};
use crate::rci::LinearSubsystem;

/// Slack below which `u0` is still accepted unchanged.
const FEASIBILITY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CbfError {
    #[error("barrier offsets must be positive (row {0})")]
    NonPositiveOffset(usize),
    #[error("class-K coefficient {0} outside [0, 1)")]
    BadAlpha(f64),
    #[error("no admissible input keeps the state certified (row {row})")]
    SupervisionInfeasible { row: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Solver(#[from] OptimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierFunction {
    pub set: Polytope,
    /// `γ(s) = α s`.
    pub alpha: f64,
}

impl BarrierFunction {
    pub fn new(set: Polytope, alpha: f64) -> Result<Self, CbfError> {
        if let Some(k) = set.offsets().iter().position(|v| !(*v > 0.0)) {
            return Err(CbfError::NonPositiveOffset(k));
        }
        if !(0.0..1.0).contains(&alpha) {
            return Err(CbfError::BadAlpha(alpha));
        }
        Ok(Self { set, alpha })
    }
}

pub fn h_value(b: &BarrierFunction, x: &DVector<f64>) -> f64 {
    let px = b.set.normals() * x;
    px.iter().zip(b.set.offsets().iter()).map(|(p, q)| (q - p) / q).fold(f64::INFINITY, f64::min)
}

/// Everything the per-bus supervisor needs besides the current signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supervisor {
    pub barrier: BarrierFunction,
    pub sys: LinearSubsystem,
    /// Box bound on the unmeasured disturbance.
    #[serde(with = "crate::serde_util::vector")]
    pub w_u_max: DVector<f64>,
    pub input: Polytope,
    /// Allowed violation of the barrier rows, matching the certification
    /// tolerance of the set.
    #[serde(default)]
    pub tolerance: f64,
}

impl Supervisor {
    pub fn new(
        barrier: BarrierFunction,
        sys: LinearSubsystem,
        w_u_max: DVector<f64>,
        input: Polytope,
    ) -> Result<Self, CbfError> {
        let n = sys.states();
        if barrier.set.dim() != n || w_u_max.len() != n || input.dim() != sys.inputs() {
            return Err(CbfError::DimensionMismatch("barrier, disturbance or input set".into()));
        }
        Ok(Self { barrier, sys, w_u_max, input, tolerance: 0.0 })
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    /// Barrier rows as `G u ≤ r`, followed by the input rows.
    fn constraints(&self, x: &DVector<f64>, w_m: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.barrier.set.normals();
        let q = self.barrier.set.offsets();
        let h = h_value(&self.barrier, x);
        let drift = &self.sys.a * x + self.sys.e() * w_m;
        let pd = p * drift;
        let worst = p.abs() * &self.w_u_max;
        let rows = p.nrows();
        let ui = self.input.num_rows();
        let mut g = DMatrix::zeros(rows + ui, self.sys.inputs());
        g.rows_mut(0, rows).copy_from(&(p * &self.sys.b));
        g.rows_mut(rows, ui).copy_from(self.input.normals());
        let mut r = DVector::zeros(rows + ui);
        for k in 0..rows {
            r[k] = q[k] * (1.0 - self.barrier.alpha * h) - pd[k] - worst[k] + self.tolerance;
        }
        r.rows_mut(rows, ui).copy_from(self.input.offsets());
        (g, r)
    }

    /// Row slacks `r − G u` of the supervision constraints.
    pub fn slacks(&self, x: &DVector<f64>, w_m: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (g, r) = self.constraints(x, w_m);
        r - g * u
    }

    /// `argmin ‖u − u0‖²` over inputs that keep `h(x⁺) ≥ α h(x)` robustly.
    pub fn supervise(&self, x: &DVector<f64>, w_m: &DVector<f64>, u0: &DVector<f64>) -> Result<DVector<f64>, CbfError> {
        if x.len() != self.sys.states() || w_m.len() != self.sys.measured_dim() || u0.len() != self.sys.inputs() {
            return Err(CbfError::DimensionMismatch("state, measured disturbance or input".into()));
        }
        let (g, r) = self.constraints(x, w_m);
        if (&r - &g * u0).min() >= -FEASIBILITY_TOL {
            return Ok(u0.clone());
        }
        let m = u0.len();
        let qp = QpProblem::new(DMatrix::identity(m, m), -u0).with_ub(g, r);
        match solve_qp(&qp) {
            Ok(sol) => Ok(sol.point),
            Err(OptimError::Infeasible { constraint }) => Err(CbfError::SupervisionInfeasible { row: constraint }),
            Err(e) => Err(e.into()),
        }
    }
}

/// Which barrier condition failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CbfCondition {
    /// Initial set not inside the barrier set.
    InitialSet,
    /// Barrier set meets the danger set.
    DangerSet,
    /// Supervision infeasible at a sampled state.
    Supervision,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Certification {
    Certified,
    Failed(CbfCondition),
}

impl Certification {
    pub fn is_certified(&self) -> bool {
        matches!(self, Certification::Certified)
    }
}

/// Random point of `set` with `h ≥ 0`: a boundary point in a random
/// direction, pulled toward the origin by a random factor.
pub fn sample_inside<R: Rng>(set: &Polytope, rng: &mut R) -> Result<DVector<f64>, PolytopeError> {
    loop {
        let dir = DVector::from_fn(set.dim(), |_, _| rng.gen_range(-1.0..1.0));
        if dir.norm() < 1e-6 {
            continue;
        }
        if let (_, Some(x)) = set.support_point(&dir)? {
            return Ok(x * rng.gen_range(0.0..=1.0));
        }
    }
}

/// Check the three barrier conditions: `X₀ ⊆ C`, `C` disjoint from every
/// danger polytope, and supervision feasible at `samples` states of `C`
/// under extreme measured disturbances (vertices of the bounding box of
/// `measured`).
pub fn certify_cbf<R: Rng>(
    sup: &Supervisor,
    initial: &Polytope,
    danger: &[Polytope],
    measured: &Polytope,
    samples: usize,
    rng: &mut R,
) -> Result<Certification, CbfError> {
    let set = &sup.barrier.set;
    if !Polytope::is_subset(initial, set, 1e-9)? {
        return Ok(Certification::Failed(CbfCondition::InitialSet));
    }
    for d in danger {
        if !set.intersect(d)?.is_empty()? {
            return Ok(Certification::Failed(CbfCondition::DangerSet));
        }
    }
    let bbox = measured.bounding_box()?;
    let zero = DVector::zeros(sup.sys.inputs());
    for _ in 0..samples {
        let x = sample_inside(set, rng)?;
        let w = DVector::from_iterator(bbox.len(), bbox.iter().map(|&(lo, hi)| if rng.gen_bool(0.5) { hi } else { lo }));
        match sup.supervise(&x, &w, &zero) {
            Ok(_) => {}
            Err(CbfError::SupervisionInfeasible { .. }) => return Ok(Certification::Failed(CbfCondition::Supervision)),
            Err(e) => return Err(e),
        }
    }
    Ok(Certification::Certified)
}
