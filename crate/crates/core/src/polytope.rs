//! H-representation polytopes `{x | P·x ≤ q}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{solve_lp, LpProblem, OptimError, Status};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("polytope is empty")]
    EmptyPolytope,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed polytope: {0}")]
    Malformed(String),
    #[error(transparent)]
    Solver(#[from] OptimError),
}

/// Polytope in H-representation. Rows are stored as given (no normalisation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolytopeData", into = "PolytopeData")]
pub struct Polytope {
    p: DMatrix<f64>,
    q: DVector<f64>,
}

/// Dense row-major form used in scenario and artifact files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolytopeData {
    pub rows: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

impl TryFrom<PolytopeData> for Polytope {
    type Error = PolytopeError;

    fn try_from(d: PolytopeData) -> Result<Self, Self::Error> {
        if d.rows.len() != d.offsets.len() {
            return Err(PolytopeError::Malformed(format!(
                "{} rows but {} offsets",
                d.rows.len(),
                d.offsets.len()
            )));
        }
        let n = d.rows.first().map_or(0, Vec::len);
        if d.rows.iter().any(|r| r.len() != n) {
            return Err(PolytopeError::Malformed("ragged rows".into()));
        }
        let flat: Vec<f64> = d.rows.iter().flatten().copied().collect();
        Polytope::new(DMatrix::from_row_slice(d.rows.len(), n, &flat), DVector::from_vec(d.offsets))
    }
}

impl From<Polytope> for PolytopeData {
    fn from(p: Polytope) -> Self {
        PolytopeData {
            rows: p.p.row_iter().map(|r| r.iter().copied().collect()).collect(),
            offsets: p.q.iter().copied().collect(),
        }
    }
}

impl Polytope {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>) -> Result<Self, PolytopeError> {
        if p.nrows() != q.len() {
            return Err(PolytopeError::DimensionMismatch { expected: p.nrows(), got: q.len() });
        }
        if q.iter().any(|v| v.is_nan()) || p.iter().any(|v| !v.is_finite()) {
            return Err(PolytopeError::Malformed("non-finite entries".into()));
        }
        Ok(Self { p, q })
    }

    /// Axis-aligned box `lo ≤ x ≤ hi`, rows ordered `+e_0, −e_0, +e_1, −e_1, …`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Self {
        let n = lo.len();
        let mut p = DMatrix::zeros(2 * n, n);
        let mut q = DVector::zeros(2 * n);
        for i in 0..n {
            p[(2 * i, i)] = 1.0;
            q[2 * i] = hi[i];
            p[(2 * i + 1, i)] = -1.0;
            q[2 * i + 1] = -lo[i];
        }
        Self { p, q }
    }

    /// Symmetric box `|x_i| ≤ r_i`.
    pub fn symmetric_box(radius: &[f64]) -> Self {
        let lo: Vec<f64> = radius.iter().map(|r| -r).collect();
        Self::from_box(&lo, radius)
    }

    pub fn dim(&self) -> usize {
        self.p.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.p.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn with_offsets(&self, q: DVector<f64>) -> Self {
        assert_eq!(q.len(), self.q.len());
        Self { p: self.p.clone(), q }
    }

    /// `{α·x | x ∈ self}` for `α > 0`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self { p: self.p.clone(), q: &self.q * alpha }
    }

    /// Intersection (row concatenation).
    pub fn intersect(&self, other: &Polytope) -> Result<Self, PolytopeError> {
        self.check_dim(other.dim())?;
        let mut p = DMatrix::zeros(self.num_rows() + other.num_rows(), self.dim());
        p.rows_mut(0, self.num_rows()).copy_from(&self.p);
        p.rows_mut(self.num_rows(), other.num_rows()).copy_from(&other.p);
        let q = DVector::from_iterator(p.nrows(), self.q.iter().chain(other.q.iter()).copied());
        Ok(Self { p, q })
    }

    /// Cartesian product `self × other` with block-diagonal rows.
    pub fn product(&self, other: &Polytope) -> Self {
        let (r1, r2) = (self.num_rows(), other.num_rows());
        let mut p = DMatrix::zeros(r1 + r2, self.dim() + other.dim());
        p.view_mut((0, 0), (r1, self.dim())).copy_from(&self.p);
        p.view_mut((r1, self.dim()), (r2, other.dim())).copy_from(&other.p);
        let q = DVector::from_iterator(r1 + r2, self.q.iter().chain(other.q.iter()).copied());
        Self { p, q }
    }

    fn check_dim(&self, got: usize) -> Result<(), PolytopeError> {
        if got == self.dim() {
            Ok(())
        } else {
            Err(PolytopeError::DimensionMismatch { expected: self.dim(), got })
        }
    }

    /// `max direction·x` over the polytope; `+∞` when unbounded in that direction.
    pub fn support(&self, direction: &DVector<f64>) -> Result<f64, PolytopeError> {
        self.support_point(direction).map(|(v, _)| v)
    }

    /// Support value together with a maximiser (absent when unbounded).
    pub fn support_point(
        &self,
        direction: &DVector<f64>,
    ) -> Result<(f64, Option<DVector<f64>>), PolytopeError> {
        self.check_dim(direction.len())?;
        let lp = LpProblem::new(-direction).with_ub(self.p.clone(), self.q.clone());
        let sol = solve_lp(&lp)?;
        match sol.status {
            Status::Optimal => Ok((-sol.value, Some(sol.point))),
            Status::Unbounded => Ok((f64::INFINITY, None)),
            Status::Infeasible => Err(PolytopeError::EmptyPolytope),
        }
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool, PolytopeError> {
        self.check_dim(x.len())?;
        let px = &self.p * x;
        Ok(px.iter().zip(self.q.iter()).all(|(a, b)| *a <= *b + tol))
    }

    /// `inner ⊆ outer` up to `tol`, checked row by row on `outer`.
    pub fn is_subset(inner: &Polytope, outer: &Polytope, tol: f64) -> Result<bool, PolytopeError> {
        inner.check_dim(outer.dim())?;
        for k in 0..outer.num_rows() {
            let row = outer.p.row(k).transpose();
            if inner.support(&row)? > outer.q[k] + tol {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// `max |c·x|` over the polytope.
    pub fn output_bound(&self, c: &DVector<f64>) -> Result<f64, PolytopeError> {
        Ok(self.support(c)?.max(self.support(&-c)?))
    }

    pub fn is_empty(&self) -> Result<bool, PolytopeError> {
        match self.support(&DVector::zeros(self.dim())) {
            Ok(_) => Ok(false),
            Err(PolytopeError::EmptyPolytope) => Ok(true),
            Err(e) => Err(e),
        }
    }

    /// Per-axis `(min, max)`; infinite entries mark unbounded axes.
    pub fn bounding_box(&self) -> Result<Vec<(f64, f64)>, PolytopeError> {
        (0..self.dim())
            .map(|i| {
                let mut e = DVector::zeros(self.dim());
                e[i] = 1.0;
                let hi = self.support(&e)?;
                let lo = -self.support(&-e)?;
                Ok((lo, hi))
            })
            .collect()
    }

    pub fn is_bounded(&self) -> Result<bool, PolytopeError> {
        Ok(self.bounding_box()?.iter().all(|(lo, hi)| lo.is_finite() && hi.is_finite()))
    }

    /// Vertices of a box polytope built by [`Polytope::from_box`] are the
    /// sign patterns of its half-widths; this enumerates `{±r}` corners for a
    /// symmetric radius vector.
    pub fn box_corners(radius: &[f64]) -> Vec<DVector<f64>> {
        let n = radius.len();
        (0..1usize << n)
            .map(|mask| {
                DVector::from_iterator(
                    n,
                    (0..n).map(|i| if mask >> i & 1 == 1 { radius[i] } else { -radius[i] }),
                )
            })
            .collect()
    }
}
