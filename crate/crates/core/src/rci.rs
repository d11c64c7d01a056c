//! Minimal robust control invariant sets by iterated robust-LP propagation.
//!
//! A subsystem `x⁺ = A x + B u + E₁ y_N + E₂ d + w_u` is driven by a measured
//! disturbance `w_m = [y_N; d] ∈ W_m` and an unmeasured box disturbance
//! `|w_u| ≤ w̄_u`. The set `{x | P x ≤ q}` keeps its row normals fixed; each
//! one-step LP searches for a linear policy `u = K_ff w_m + K_fb x` and the
//! tightest offsets `q⁺` that contain every successor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{solve_lp, Certificate, LpProblem, OptimError, Solution, Status};
use crate::polytope::{Polytope, PolytopeError};
use crate::serde_util;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RciError {
    #[error("robust one-step problem infeasible (row {row})")]
    Infeasible { row: usize },
    #[error("iteration diverged at step {iteration}: offset {value:e} exceeds blow-up bound")]
    Diverged { iteration: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Solver(#[from] OptimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSubsystem {
    #[serde(with = "serde_util::matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub b: DMatrix<f64>,
    /// Acts on neighbour outputs.
    #[serde(with = "serde_util::matrix")]
    pub e_coupling: DMatrix<f64>,
    /// Acts on exogenous inputs.
    #[serde(with = "serde_util::matrix")]
    pub e_exo: DMatrix<f64>,
    #[serde(with = "serde_util::vector")]
    pub output: DVector<f64>,
    pub ts: f64,
    pub neighbors: Vec<usize>,
}

impl LinearSubsystem {
    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn coupling_dim(&self) -> usize {
        self.e_coupling.ncols()
    }

    pub fn measured_dim(&self) -> usize {
        self.e_coupling.ncols() + self.e_exo.ncols()
    }

    /// `[E₁ E₂]`.
    pub fn e(&self) -> DMatrix<f64> {
        let n = self.states();
        let mut e = DMatrix::zeros(n, self.measured_dim());
        e.columns_mut(0, self.coupling_dim()).copy_from(&self.e_coupling);
        e.columns_mut(self.coupling_dim(), self.e_exo.ncols()).copy_from(&self.e_exo);
        e
    }

    pub fn validate(&self) -> Result<(), RciError> {
        let n = self.states();
        let bad = |what: &str| Err(RciError::DimensionMismatch(what.to_string()));
        if self.a.ncols() != n {
            return bad("A must be square");
        }
        if self.b.nrows() != n || self.e_coupling.nrows() != n || self.e_exo.nrows() != n {
            return bad("B/E row count");
        }
        if self.output.len() != n {
            return bad("output row length");
        }
        if self.output.iter().all(|v| *v == 0.0) {
            return bad("output row is zero");
        }
        if !(self.ts > 0.0) {
            return bad("sample time must be positive");
        }
        Ok(())
    }

    /// Successor `A x + B u + E w_m + w_u`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w_m: &DVector<f64>, w_u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + self.e() * w_m + w_u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    /// Over `[y_N; d]`.
    pub measured: Polytope,
    #[serde(with = "serde_util::vector")]
    pub w_u_max: DVector<f64>,
    pub input: Polytope,
}

impl DisturbanceSpec {
    fn check(&self, sys: &LinearSubsystem) -> Result<(), RciError> {
        if self.measured.dim() != sys.measured_dim() {
            return Err(RciError::DimensionMismatch("measured set dimension".into()));
        }
        if self.input.dim() != sys.inputs() {
            return Err(RciError::DimensionMismatch("input set dimension".into()));
        }
        if self.w_u_max.len() != sys.states() || self.w_u_max.iter().any(|v| *v < 0.0) {
            return Err(RciError::DimensionMismatch("unmeasured bound".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RciResult {
    pub set: Polytope,
    #[serde(with = "serde_util::matrix")]
    pub k_ff: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub k_fb: DMatrix<f64>,
    /// Unmeasured bound the set was computed against.
    #[serde(with = "serde_util::vector")]
    pub w_u_max: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `max(q⁺ − q, 0)` of one more propagation under the returned gains:
    /// the amount by which the set is only approximately invariant.
    #[serde(default)]
    pub gap: f64,
}

impl RciResult {
    pub fn policy(&self, x: &DVector<f64>, w_m: &DVector<f64>) -> DVector<f64> {
        &self.k_ff * w_m + &self.k_fb * x
    }
}

/// Result of one robust propagation.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub q_plus: DVector<f64>,
    pub k_ff: DMatrix<f64>,
    pub k_fb: DMatrix<f64>,
    /// `q⁺ ≤ M q + c` holds for every `q` with the returned gains.
    affine: (DMatrix<f64>, DVector<f64>),
}

/// Upper bound on a template row offset.
pub type RowCap = (usize, f64);

/// Weight on `Σ|K_fb|` that breaks ties between equally tight policies in
/// favour of feedforward on measured signals.
const FEEDBACK_TIE_BREAK: f64 = 1e-6;

struct Layout {
    l: usize,
    n: usize,
    m: usize,
    r: usize,
    sw: usize,
    su: usize,
}

impl Layout {
    fn q_plus(&self, k: usize) -> usize {
        k
    }
    fn k_fb(&self, i: usize, c: usize) -> usize {
        self.l + i * self.n + c
    }
    fn k_ff(&self, i: usize, c: usize) -> usize {
        self.l + self.m * self.n + i * self.r + c
    }
    fn mu(&self, k: usize, j: usize) -> usize {
        self.l + self.m * (self.n + self.r) + k * self.l + j
    }
    fn nu(&self, k: usize, j: usize) -> usize {
        self.mu(self.l, 0) + k * self.sw + j
    }
    fn alpha(&self, k: usize, j: usize) -> usize {
        self.nu(self.l, 0) + k * self.l + j
    }
    fn beta(&self, k: usize, j: usize) -> usize {
        self.alpha(self.su, 0) + k * self.sw + j
    }
    fn abs_fb(&self, i: usize, c: usize) -> usize {
        self.beta(self.su, 0) + i * self.n + c
    }
    fn total(&self) -> usize {
        self.abs_fb(self.m, 0)
    }
}

/// One robust propagation step: the tightest `q⁺` (in the sense of `Σq⁺`)
/// containing all successors of `Poly(P, q)` under some linear policy.
///
/// Each robust row `max_{x, w} P_k x⁺ ≤ q⁺_k` is replaced by its LP dual,
/// which is linear in the gains, so the whole step is a single LP.
/// `floor` gives optional lower bounds on `q⁺`; `feedback_columns` restricts
/// `K_fb` to the listed state columns.
pub fn one_step_propagate(
    sys: &LinearSubsystem,
    template: &DMatrix<f64>,
    q: &DVector<f64>,
    dist: &DisturbanceSpec,
    caps: &[RowCap],
    floor: Option<&DVector<f64>>,
    feedback_columns: Option<&[usize]>,
) -> Result<Propagation, RciError> {
    sys.validate()?;
    dist.check(sys)?;
    if template.ncols() != sys.states() || template.nrows() != q.len() {
        return Err(RciError::DimensionMismatch("template vs offsets".into()));
    }
    let hw = dist.measured.normals();
    let w_off = dist.measured.offsets();
    let hu = dist.input.normals();
    let u_off = dist.input.offsets();
    let lay = Layout {
        l: template.nrows(),
        n: sys.states(),
        m: sys.inputs(),
        r: sys.measured_dim(),
        sw: hw.nrows(),
        su: hu.nrows(),
    };
    let (l, n, m, r) = (lay.l, lay.n, lay.m, lay.r);
    let nv = lay.total();
    let e = sys.e();
    let pa = template * &sys.a;
    let pb = template * &sys.b;
    let pe = template * &e;

    let n_ub = l + lay.su + 2 * m * n;
    let n_eq = (l + lay.su) * (n + r);
    let mut a_ub = DMatrix::zeros(n_ub, nv);
    let mut b_ub = DVector::zeros(n_ub);
    let mut a_eq = DMatrix::zeros(n_eq, nv);
    let mut b_eq = DVector::zeros(n_eq);

    for k in 0..l {
        for j in 0..l {
            a_ub[(k, lay.mu(k, j))] = q[j];
        }
        for j in 0..lay.sw {
            a_ub[(k, lay.nu(k, j))] = w_off[j];
        }
        a_ub[(k, lay.q_plus(k))] = -1.0;
        b_ub[k] = -template.row(k).abs().dot(&dist.w_u_max.transpose());

        for c in 0..n {
            let row = k * (n + r) + c;
            for j in 0..l {
                a_eq[(row, lay.mu(k, j))] = template[(j, c)];
            }
            for i in 0..m {
                a_eq[(row, lay.k_fb(i, c))] = -pb[(k, i)];
            }
            b_eq[row] = pa[(k, c)];
        }
        for c in 0..r {
            let row = k * (n + r) + n + c;
            for j in 0..lay.sw {
                a_eq[(row, lay.nu(k, j))] = hw[(j, c)];
            }
            for i in 0..m {
                a_eq[(row, lay.k_ff(i, c))] = -pb[(k, i)];
            }
            b_eq[row] = pe[(k, c)];
        }
    }

    for s in 0..lay.su {
        let ub_row = l + s;
        for j in 0..l {
            a_ub[(ub_row, lay.alpha(s, j))] = q[j];
        }
        for j in 0..lay.sw {
            a_ub[(ub_row, lay.beta(s, j))] = w_off[j];
        }
        b_ub[ub_row] = u_off[s];
        for c in 0..n {
            let row = (l + s) * (n + r) + c;
            for j in 0..l {
                a_eq[(row, lay.alpha(s, j))] = template[(j, c)];
            }
            for i in 0..m {
                a_eq[(row, lay.k_fb(i, c))] = -hu[(s, i)];
            }
        }
        for c in 0..r {
            let row = (l + s) * (n + r) + n + c;
            for j in 0..lay.sw {
                a_eq[(row, lay.beta(s, j))] = hw[(j, c)];
            }
            for i in 0..m {
                a_eq[(row, lay.k_ff(i, c))] = -hu[(s, i)];
            }
        }
    }

    for i in 0..m {
        for c in 0..n {
            let row = l + lay.su + 2 * (i * n + c);
            a_ub[(row, lay.k_fb(i, c))] = 1.0;
            a_ub[(row, lay.abs_fb(i, c))] = -1.0;
            a_ub[(row + 1, lay.k_fb(i, c))] = -1.0;
            a_ub[(row + 1, lay.abs_fb(i, c))] = -1.0;
        }
    }

    let mut objective = DVector::zeros(nv);
    for k in 0..l {
        objective[lay.q_plus(k)] = 1.0;
    }
    for i in 0..m {
        for c in 0..n {
            objective[lay.abs_fb(i, c)] = FEEDBACK_TIE_BREAK;
        }
    }
    let mut lower = DVector::zeros(nv);
    let mut upper = DVector::from_element(nv, f64::INFINITY);
    for k in 0..l {
        lower[lay.q_plus(k)] = floor.map_or(f64::NEG_INFINITY, |f| f[k]);
    }
    for i in 0..m {
        for c in 0..n {
            if feedback_columns.is_none_or(|cols| cols.contains(&c)) {
                lower[lay.k_fb(i, c)] = f64::NEG_INFINITY;
            } else {
                upper[lay.k_fb(i, c)] = 0.0;
            }
        }
        for c in 0..r {
            lower[lay.k_ff(i, c)] = f64::NEG_INFINITY;
        }
    }
    for &(row, cap) in caps {
        if row >= l {
            return Err(RciError::DimensionMismatch(format!("cap row {row} out of range")));
        }
        upper[lay.q_plus(row)] = upper[lay.q_plus(row)].min(cap);
    }

    let lp = LpProblem::new(objective)
        .with_ub(a_ub, b_ub)
        .with_eq(a_eq, b_eq)
        .with_bounds(lower, upper);
    let sol = solve_lp(&lp)?;
    match sol.status {
        Status::Optimal => {}
        Status::Unbounded => return Err(PolytopeError::EmptyPolytope.into()),
        Status::Infeasible => return Err(RciError::Infeasible { row: blocking_row(&sol, &lay) }),
    }
    let x = &sol.point;
    let q_plus = DVector::from_fn(l, |k, _| x[lay.q_plus(k)]);
    let k_fb = DMatrix::from_fn(m, n, |i, c| x[lay.k_fb(i, c)]);
    let k_ff = DMatrix::from_fn(m, r, |i, c| x[lay.k_ff(i, c)]);
    let mu = DMatrix::from_fn(l, l, |k, j| x[lay.mu(k, j)]);
    let offset = DVector::from_fn(l, |k, _| {
        let nu: f64 = (0..lay.sw).map(|j| x[lay.nu(k, j)] * w_off[j]).sum();
        nu + template.row(k).abs().dot(&dist.w_u_max.transpose())
    });
    Ok(Propagation { q_plus, k_ff, k_fb, affine: (mu, offset) })
}

/// Template row (or `L + input row`) carrying the largest Farkas weight.
fn blocking_row(sol: &Solution, lay: &Layout) -> usize {
    let Some(Certificate::Farkas(d)) = &sol.certificate else { return 0 };
    let caps = (0..lay.l).map(|k| (k, d.upper[lay.q_plus(k)]));
    let rows = (0..lay.l + lay.su).map(|k| (k, d.ineq[k]));
    caps.chain(rows)
        .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RciOptions {
    pub eps: f64,
    pub max_iter: usize,
    /// `Diverged` once any offset exceeds this multiple of `max(q0)`.
    pub blowup: f64,
    /// Iteration after which slow progress triggers a jump to the fixed point
    /// of the current affine majorant. `None` disables the jump.
    pub accelerate_after: Option<usize>,
    /// State columns the feedback gain may use; `None` allows all.
    ///
    /// With an input acting only on the velocity-like state, the one-step
    /// optimum tends to cancel the restoring term, which leaves the position
    /// marginally stable and the iteration growing until the input saturates.
    /// Restricting feedback to the velocity column rules that policy out.
    pub feedback_columns: Option<Vec<usize>>,
}

impl Default for RciOptions {
    fn default() -> Self {
        Self { eps: 1e-6, max_iter: 500, blowup: 1e4, accelerate_after: Some(20), feedback_columns: None }
    }
}

fn dominated(a: &DVector<f64>, b: &DVector<f64>, eps: f64) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| *x <= *y + eps)
}

fn finish(
    q: DVector<f64>,
    step: Propagation,
    template: &DMatrix<f64>,
    dist: &DisturbanceSpec,
    iterations: usize,
    converged: bool,
) -> Result<RciResult, RciError> {
    let gap = (&step.q_plus - &q).max().max(0.0);
    Ok(RciResult {
        set: Polytope::new(template.clone(), q)?,
        k_ff: step.k_ff,
        k_fb: step.k_fb,
        w_u_max: dist.w_u_max.clone(),
        iterations,
        converged,
        gap,
    })
}

/// Iterate `q ← q⁺` from `q0` until `q⁺ ≤ q + ε`.
///
/// The returned offsets are always certified by the returned gains: one more
/// propagation from them lands within `ε`. Every iterate is kept above the
/// seed `q0` (so the origin stays interior) and above `floor` when given,
/// which makes results monotone in the disturbance when a run is
/// warm-started from a smaller-disturbance result.
pub fn compute_mrci(
    sys: &LinearSubsystem,
    template: &DMatrix<f64>,
    q0: &DVector<f64>,
    dist: &DisturbanceSpec,
    caps: &[RowCap],
    floor: Option<&DVector<f64>>,
    opts: &RciOptions,
) -> Result<RciResult, RciError> {
    let limit = opts.blowup * q0.max().max(f64::MIN_POSITIVE);
    let lower = match floor {
        Some(f) => q0.sup(f),
        None => q0.clone(),
    };
    let floor = Some(&lower);
    let mut q = lower.clone();
    let mut last_gap = f64::INFINITY;
    let mut lps = 0usize;
    while lps < opts.max_iter {
        let step = one_step_propagate(sys, template, &q, dist, caps, floor, opts.feedback_columns.as_deref())?;
        lps += 1;
        let worst = step.q_plus.max();
        if !(worst <= limit) {
            return Err(RciError::Diverged { iteration: lps, value: worst });
        }
        if dominated(&step.q_plus, &q, opts.eps) {
            // Tighten to q⁺ when it certifies itself.
            let q_plus = step.q_plus.clone();
            let again = one_step_propagate(sys, template, &q_plus, dist, caps, floor, opts.feedback_columns.as_deref())?;
            lps += 1;
            if dominated(&again.q_plus, &q_plus, opts.eps) {
                return finish(q_plus, again, template, dist, lps, true);
            }
            return finish(q, step, template, dist, lps, true);
        }
        let gap = (&step.q_plus - &q).amax();
        let slow = gap > 0.5 * last_gap;
        last_gap = gap;
        q = match opts.accelerate_after {
            Some(after) if lps >= after && slow => affine_fixed_point(&step, caps, floor).unwrap_or(step.q_plus),
            _ => step.q_plus,
        };
    }
    let step = one_step_propagate(sys, template, &q, dist, caps, floor, opts.feedback_columns.as_deref())?;
    finish(q, step, template, dist, lps + 1, false)
}

/// Fixed point of `q = M q + c` from the current gains, if it is a finite
/// point above the current iterate that respects the caps.
fn affine_fixed_point(step: &Propagation, caps: &[RowCap], floor: Option<&DVector<f64>>) -> Option<DVector<f64>> {
    let (mu, c) = &step.affine;
    let l = c.len();
    // `(I − M)⁻¹ ≥ 0` holds exactly when the spectral radius of `M ≥ 0` is below one.
    let inv = (DMatrix::identity(l, l) - mu).try_inverse()?;
    if inv.iter().any(|v| *v < -1e-12) {
        return None;
    }
    let q = inv * c;
    if q.iter().any(|v| !v.is_finite()) || !dominated(&step.q_plus, &q, 1e-12) {
        return None;
    }
    if caps.iter().any(|&(row, cap)| q[row] > cap) {
        return None;
    }
    Some(match floor {
        Some(f) => q.sup(f),
        None => q,
    })
}

/// `|B K_ff|` summed over the coupling columns, times `ω_max τ`.
pub fn delay_disturbance_bound(sys: &LinearSubsystem, k_ff: &DMatrix<f64>, omega_max: f64, tau: f64) -> DVector<f64> {
    let p = sys.coupling_dim();
    let bk = &sys.b * k_ff.columns(0, p);
    DVector::from_fn(sys.states(), |i, _| bk.row(i).abs().sum() * omega_max * tau)
}

/// RCI whose unmeasured bound also covers the delay error induced by its own
/// feedforward gain. The bound is raised monotonically until it is
/// self-consistent (at most `max_outer` passes).
#[allow(clippy::too_many_arguments)]
pub fn compute_mrci_with_delay(
    sys: &LinearSubsystem,
    template: &DMatrix<f64>,
    q0: &DVector<f64>,
    dist: &DisturbanceSpec,
    omega_max: f64,
    tau: f64,
    caps: &[RowCap],
    floor: Option<&DVector<f64>>,
    opts: &RciOptions,
) -> Result<RciResult, RciError> {
    const MAX_OUTER: usize = 10;
    let mut local = dist.clone();
    let mut result = compute_mrci(sys, template, q0, &local, caps, floor, opts)?;
    for _ in 1..MAX_OUTER {
        let needed = &dist.w_u_max + delay_disturbance_bound(sys, &result.k_ff, omega_max, tau);
        if dominated(&needed, &local.w_u_max, 1e-8) {
            return Ok(result);
        }
        local.w_u_max = local.w_u_max.sup(&needed);
        let warm = result.set.offsets().clone();
        result = compute_mrci(sys, template, &warm, &local, caps, floor, opts)?;
    }
    let needed = &dist.w_u_max + delay_disturbance_bound(sys, &result.k_ff, omega_max, tau);
    if !dominated(&needed, &local.w_u_max, 1e-8) {
        result.converged = false;
    }
    Ok(result)
}

/// Regular fan of `dirs` unit directions in the plane, scaled per axis so
/// that row `k` is `(cos φ_k / s₀, sin φ_k / s₁)`, plus the `±e₁` rows when the
/// fan does not already contain them. Returns the template and the indices of
/// the `+e₁` and `−e₁` rows.
pub fn fan_template(dirs: usize, scale: [f64; 2]) -> (DMatrix<f64>, [usize; 2]) {
    let mut rows: Vec<[f64; 2]> = (0..dirs)
        .map(|k| {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / dirs as f64;
            let (s, c) = phi.sin_cos();
            let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
            [snap(c) / scale[0], snap(s) / scale[1]]
        })
        .collect();
    let find = |sign: f64, rows: &mut Vec<[f64; 2]>| {
        rows.iter()
            .position(|r| r[0] == 0.0 && r[1] * sign > 0.0)
            .unwrap_or_else(|| {
                rows.push([0.0, sign / scale[1]]);
                rows.len() - 1
            })
    };
    let up = find(1.0, &mut rows);
    let down = find(-1.0, &mut rows);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    (DMatrix::from_row_slice(rows.len(), 2, &flat), [up, down])
}

/// `[1; −1]` for scalar states.
pub fn interval_template() -> DMatrix<f64> {
    DMatrix::from_column_slice(2, 1, &[1.0, -1.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn scalar(a: f64, b: Option<f64>, e: f64) -> LinearSubsystem {
        LinearSubsystem {
            a: dmatrix![a],
            b: b.map_or(DMatrix::zeros(1, 0), |b| dmatrix![b]),
            e_coupling: DMatrix::zeros(1, 0),
            e_exo: dmatrix![e],
            output: dvector![1.0],
            ts: 1.0,
            neighbors: vec![],
        }
    }

    fn disturbance(w: f64, u: Option<f64>) -> DisturbanceSpec {
        DisturbanceSpec {
            measured: Polytope::symmetric_box(&[w]),
            w_u_max: dvector![0.0],
            input: match u {
                Some(u) => Polytope::symmetric_box(&[u]),
                None => Polytope::symmetric_box(&[]),
            },
        }
    }

    #[test]
    fn propagation_of_contraction_with_disturbance() {
        let s = one_step_propagate(&scalar(0.5, None, 1.0), &interval_template(), &dvector![2.0, 2.0], &disturbance(1.0, None), &[], None, None)
            .unwrap();
        assert!((&s.q_plus - dvector![2.0, 2.0]).amax() < 1e-9);
    }

    #[test]
    fn propagation_without_disturbance_contracts() {
        let s = one_step_propagate(&scalar(0.5, None, 1.0), &interval_template(), &dvector![2.0, 2.0], &disturbance(0.0, None), &[], None, None)
            .unwrap();
        assert!((&s.q_plus - dvector![1.0, 1.0]).amax() < 1e-9);
    }

    #[test]
    fn feedforward_cancels_measured_disturbance() {
        let q = dvector![0.5, 0.5];
        let s = one_step_propagate(&scalar(1.0, Some(1.0), 1.0), &interval_template(), &q, &disturbance(1.0, Some(1.0)), &[], None, None)
            .unwrap();
        assert!((s.k_ff[(0, 0)] + 1.0).abs() < 1e-6, "{}", s.k_ff);
        assert!((&s.q_plus - &q).amax() < 1e-6);
    }

    #[test]
    fn unmeasured_disturbance_adds_to_offsets() {
        let mut d = disturbance(0.0, None);
        d.w_u_max = dvector![0.25];
        let s = one_step_propagate(&scalar(0.5, None, 1.0), &interval_template(), &dvector![1.0, 1.0], &d, &[], None, None).unwrap();
        assert!((&s.q_plus - dvector![0.75, 0.75]).amax() < 1e-9);
    }

    #[test]
    fn mrci_of_scalar_contraction() {
        let r = compute_mrci(
            &scalar(0.5, None, 1.0),
            &interval_template(),
            &dvector![1e-3, 1e-3],
            &disturbance(1.0, None),
            &[],
            None,
            &RciOptions::default(),
        )
        .unwrap();
        assert!(r.converged);
        assert!((r.set.offsets() - dvector![2.0, 2.0]).amax() < 1e-6);
    }

    #[test]
    fn mrci_without_acceleration_also_converges() {
        let opts = RciOptions { accelerate_after: None, ..Default::default() };
        let r = compute_mrci(&scalar(0.5, None, 1.0), &interval_template(), &dvector![1e-3, 1e-3], &disturbance(1.0, None), &[], None, &opts)
            .unwrap();
        assert!(r.converged);
        assert!((r.set.offsets() - dvector![2.0, 2.0]).amax() < 1e-6);
    }

    #[test]
    fn mrci_without_disturbance_stays_small() {
        let q0 = dvector![1e-3, 1e-3];
        let r = compute_mrci(&scalar(0.5, None, 1.0), &interval_template(), &q0, &disturbance(0.0, None), &[], None, &RciOptions::default())
            .unwrap();
        assert!(r.converged);
        assert!(r.set.offsets().iter().all(|v| *v <= 1e-3 + 1e-6));
    }

    #[test]
    fn mrci_with_full_cancellation_collapses() {
        let q0 = dvector![1e-3, 1e-3];
        let opts = RciOptions::default();
        let r = compute_mrci(&scalar(1.0, Some(1.0), 1.0), &interval_template(), &q0, &disturbance(1.0, Some(2.0)), &[], None, &opts)
            .unwrap();
        assert!(r.converged);
        assert!(r.set.offsets().iter().all(|v| *v <= 1e-3 + 10.0 * opts.eps));
    }

    #[test]
    fn unstable_open_loop_diverges() {
        let err = compute_mrci(&scalar(1.5, None, 1.0), &interval_template(), &dvector![1e-3, 1e-3], &disturbance(1.0, None), &[], None, &RciOptions::default())
            .unwrap_err();
        assert!(matches!(err, RciError::Diverged { .. }));
    }

    #[test]
    fn conflicting_cap_is_infeasible() {
        let err = one_step_propagate(&scalar(0.5, None, 1.0), &interval_template(), &dvector![2.0, 2.0], &disturbance(1.0, None), &[(0, 1.0)], None, None)
            .unwrap_err();
        assert_eq!(err, RciError::Infeasible { row: 0 });
    }

    #[test]
    fn delay_bound_formula() {
        let mut sys = scalar(1.0, Some(2.0), 0.0);
        sys.e_coupling = dmatrix![1.0];
        let k_ff = dmatrix![1.0, 5.0];
        let b = delay_disturbance_bound(&sys, &k_ff, 0.05, 0.1);
        assert!((b[0] - 0.01).abs() < 1e-15);
        assert_eq!(delay_disturbance_bound(&sys, &k_ff, 0.05, 0.0)[0], 0.0);
        assert_eq!(delay_disturbance_bound(&sys, &DMatrix::zeros(1, 2), 0.05, 0.1)[0], 0.0);
    }

    #[test]
    fn fan_contains_omega_rows() {
        let (p, [up, down]) = fan_template(8, [1.0, 0.1]);
        assert_eq!(p.nrows(), 8);
        assert_eq!((p[(up, 0)], p[(up, 1)]), (0.0, 10.0));
        assert_eq!((p[(down, 0)], p[(down, 1)]), (0.0, -10.0));
        let (p6, [up6, down6]) = fan_template(6, [1.0, 1.0]);
        assert_eq!(p6.nrows(), 8);
        assert_eq!((up6, down6), (6, 7));
    }

    #[test]
    fn result_roundtrips_through_json() {
        let r = compute_mrci(&scalar(0.5, None, 1.0), &interval_template(), &dvector![1e-3, 1e-3], &disturbance(1.0, None), &[], None, &RciOptions::default())
            .unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: RciResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back.set, r.set);
        assert_eq!(back.converged, r.converged);
    }
}
