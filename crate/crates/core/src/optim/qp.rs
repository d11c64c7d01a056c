use nalgebra::{DMatrix, DVector};

use super::{Duals, OptimError, QpProblem, Solution, Status};

/// Diagonal shift applied to the Hessian before factorisation.
const REGULARIZATION: f64 = 1e-10;
const VIOLATION_TOL: f64 = 1e-11;

/// Solve a convex QP with the Goldfarb–Idnani dual active-set method.
///
/// The method starts from the unconstrained minimiser and adds violated
/// constraints one at a time while keeping the multipliers dual feasible, so no
/// primal feasible starting point is needed and infeasibility is detected when
/// a violated constraint cannot be made active.
///
/// Constraint indices reported in [`OptimError::Infeasible`] count inequality
/// rows first, then equality rows.
pub fn solve_qp(problem: &QpProblem) -> Result<Solution, OptimError> {
    problem.validate()?;
    let n = problem.num_vars();
    let n_ub = problem.b_ub.len();
    let n_eq = problem.b_eq.len();

    let mut h = problem.hessian.clone();
    for i in 0..n {
        h[(i, i)] += REGULARIZATION;
    }
    let chol = match h.clone().cholesky() {
        Some(c) => c,
        None => {
            let min_eig = problem.hessian.clone().symmetric_eigenvalues().min();
            return Err(OptimError::NotPsd(min_eig));
        }
    };
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("cholesky factor is nonsingular");
    let mut state = ActiveSet {
        j: l_inv.transpose(),
        r: DMatrix::zeros(n, n),
        active: Vec::new(),
        mult: Vec::new(),
        x: -chol.solve(&problem.linear),
    };
    let j_scale = state.j.amax().max(1.0);

    // Constraints as `normal·x ≥ rhs`; equalities keep the orientation chosen when added.
    let normal = |c: usize| -> DVector<f64> {
        if c < n_ub {
            -problem.a_ub.row(c).transpose()
        } else {
            problem.a_eq.row(c - n_ub).transpose()
        }
    };
    let rhs = |c: usize| -> f64 {
        if c < n_ub {
            -problem.b_ub[c]
        } else {
            problem.b_eq[c - n_ub]
        }
    };
    let mut eq_sign = vec![1.0; n_eq];
    let max_steps = 50 * (n + n_ub + n_eq) + 100;
    let mut steps = 0usize;

    for (e, sign) in eq_sign.iter_mut().enumerate() {
        let c = n_ub + e;
        let mut np = normal(c);
        let mut bp = rhs(c);
        if np.dot(&state.x) - bp > 0.0 {
            *sign = -1.0;
            np = -np;
            bp = -bp;
        }
        state.add(c, &np, bp, true, n_ub, j_scale, &mut steps, max_steps)?;
    }

    loop {
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..n_ub {
            if state.active.contains(&i) {
                continue;
            }
            let s = normal(i).dot(&state.x) - rhs(i);
            let tol = VIOLATION_TOL * problem.b_ub[i].abs().max(1.0);
            if s < -tol && worst.is_none_or(|(_, w)| s < w) {
                worst = Some((i, s));
            }
        }
        let Some((p, _)) = worst else { break };
        let np = normal(p);
        state.add(p, &np, rhs(p), false, n_ub, j_scale, &mut steps, max_steps)?;
    }

    let mut duals = Duals::zeros(n_ub, n_eq, n);
    for (&c, &u) in state.active.iter().zip(state.mult.iter()) {
        if c < n_ub {
            duals.ineq[c] = u;
        } else {
            duals.eq[c - n_ub] = -eq_sign[c - n_ub] * u;
        }
    }
    let value = problem.objective(&state.x);
    Ok(Solution {
        status: Status::Optimal,
        point: state.x,
        value,
        duals,
        certificate: None,
    })
}

/// Factorised active set: `Jᵀ·N_active = [R; 0]` with `R` upper triangular and
/// `J·Jᵀ = H⁻¹`.
struct ActiveSet {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    active: Vec<usize>,
    mult: Vec<f64>,
    x: DVector<f64>,
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

impl ActiveSet {
    fn q(&self) -> usize {
        self.active.len()
    }

    fn rotate_j(&mut self, a: usize, b: usize, c: f64, s: f64) {
        let n = self.j.nrows();
        for row in 0..n {
            let (ja, jb) = (self.j[(row, a)], self.j[(row, b)]);
            self.j[(row, a)] = c * ja + s * jb;
            self.j[(row, b)] = -s * ja + c * jb;
        }
    }

    /// Drive the constraint `np·x ≥ bp` to activity, dropping blocking
    /// inequality constraints on the way.
    #[allow(clippy::too_many_arguments)]
    fn add(
        &mut self,
        id: usize,
        np: &DVector<f64>,
        bp: f64,
        is_eq: bool,
        n_ub: usize,
        j_scale: f64,
        steps: &mut usize,
        max_steps: usize,
    ) -> Result<(), OptimError> {
        let n = self.j.nrows();
        let mut u_p = 0.0;
        loop {
            *steps += 1;
            if *steps > max_steps {
                return Err(OptimError::Degenerate(*steps));
            }
            let q = self.q();
            let s_p = np.dot(&self.x) - bp;
            let d = self.j.tr_mul(np);
            let mut z = DVector::zeros(n);
            for k in q..n {
                z.axpy(d[k], &self.j.column(k), 1.0);
            }
            let r = if q > 0 {
                self.r
                    .view((0, 0), (q, q))
                    .solve_upper_triangular(&d.rows(0, q).into_owned())
                    .unwrap_or_else(|| DVector::zeros(q))
            } else {
                DVector::zeros(0)
            };

            let mut t1 = f64::INFINITY;
            let mut block = None;
            for k in 0..q {
                if self.active[k] < n_ub && r[k] > 1e-14 {
                    let ratio = self.mult[k] / r[k];
                    if ratio < t1 {
                        t1 = ratio;
                        block = Some(k);
                    }
                }
            }
            let z_dir = z.dot(np);
            let dependent = z.norm() <= 1e-12 * j_scale * np.norm().max(1e-300);
            let t2 = if dependent || z_dir <= 0.0 {
                f64::INFINITY
            } else {
                (-s_p / z_dir).max(0.0)
            };

            if dependent && is_eq && s_p.abs() <= VIOLATION_TOL * bp.abs().max(1.0) {
                // Redundant, consistent equality.
                return Ok(());
            }
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(OptimError::Infeasible { constraint: id });
            }
            if !t2.is_finite() {
                for k in 0..q {
                    self.mult[k] -= t * r[k];
                }
                u_p += t;
                self.drop(block.expect("finite t1 has a blocking index"));
                continue;
            }
            self.x.axpy(t, &z, 1.0);
            for k in 0..q {
                self.mult[k] -= t * r[k];
            }
            u_p += t;
            if t2 <= t1 {
                self.push(id, u_p, d);
                return Ok(());
            }
            self.drop(block.expect("t1 < t2 implies a blocking index"));
        }
    }

    fn push(&mut self, id: usize, mult: f64, mut d: DVector<f64>) {
        let n = self.j.nrows();
        let q = self.q();
        for k in (q + 1..n).rev() {
            let (c, s, h) = givens(d[k - 1], d[k]);
            d[k - 1] = h;
            d[k] = 0.0;
            self.rotate_j(k - 1, k, c, s);
        }
        for k in 0..=q {
            self.r[(k, q)] = d[k];
        }
        self.active.push(id);
        self.mult.push(mult.max(0.0));
    }

    fn drop(&mut self, k: usize) {
        let q = self.q();
        self.active.remove(k);
        self.mult.remove(k);
        for col in k..q - 1 {
            let next = self.r.column(col + 1).into_owned();
            self.r.set_column(col, &next);
        }
        self.r.column_mut(q - 1).fill(0.0);
        let q = q - 1;
        for row in k..q {
            let (c, s, h) = givens(self.r[(row, row)], self.r[(row + 1, row)]);
            self.r[(row, row)] = h;
            self.r[(row + 1, row)] = 0.0;
            for col in row + 1..q {
                let (a, b) = (self.r[(row, col)], self.r[(row + 1, col)]);
                self.r[(row, col)] = c * a + s * b;
                self.r[(row + 1, col)] = -s * a + c * b;
            }
            self.rotate_j(row, row + 1, c, s);
        }
    }
}
