use nalgebra::{DMatrix, DVector};

use super::{Certificate, Duals, LpProblem, OptimError, Solution, Status, PIVOT_TOL};

const MAX_PIVOTS: usize = 200_000;
const REFACTOR_EVERY: usize = 64;
/// Consecutive degenerate pivots tolerated under Dantzig pricing before
/// switching to Bland's rule for the rest of the phase.
const BLAND_AFTER: usize = 32;
const COST_TOL: f64 = 1e-10;
const PHASE1_TOL: f64 = 1e-9;

/// How an original variable maps onto nonnegative standard-form columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// x = shift + x'
    Lower { col: usize, shift: f64 },
    /// x = shift − x'
    Upper { col: usize, shift: f64 },
    /// x = x⁺ − x⁻
    Free { pos: usize, neg: usize },
}

/// Standard form `min c'y  s.t.  A y = b, y ≥ 0` with artificial columns
/// appended at the end.
struct StandardForm {
    a: DMatrix<f64>,
    b: DVector<f64>,
    cost: DVector<f64>,
    /// `+1` or `−1`: how each standard-form row was scaled to make `b ≥ 0`.
    row_sign: Vec<f64>,
    first_artificial: usize,
    maps: Vec<VarMap>,
    /// Standard-form row of the `x' ≤ u − l` bound row for `Lower` vars.
    bound_rows: Vec<Option<usize>>,
    n_ub: usize,
    n_eq: usize,
    initial_basis: Vec<usize>,
}

/// Solve a dense LP with a two-phase revised simplex method.
///
/// Infeasible and unbounded outcomes are reported through [`Solution::status`]
/// together with a Farkas or ray certificate, not as errors.
pub fn solve_lp(problem: &LpProblem) -> Result<Solution, OptimError> {
    problem.validate()?;
    let n = problem.num_vars();
    let n_ub = problem.b_ub.len();
    let n_eq = problem.b_eq.len();

    for j in 0..n {
        if problem.lower[j] > problem.upper[j] {
            let mut duals = Duals::zeros(n_ub, n_eq, n);
            duals.lower[j] = 1.0;
            duals.upper[j] = 1.0;
            return Ok(Solution {
                status: Status::Infeasible,
                point: DVector::zeros(n),
                value: f64::INFINITY,
                duals: Duals::zeros(n_ub, n_eq, n),
                certificate: Some(Certificate::Farkas(duals)),
            });
        }
    }

    let sf = StandardForm::build(problem);
    let mut tab = Simplex::new(&sf);

    // Phase I: minimise the sum of artificials.
    let mut phase1_cost = DVector::zeros(sf.a.ncols());
    for j in sf.first_artificial..sf.a.ncols() {
        phase1_cost[j] = 1.0;
    }
    tab.run(&sf, &phase1_cost, true)?;
    let infeasibility = tab.objective(&phase1_cost);
    let scale = 1.0 + sf.b.amax();
    if infeasibility > PHASE1_TOL * scale {
        let y = tab.row_duals(&phase1_cost);
        let farkas = sf.map_duals(&y, &DVector::zeros(sf.a.ncols()), n, |j| {
            sf.reduced_cost(&DVector::zeros(sf.a.ncols()), &y, j)
        });
        return Ok(Solution {
            status: Status::Infeasible,
            point: sf.recover(&tab.primal(sf.a.ncols())),
            value: f64::INFINITY,
            duals: Duals::zeros(n_ub, n_eq, n),
            certificate: Some(Certificate::Farkas(farkas)),
        });
    }
    tab.expel_artificials(&sf);

    // Phase II.
    match tab.run(&sf, &sf.cost, false)? {
        Outcome::Optimal => {}
        Outcome::Unbounded { entering, column } => {
            let mut dir = DVector::zeros(sf.a.ncols());
            dir[entering] = 1.0;
            for (i, &bv) in tab.basis.iter().enumerate() {
                dir[bv] -= column[i];
            }
            let ray = sf.recover_direction(&dir);
            let point = sf.recover(&tab.primal(sf.a.ncols()));
            return Ok(Solution {
                status: Status::Unbounded,
                value: f64::NEG_INFINITY,
                point,
                duals: Duals::zeros(n_ub, n_eq, n),
                certificate: Some(Certificate::Ray(ray)),
            });
        }
    }

    let y_std = tab.primal(sf.a.ncols());
    let point = sf.recover(&y_std);
    let value = problem.objective.dot(&point);
    let y = tab.row_duals(&sf.cost);
    let duals = sf.map_duals(&y, &sf.cost, n, |j| sf.reduced_cost(&sf.cost, &y, j));
    Ok(Solution {
        status: Status::Optimal,
        point,
        value,
        duals,
        certificate: None,
    })
}

impl StandardForm {
    fn build(p: &LpProblem) -> Self {
        let n = p.num_vars();
        let n_ub = p.b_ub.len();
        let n_eq = p.b_eq.len();

        let mut maps = Vec::with_capacity(n);
        let mut n_struct = 0;
        let mut n_bound_rows = 0;
        for j in 0..n {
            let (l, u) = (p.lower[j], p.upper[j]);
            if l.is_finite() {
                maps.push(VarMap::Lower { col: n_struct, shift: l });
                n_struct += 1;
                if u.is_finite() {
                    n_bound_rows += 1;
                }
            } else if u.is_finite() {
                maps.push(VarMap::Upper { col: n_struct, shift: u });
                n_struct += 1;
            } else {
                maps.push(VarMap::Free { pos: n_struct, neg: n_struct + 1 });
                n_struct += 2;
            }
        }

        let n_ineq_rows = n_ub + n_bound_rows;
        let m = n_ineq_rows + n_eq;
        let n_slack = n_ineq_rows;
        // One artificial per row; unused ones stay out of the basis and are pruned below.
        let mut a = DMatrix::zeros(m, n_struct + n_slack + m);
        let mut b = DVector::zeros(m);
        let mut cost = DVector::zeros(n_struct + n_slack + m);

        let shift = |j: usize| match maps[j] {
            VarMap::Lower { shift, .. } | VarMap::Upper { shift, .. } => shift,
            VarMap::Free { .. } => 0.0,
        };
        let put = |a: &mut DMatrix<f64>, row: usize, j: usize, v: f64| match maps[j] {
            VarMap::Lower { col, .. } => a[(row, col)] += v,
            VarMap::Upper { col, .. } => a[(row, col)] -= v,
            VarMap::Free { pos, neg } => {
                a[(row, pos)] += v;
                a[(row, neg)] -= v;
            }
        };

        for (map, &c) in maps.iter().zip(p.objective.iter()) {
            match *map {
                VarMap::Lower { col, .. } => cost[col] = c,
                VarMap::Upper { col, .. } => cost[col] = -c,
                VarMap::Free { pos, neg } => {
                    cost[pos] = c;
                    cost[neg] = -c;
                }
            }
        }

        for i in 0..n_ub {
            let mut rhs = p.b_ub[i];
            for j in 0..n {
                let v = p.a_ub[(i, j)];
                if v != 0.0 {
                    put(&mut a, i, j, v);
                    rhs -= v * shift(j);
                }
            }
            a[(i, n_struct + i)] = 1.0;
            b[i] = rhs;
        }
        let mut bound_rows = vec![None; n];
        let mut row = n_ub;
        for j in 0..n {
            if let VarMap::Lower { col, shift } = maps[j] {
                if p.upper[j].is_finite() {
                    a[(row, col)] = 1.0;
                    a[(row, n_struct + row)] = 1.0;
                    b[row] = p.upper[j] - shift;
                    bound_rows[j] = Some(row);
                    row += 1;
                }
            }
        }
        for i in 0..n_eq {
            let r = n_ineq_rows + i;
            let mut rhs = p.b_eq[i];
            for j in 0..n {
                let v = p.a_eq[(i, j)];
                if v != 0.0 {
                    put(&mut a, r, j, v);
                    rhs -= v * shift(j);
                }
            }
            b[r] = rhs;
        }

        let mut row_sign = vec![1.0; m];
        for i in 0..m {
            if b[i] < 0.0 {
                row_sign[i] = -1.0;
                b[i] = -b[i];
                for k in 0..n_struct + n_slack {
                    a[(i, k)] = -a[(i, k)];
                }
            }
        }

        // Slack-basic rows need no artificial.
        let first_artificial = n_struct + n_slack;
        let mut initial_basis = Vec::with_capacity(m);
        let mut keep_art = Vec::new();
        for i in 0..m {
            if row_sign.get(i).is_some_and(|&s| i < n_ineq_rows && s > 0.0) {
                initial_basis.push(n_struct + i);
            } else {
                initial_basis.push(first_artificial + keep_art.len());
                keep_art.push(i);
            }
        }
        let n_cols = first_artificial + keep_art.len();
        let mut a_final = a.columns(0, n_cols).into_owned();
        for (k, &i) in keep_art.iter().enumerate() {
            for r in 0..m {
                a_final[(r, first_artificial + k)] = 0.0;
            }
            a_final[(i, first_artificial + k)] = 1.0;
        }
        let cost = cost.rows(0, n_cols).into_owned();

        Self {
            a: a_final,
            b,
            cost,
            row_sign,
            first_artificial,
            maps,
            bound_rows,
            n_ub,
            n_eq,
            initial_basis,
        }
    }

    fn recover(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.maps.len(),
            self.maps.iter().map(|m| match *m {
                VarMap::Lower { col, shift } => shift + y[col],
                VarMap::Upper { col, shift } => shift - y[col],
                VarMap::Free { pos, neg } => y[pos] - y[neg],
            }),
        )
    }

    fn recover_direction(&self, d: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.maps.len(),
            self.maps.iter().map(|m| match *m {
                VarMap::Lower { col, .. } => d[col],
                VarMap::Upper { col, .. } => -d[col],
                VarMap::Free { pos, neg } => d[pos] - d[neg],
            }),
        )
    }

    fn reduced_cost(&self, cost: &DVector<f64>, y: &DVector<f64>, col: usize) -> f64 {
        cost[col] - self.a.column(col).dot(y)
    }

    /// Translate standard-form row duals `y` into original-space multipliers.
    fn map_duals(
        &self,
        y: &DVector<f64>,
        _cost: &DVector<f64>,
        n: usize,
        reduced: impl Fn(usize) -> f64,
    ) -> Duals {
        let unscaled = |r: usize| self.row_sign[r] * y[r];
        let mut d = Duals::zeros(self.n_ub, self.n_eq, n);
        for i in 0..self.n_ub {
            d.ineq[i] = -unscaled(i);
        }
        let n_ineq_rows = self.a.nrows() - self.n_eq;
        for i in 0..self.n_eq {
            d.eq[i] = -unscaled(n_ineq_rows + i);
        }
        for j in 0..n {
            match self.maps[j] {
                VarMap::Lower { col, .. } => {
                    d.lower[j] = reduced(col);
                    if let Some(r) = self.bound_rows[j] {
                        d.upper[j] = -unscaled(r);
                    }
                }
                VarMap::Upper { col, .. } => d.upper[j] = reduced(col),
                VarMap::Free { .. } => {}
            }
        }
        d
    }
}

enum Outcome {
    Optimal,
    Unbounded { entering: usize, column: DVector<f64> },
}

/// Revised simplex state: basis indices, explicit basis inverse, basic values.
struct Simplex {
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    b_inv: DMatrix<f64>,
    x_b: DVector<f64>,
    since_refactor: usize,
}

impl Simplex {
    fn new(sf: &StandardForm) -> Self {
        let m = sf.a.nrows();
        let mut is_basic = vec![false; sf.a.ncols()];
        for &j in &sf.initial_basis {
            is_basic[j] = true;
        }
        Self {
            basis: sf.initial_basis.clone(),
            is_basic,
            b_inv: DMatrix::identity(m, m),
            x_b: sf.b.clone(),
            since_refactor: 0,
        }
    }

    fn primal(&self, ncols: usize) -> DVector<f64> {
        let mut y = DVector::zeros(ncols);
        for (i, &j) in self.basis.iter().enumerate() {
            y[j] = self.x_b[i].max(0.0);
        }
        y
    }

    fn objective(&self, cost: &DVector<f64>) -> f64 {
        self.basis.iter().zip(self.x_b.iter()).map(|(&j, &v)| cost[j] * v).sum()
    }

    fn row_duals(&self, cost: &DVector<f64>) -> DVector<f64> {
        let c_b = DVector::from_iterator(self.basis.len(), self.basis.iter().map(|&j| cost[j]));
        self.b_inv.tr_mul(&c_b)
    }

    fn refactor(&mut self, sf: &StandardForm) {
        let m = self.basis.len();
        let mut bmat = DMatrix::zeros(m, m);
        for (i, &j) in self.basis.iter().enumerate() {
            bmat.set_column(i, &sf.a.column(j));
        }
        if let Some(inv) = bmat.lu().try_inverse() {
            self.b_inv = inv;
            self.x_b = &self.b_inv * &sf.b;
        }
        self.since_refactor = 0;
    }

    fn run(&mut self, sf: &StandardForm, cost: &DVector<f64>, phase1: bool) -> Result<Outcome, OptimError> {
        let m = self.basis.len();
        let ncols = sf.a.ncols();
        let mut degenerate_streak = 0;
        let mut bland = false;
        for _ in 0..MAX_PIVOTS {
            let y = self.row_duals(cost);
            let mut entering = None;
            let mut best = -COST_TOL;
            for j in 0..ncols {
                if self.is_basic[j] || (!phase1 && j >= sf.first_artificial) {
                    continue;
                }
                let d = cost[j] - sf.a.column(j).dot(&y);
                if bland {
                    if d < -COST_TOL {
                        entering = Some(j);
                        break;
                    }
                } else if d < best {
                    best = d;
                    entering = Some(j);
                }
            }
            let Some(q) = entering else {
                return Ok(Outcome::Optimal);
            };

            let column = &self.b_inv * sf.a.column(q);
            let mut leave: Option<usize> = None;
            let mut ratio = f64::INFINITY;
            for i in 0..m {
                if column[i] > PIVOT_TOL {
                    let r = self.x_b[i].max(0.0) / column[i];
                    let better = match leave {
                        None => true,
                        Some(l) => {
                            r < ratio - 1e-14
                                || (r <= ratio + 1e-14 && self.basis[i] < self.basis[l])
                        }
                    };
                    if better {
                        ratio = r;
                        leave = Some(i);
                    }
                }
            }
            let Some(r) = leave else {
                return Ok(Outcome::Unbounded { entering: q, column });
            };

            if ratio <= 1e-14 {
                degenerate_streak += 1;
                if degenerate_streak > BLAND_AFTER {
                    bland = true;
                }
            } else {
                degenerate_streak = 0;
            }
            self.pivot(sf, r, q, &column);
        }
        Err(OptimError::Degenerate(MAX_PIVOTS))
    }

    fn pivot(&mut self, sf: &StandardForm, r: usize, q: usize, column: &DVector<f64>) {
        let m = self.basis.len();
        let piv = column[r];
        let theta = self.x_b[r] / piv;
        for i in 0..m {
            if i != r {
                self.x_b[i] -= theta * column[i];
            }
        }
        self.x_b[r] = theta;
        let pivot_row = self.b_inv.row(r) / piv;
        for i in 0..m {
            if i != r && column[i] != 0.0 {
                let f = column[i];
                for k in 0..m {
                    self.b_inv[(i, k)] -= f * pivot_row[k];
                }
            }
        }
        self.b_inv.set_row(r, &pivot_row);
        self.is_basic[self.basis[r]] = false;
        self.is_basic[q] = true;
        self.basis[r] = q;
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_EVERY {
            self.refactor(sf);
        }
    }

    /// After phase I, pivot zero-valued artificials out of the basis where a
    /// structural or slack column can replace them. Artificials left behind sit
    /// on redundant rows and stay at zero.
    fn expel_artificials(&mut self, sf: &StandardForm) {
        for r in 0..self.basis.len() {
            if self.basis[r] < sf.first_artificial {
                continue;
            }
            let row = self.b_inv.row(r).into_owned();
            let mut best: Option<(usize, f64)> = None;
            for j in 0..sf.first_artificial {
                if self.is_basic[j] {
                    continue;
                }
                let v = row.dot(&sf.a.column(j).transpose());
                if v.abs() > 1e-9 && best.is_none_or(|(_, b)| v.abs() > b) {
                    best = Some((j, v.abs()));
                }
            }
            if let Some((j, _)) = best {
                let column = &self.b_inv * sf.a.column(j);
                self.pivot(sf, r, j, &column);
            }
        }
        self.refactor(sf);
    }
}
