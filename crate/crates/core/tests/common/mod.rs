//! Independent brute-force oracles shared by the integration suites.
#![allow(dead_code)]

pub mod grid;
pub mod stl_oracle;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// All `k`-subsets of `0..n`.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Vertices of `{x | A x ≤ b}` by solving every square subsystem of rows.
pub fn enumerate_vertices(a: &DMatrix<f64>, b: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = a.ncols();
    let mut verts: Vec<DVector<f64>> = Vec::new();
    for rows in subsets(a.nrows(), n) {
        let sub = DMatrix::from_fn(n, n, |i, j| a[(rows[i], j)]);
        let rhs = DVector::from_fn(n, |i, _| b[rows[i]]);
        if sub.determinant().abs() < 1e-10 {
            continue;
        }
        let Some(x) = sub.lu().solve(&rhs) else { continue };
        if (a * &x - b).iter().all(|v| *v <= 1e-9) && !verts.iter().any(|v| (v - &x).amax() < 1e-9) {
            verts.push(x);
        }
    }
    verts
}

/// Minimum of `½xᵀHx + gᵀx` subject to `A x ≤ b` by enumerating active sets.
/// Returns `None` when no candidate is feasible.
pub fn qp_by_enumeration(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Option<(DVector<f64>, f64)> {
    let n = h.nrows();
    let m = a.nrows();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for k in 0..=m.min(n) {
        for set in subsets(m, k) {
            let dim = n + k;
            let mut kkt = DMatrix::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(h);
            for (r, &c) in set.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + r, j)] = a[(c, j)];
                    kkt[(j, n + r)] = a[(c, j)];
                }
                rhs[n + r] = b[c];
            }
            for j in 0..n {
                rhs[j] = -g[j];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let x = sol.rows(0, n).into_owned();
            if !(a * &x - b).iter().all(|v| *v <= 1e-9) {
                continue;
            }
            let f = 0.5 * x.dot(&(h * &x)) + g.dot(&x);
            if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
                best = Some((x, f));
            }
        }
    }
    best
}

/// Random bounded polytope containing the origin: a box of half-width `r`
/// cut by `extra` random half-spaces with positive offsets.
pub fn random_polytope<R: Rng>(rng: &mut R, n: usize, extra: usize, r: f64) -> (DMatrix<f64>, DVector<f64>) {
    let rows = 2 * n + extra;
    let mut a = DMatrix::zeros(rows, n);
    let mut b = DVector::zeros(rows);
    for i in 0..n {
        a[(2 * i, i)] = 1.0;
        a[(2 * i + 1, i)] = -1.0;
        b[2 * i] = r;
        b[2 * i + 1] = r;
    }
    for k in 0..extra {
        for j in 0..n {
            a[(2 * n + k, j)] = rng.gen_range(-1.0..1.0);
        }
        b[2 * n + k] = rng.gen_range(0.2..1.5);
    }
    (a, b)
}
