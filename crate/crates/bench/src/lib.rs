//! Problem generators shared by the benchmarks.

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use netcbf::optim::{LpProblem, QpProblem};
use netcbf::polytope::Polytope;
use netcbf::rci::{fan_template, DisturbanceSpec, LinearSubsystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Box of half-width 2 cut by `extra` random half-spaces.
fn random_rows(rng: &mut ChaCha8Rng, n: usize, extra: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows = 2 * n + extra;
    let mut a = DMatrix::zeros(rows, n);
    let mut b = DVector::from_element(rows, 2.0);
    for i in 0..n {
        a[(2 * i, i)] = 1.0;
        a[(2 * i + 1, i)] = -1.0;
    }
    for k in 2 * n..rows {
        for j in 0..n {
            a[(k, j)] = rng.gen_range(-1.0..1.0);
        }
        b[k] = rng.gen_range(0.2..1.5);
    }
    (a, b)
}

pub fn random_lp(seed: u64, n: usize, extra: usize) -> LpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = random_rows(&mut rng, n, extra);
    let c = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    LpProblem::new(c).with_ub(a, b)
}

pub fn random_qp(seed: u64, n: usize, extra: usize) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let h = m.transpose() * &m + DMatrix::identity(n, n) * 0.1;
    let g = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let (a, b) = random_rows(&mut rng, n, extra);
    QpProblem::new(h, g).with_ub(a, b)
}

/// A damped oscillator with one coupling input and one exogenous input.
pub fn oscillator() -> (LinearSubsystem, DMatrix<f64>, DisturbanceSpec) {
    let sys = LinearSubsystem {
        a: dmatrix![1.0, 0.1; -0.1, 0.95],
        b: dmatrix![0.0; 0.1],
        e_coupling: dmatrix![0.0; 0.05],
        e_exo: dmatrix![0.0; 0.1],
        output: dvector![1.0, 0.0],
        ts: 0.1,
        neighbors: vec![1],
    };
    let (template, _) = fan_template(8, [1.0, 0.5]);
    let dist = DisturbanceSpec {
        measured: Polytope::symmetric_box(&[0.2, 0.1]),
        w_u_max: dvector![0.001, 0.002],
        input: Polytope::symmetric_box(&[3.0]),
    };
    (sys, template, dist)
}
